//! One-shot domain recognizer: a CNN trained with online semi-hard
//! triplet mining to place same-domain windows close together on the
//! 72-dim unit sphere, plus a binary class head used as the fallback
//! classifier. Domain relationships are read off the embedding space
//! by counting stored training neighbors within a distance threshold.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use crate::engine::{losses, Adam, AdamConfig, LayerSpec, Phase, Stack, Tensor};
use crate::ensemble::{RelSource, RelationshipVector};
use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::rng::{self, tag};

use super::{batch_tensor, stratified_batches, LabeledSet};

/// Embedding dimensionality.
pub const EMBED_DIM: usize = 72;
/// Hidden width of the class head.
const CLASS_HIDDEN: usize = 40;
/// Default triplet margin.
pub const DEFAULT_MARGIN: f64 = 1.0;
/// Batch chunk for inference-time embedding.
const EMBED_CHUNK: usize = 64;

/// Euclidean distance in f64 between two f32 vectors.
pub fn euclid(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Triplet loss: max(d(a,p) - d(a,n) + margin, 0).
pub fn triplet_loss(a: &[f32], p: &[f32], n: &[f32], margin: f64) -> f64 {
    (euclid(a, p) - euclid(a, n) + margin).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TripletCategory {
    Easy,
    Hard,
    SemiHard,
}

/// Categorizes by distances: easy iff d(a,p)+margin <= d(a,n), hard iff
/// d(a,n) <= d(a,p), semi-hard otherwise. The three cases partition all
/// distance configurations.
pub fn categorize(d_ap: f64, d_an: f64, margin: f64) -> TripletCategory {
    if d_ap + margin <= d_an {
        TripletCategory::Easy
    } else if d_an <= d_ap {
        TripletCategory::Hard
    } else {
        TripletCategory::SemiHard
    }
}

/// A mined triplet over batch indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
    pub category: TripletCategory,
}

/// Result of mining one batch.
#[derive(Debug, Clone, Default)]
pub struct MiningOutcome {
    pub triplets: Vec<Triplet>,
    /// Ordered same-domain (anchor, positive) pairs examined.
    pub pairs_examined: usize,
    /// True when the batch held fewer than two domains, which makes
    /// mining impossible and yields an empty set.
    pub single_domain: bool,
}

/// Online semi-hard mining: for every ordered same-domain (a, p) pair
/// the negative minimizing d(a,n) among semi-hard candidates is chosen;
/// a pair with no semi-hard negative falls back to the closest easy
/// negative; a pair with only hard negatives is skipped. Ties break to
/// the lowest batch index, making the result deterministic.
pub fn mine_semi_hard(embeddings: &[&[f32]], domains: &[usize], margin: f64) -> MiningOutcome {
    debug_assert_eq!(embeddings.len(), domains.len());
    let n = embeddings.len();
    let mut out = MiningOutcome::default();
    let distinct = {
        let mut d: Vec<usize> = domains.to_vec();
        d.sort_unstable();
        d.dedup();
        d.len()
    };
    if distinct < 2 {
        out.single_domain = true;
        return out;
    }

    // Distance matrix once per batch.
    let mut dist = vec![0.0f64; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = euclid(embeddings[i], embeddings[j]);
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }

    for a in 0..n {
        for p in 0..n {
            if p == a || domains[p] != domains[a] {
                continue;
            }
            out.pairs_examined += 1;
            let d_ap = dist[a * n + p];
            let mut best_semi: Option<(f64, usize)> = None;
            let mut best_easy: Option<(f64, usize)> = None;
            for neg in 0..n {
                if domains[neg] == domains[a] {
                    continue;
                }
                let d_an = dist[a * n + neg];
                match categorize(d_ap, d_an, margin) {
                    TripletCategory::SemiHard => {
                        if best_semi.map(|(d, _)| d_an < d).unwrap_or(true) {
                            best_semi = Some((d_an, neg));
                        }
                    }
                    TripletCategory::Easy => {
                        if best_easy.map(|(d, _)| d_an < d).unwrap_or(true) {
                            best_easy = Some((d_an, neg));
                        }
                    }
                    TripletCategory::Hard => {}
                }
            }
            let (negative, category) = match (best_semi, best_easy) {
                (Some((_, neg)), _) => (neg, TripletCategory::SemiHard),
                (None, Some((_, neg))) => (neg, TripletCategory::Easy),
                (None, None) => continue,
            };
            out.triplets.push(Triplet { anchor: a, positive: p, negative, category });
        }
    }
    out
}

/// Mean triplet loss over a fixed triplet list and its gradient with
/// respect to the embeddings, scaled by `scale`. Inactive triplets
/// (zero loss) contribute nothing; degenerate zero distances guard the
/// division.
pub fn triplet_loss_and_grad(
    emb: &Tensor<f32>,
    triplets: &[Triplet],
    margin: f64,
    scale: f64,
) -> (f64, Tensor<f32>) {
    let dims = emb.shape();
    let (b, dim) = (dims[0], dims[1]);
    let row = |i: usize| &emb.data()[i * dim..(i + 1) * dim];
    let mut grad = vec![0.0f64; b * dim];
    let mut total = 0.0f64;
    if triplets.is_empty() {
        return (0.0, Tensor::zeros(&[b, dim]));
    }
    let inv = 1.0 / triplets.len() as f64;
    for t in triplets {
        let (a, p, n) = (row(t.anchor), row(t.positive), row(t.negative));
        let d_ap = euclid(a, p);
        let d_an = euclid(a, n);
        let loss = d_ap - d_an + margin;
        if loss <= 0.0 {
            continue;
        }
        total += loss;
        let w = scale * inv;
        if d_ap > 1e-12 {
            for k in 0..dim {
                let diff = (f64::from(a[k]) - f64::from(p[k])) / d_ap;
                grad[t.anchor * dim + k] += w * diff;
                grad[t.positive * dim + k] -= w * diff;
            }
        }
        if d_an > 1e-12 {
            for k in 0..dim {
                let diff = (f64::from(a[k]) - f64::from(n[k])) / d_an;
                grad[t.anchor * dim + k] -= w * diff;
                grad[t.negative * dim + k] += w * diff;
            }
        }
    }
    let grad32: Vec<f32> = grad.iter().map(|&g| g as f32).collect();
    (total * inv, Tensor::from_vec(&[b, dim], grad32))
}

/// The recognizer network: trunk, embedding head, class head.
pub struct TripletNet {
    pub trunk: Stack<f32>,
    pub embed: Stack<f32>,
    pub class_head: Stack<f32>,
}

/// Trunk: six conv layers and two dense layers. Kernel shapes are this
/// implementation's choice, sized so the map shrinks to a 144-wide
/// flatten; pooling follows the first three convs only.
pub fn trunk_specs() -> Vec<LayerSpec> {
    vec![
        LayerSpec::Conv2d { in_ch: 1, in_h: 26, in_w: 99, out_ch: 8, kh: 3, kw: 3 },
        LayerSpec::Relu,
        LayerSpec::MaxPool2x2,
        LayerSpec::Conv2d { in_ch: 8, in_h: 12, in_w: 48, out_ch: 8, kh: 2, kw: 2 },
        LayerSpec::Relu,
        LayerSpec::MaxPool2x2,
        LayerSpec::Conv2d { in_ch: 8, in_h: 5, in_w: 23, out_ch: 16, kh: 2, kw: 2 },
        LayerSpec::Relu,
        LayerSpec::MaxPool2x2,
        LayerSpec::Conv2d { in_ch: 16, in_h: 2, in_w: 11, out_ch: 16, kh: 2, kw: 2 },
        LayerSpec::Relu,
        LayerSpec::Conv2d { in_ch: 16, in_h: 1, in_w: 10, out_ch: 24, kh: 1, kw: 3 },
        LayerSpec::Relu,
        LayerSpec::Conv2d { in_ch: 24, in_h: 1, in_w: 8, out_ch: 24, kh: 1, kw: 3 },
        LayerSpec::Relu,
        LayerSpec::Flatten,
        LayerSpec::Dense { in_dim: 144, out_dim: 96 },
        LayerSpec::Relu,
        LayerSpec::Dense { in_dim: 96, out_dim: 96 },
        LayerSpec::Relu,
    ]
}

pub fn embed_specs() -> Vec<LayerSpec> {
    vec![LayerSpec::Dense { in_dim: 96, out_dim: EMBED_DIM }, LayerSpec::L2Normalize]
}

pub fn class_head_specs() -> Vec<LayerSpec> {
    vec![
        LayerSpec::Dense { in_dim: EMBED_DIM, out_dim: CLASS_HIDDEN },
        LayerSpec::Relu,
        LayerSpec::Dense { in_dim: CLASS_HIDDEN, out_dim: 1 },
        LayerSpec::Sigmoid,
    ]
}

impl TripletNet {
    pub fn new(rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(TripletNet {
            trunk: Stack::from_specs(&trunk_specs(), rng)?,
            embed: Stack::from_specs(&embed_specs(), rng)?,
            class_head: Stack::from_specs(&class_head_specs(), rng)?,
        })
    }

    pub fn from_stacks(mut stacks: Vec<Stack<f32>>) -> Result<Self> {
        if stacks.len() != 3 {
            return Err(Error::Format(format!(
                "triplet checkpoint needs 3 stacks, found {}",
                stacks.len()
            )));
        }
        let class_head = stacks.pop().expect("len checked");
        let embed = stacks.pop().expect("len checked");
        let trunk = stacks.pop().expect("len checked");
        Ok(TripletNet { trunk, embed, class_head })
    }

    /// Embedding batch forward: [B,1,26,99] -> [B,72] unit rows.
    pub fn embed_batch(&mut self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let h = self.trunk.forward(x, &mut Phase::Mean)?;
        self.embed.forward(&h, &mut Phase::Mean)
    }

    /// Embeds feature maps in chunks, returning one vector per map.
    pub fn embed_maps(&mut self, maps: &[&FeatureMap]) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(maps.len());
        for chunk in maps.chunks(EMBED_CHUNK) {
            let x = batch_tensor(chunk);
            let emb = self.embed_batch(&x)?;
            for i in 0..chunk.len() {
                out.push(emb.data()[i * EMBED_DIM..(i + 1) * EMBED_DIM].to_vec());
            }
        }
        Ok(out)
    }

    /// Class probability for each map, from the fallback head.
    pub fn class_probs(&mut self, maps: &[&FeatureMap]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(maps.len());
        for chunk in maps.chunks(EMBED_CHUNK) {
            let x = batch_tensor(chunk);
            let emb = self.embed_batch(&x)?;
            let p = self.class_head.forward(&emb, &mut Phase::Mean)?;
            out.extend(p.data().iter().map(|&v| f64::from(v)));
        }
        Ok(out)
    }
}

/// Stored training embeddings per basis domain.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    pub domain_labels: Vec<String>,
    /// Row-major n x 72.
    pub embeddings: Vec<f32>,
    /// Per row: index into `domain_labels`.
    pub domains: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
struct IndexHeader {
    dim: usize,
    domain_labels: Vec<String>,
    counts: BTreeMap<String, usize>,
}

impl EmbeddingIndex {
    pub fn len(&self) -> usize {
        self.domains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.domains.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.embeddings[i * EMBED_DIM..(i + 1) * EMBED_DIM]
    }

    /// Embeds every instance of a labeled set with the trained net.
    pub fn build(
        net: &mut TripletNet,
        set: &LabeledSet,
        domain_labels: &[String],
    ) -> Result<Self> {
        set.validate(domain_labels.len())?;
        let maps: Vec<&FeatureMap> = set.maps.iter().collect();
        let embs = net.embed_maps(&maps)?;
        let mut flat = Vec::with_capacity(embs.len() * EMBED_DIM);
        for e in &embs {
            flat.extend_from_slice(e);
        }
        Ok(EmbeddingIndex {
            domain_labels: domain_labels.to_vec(),
            embeddings: flat,
            domains: set.domains.iter().map(|&d| d as u32).collect(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.embeddings.len() != self.domains.len() * EMBED_DIM {
            return Err(Error::shape(
                format!("{} x {EMBED_DIM} embeddings", self.domains.len()),
                format!("{} values", self.embeddings.len()),
            ));
        }
        for (i, &d) in self.domains.iter().enumerate() {
            if d as usize >= self.domain_labels.len() {
                return Err(Error::Domain(format!("row {i} has domain index {d} out of range")));
            }
        }
        for i in 0..self.len() {
            let norm = self.row(i).iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 && norm > 1e-12 {
                return Err(Error::Format(format!("index row {i} has norm {norm}")));
            }
        }
        Ok(())
    }

    fn json_path(dir: &Path, name: &str) -> PathBuf {
        dir.join(format!("{name}.index.json"))
    }

    fn bin_path(dir: &Path, name: &str) -> PathBuf {
        dir.join(format!("{name}.index.bin"))
    }

    /// Writes `<name>.index.json` (header) and `<name>.index.bin`
    /// (f32 LE embeddings then u32 LE domain indices).
    pub fn save(&self, dir: &Path, name: &str) -> Result<()> {
        self.validate()?;
        fs::create_dir_all(dir)?;
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for label in &self.domain_labels {
            counts.insert(label.clone(), 0);
        }
        for &d in &self.domains {
            *counts.get_mut(&self.domain_labels[d as usize]).expect("validated index") += 1;
        }
        let header = IndexHeader {
            dim: EMBED_DIM,
            domain_labels: self.domain_labels.clone(),
            counts,
        };
        fs::write(
            Self::json_path(dir, name),
            serde_json::to_string_pretty(&header)? + "\n",
        )?;
        let mut bin = Vec::with_capacity(self.embeddings.len() * 4 + self.domains.len() * 4);
        for v in &self.embeddings {
            bin.extend_from_slice(&v.to_le_bytes());
        }
        for d in &self.domains {
            bin.extend_from_slice(&d.to_le_bytes());
        }
        fs::write(Self::bin_path(dir, name), bin)?;
        Ok(())
    }

    pub fn load(dir: &Path, name: &str) -> Result<Self> {
        let header: IndexHeader =
            serde_json::from_reader(fs::File::open(Self::json_path(dir, name))?)?;
        if header.dim != EMBED_DIM {
            return Err(Error::Format(format!(
                "embedding index dim {} unsupported (expected {EMBED_DIM})",
                header.dim
            )));
        }
        let n: usize = header.counts.values().sum();
        let mut file = fs::File::open(Self::bin_path(dir, name))?;
        let mut raw = Vec::new();
        file.read_to_end(&mut raw)?;
        if raw.len() != n * EMBED_DIM * 4 + n * 4 {
            return Err(Error::Format(format!(
                "embedding index binary: expected {} bytes for {n} rows, found {}",
                n * EMBED_DIM * 4 + n * 4,
                raw.len()
            )));
        }
        let (emb_bytes, dom_bytes) = raw.split_at(n * EMBED_DIM * 4);
        let embeddings: Vec<f32> =
            emb_bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        let domains: Vec<u32> =
            dom_bytes.chunks_exact(4).map(|b| u32::from_le_bytes(b.try_into().unwrap())).collect();
        let index = EmbeddingIndex { domain_labels: header.domain_labels, embeddings, domains };
        index.validate()?;
        // Counts in the header must match the domain array.
        for (d, label) in index.domain_labels.iter().enumerate() {
            let expected = header.counts.get(label).copied().unwrap_or(0);
            let actual = index.domains.iter().filter(|&&x| x as usize == d).count();
            if actual != expected {
                return Err(Error::Format(format!(
                    "embedding index: header says {expected} rows for {label}, found {actual}"
                )));
            }
        }
        Ok(index)
    }
}

/// Relationship factor (stage-one output): for each basis domain the
/// fraction of stored training embeddings strictly closer than lambda.
pub fn relationship_factor(
    embedding: &[f32],
    index: &EmbeddingIndex,
    lambda: f64,
) -> Result<RelationshipVector> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Argument(format!("lambda must lie in [0,1], got {lambda}")));
    }
    if embedding.len() != EMBED_DIM {
        return Err(Error::shape(
            format!("{EMBED_DIM}-dim embedding"),
            format!("{}-dim", embedding.len()),
        ));
    }
    let norm = embedding.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > 1e-3 {
        return Err(Error::Argument(format!("query embedding norm {norm} is not unit")));
    }
    let n_domains = index.domain_labels.len();
    let mut counts = vec![0usize; n_domains];
    let mut totals = vec![0usize; n_domains];
    for i in 0..index.len() {
        let d = index.domains[i] as usize;
        totals[d] += 1;
        if euclid(embedding, index.row(i)) < lambda {
            counts[d] += 1;
        }
    }
    if let Some(empty) = totals.iter().position(|&t| t == 0) {
        return Err(Error::Config(format!(
            "embedding index holds no instances for domain {}",
            index.domain_labels[empty]
        )));
    }
    let beta: Vec<f64> =
        counts.iter().zip(&totals).map(|(&c, &t)| c as f64 / t as f64).collect();
    Ok(RelationshipVector { beta, source: RelSource::Triplet })
}

/// Training configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TripletTrainConfig {
    pub theta: f64,
    pub alpha: f64,
    pub margin: f64,
    pub epochs: usize,
    pub per_domain: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TripletTrainConfig {
    fn default() -> Self {
        TripletTrainConfig {
            theta: 1.0,
            alpha: 1.0,
            margin: DEFAULT_MARGIN,
            epochs: 300,
            per_domain: 8,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// One epoch of the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TripletEpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub triplet_term: f64,
    pub class_term: f64,
    pub mined_triplets: usize,
    pub single_domain_batches: usize,
    pub val_triplet_loss: f64,
    pub val_class_accuracy: f64,
}

pub struct TrainedTriplet {
    pub net: TripletNet,
    pub index: EmbeddingIndex,
    pub history: Vec<TripletEpochLog>,
}

/// Evaluates mean triplet loss (whole-set mining) and class accuracy.
fn evaluate(
    net: &mut TripletNet,
    set: &LabeledSet,
    margin: f64,
) -> Result<(f64, f64)> {
    let maps: Vec<&FeatureMap> = set.maps.iter().collect();
    let embs = net.embed_maps(&maps)?;
    let refs: Vec<&[f32]> = embs.iter().map(|e| e.as_slice()).collect();
    let mined = mine_semi_hard(&refs, &set.domains, margin);
    let tl = if mined.triplets.is_empty() {
        0.0
    } else {
        mined
            .triplets
            .iter()
            .map(|t| triplet_loss(refs[t.anchor], refs[t.positive], refs[t.negative], margin))
            .sum::<f64>()
            / mined.triplets.len() as f64
    };
    let probs = net.class_probs(&maps)?;
    let correct = probs
        .iter()
        .zip(&set.classes)
        .filter(|(&p, &y)| (p >= 0.5) == y)
        .count();
    Ok((tl, correct as f64 / set.len() as f64))
}

/// Trains the recognizer with the combined loss
/// theta * mean mined triplet loss + alpha * BCE(class head), then
/// stores every training embedding in the returned index.
pub fn train_triplet(
    train: &LabeledSet,
    val: &LabeledSet,
    domain_labels: &[String],
    cfg: &TripletTrainConfig,
) -> Result<TrainedTriplet> {
    let n_domains = domain_labels.len();
    train.validate(n_domains)?;
    val.validate(n_domains)?;
    let distinct = {
        let mut d = train.domains.clone();
        d.sort_unstable();
        d.dedup();
        d.len()
    };
    if distinct < 2 {
        return Err(Error::Domain(
            "triplet training needs at least two basis domains".into(),
        ));
    }
    if !(cfg.margin > 0.0) {
        return Err(Error::Config(format!("margin must be positive, got {}", cfg.margin)));
    }

    let mut init = rng::stream(cfg.seed, &[tag::INIT]);
    let mut net = TripletNet::new(&mut init)?;
    let mut adam = Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() });

    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut batch_rng = rng::stream(cfg.seed, &[tag::BATCH, epoch as u64]);
        let batches =
            stratified_batches(&train.domains, n_domains, cfg.per_domain, &mut batch_rng);
        let mut epoch_triplet = 0.0f64;
        let mut epoch_class = 0.0f64;
        let mut mined_total = 0usize;
        let mut single_domain = 0usize;
        for (step, batch) in batches.iter().enumerate() {
            let maps: Vec<&FeatureMap> = batch.iter().map(|&i| &train.maps[i]).collect();
            let doms: Vec<usize> = batch.iter().map(|&i| train.domains[i]).collect();
            let classes: Vec<bool> = batch.iter().map(|&i| train.classes[i]).collect();

            let x = batch_tensor(&maps);
            net.trunk.zero_grad();
            net.embed.zero_grad();
            net.class_head.zero_grad();

            let h = net.trunk.forward(&x, &mut Phase::Mean)?;
            let emb = net.embed.forward(&h, &mut Phase::Mean)?;

            let rows: Vec<&[f32]> = (0..batch.len())
                .map(|i| &emb.data()[i * EMBED_DIM..(i + 1) * EMBED_DIM])
                .collect();
            let mined = mine_semi_hard(&rows, &doms, cfg.margin);
            if mined.single_domain {
                single_domain += 1;
            }
            mined_total += mined.triplets.len();
            let (tl, mut g_emb) =
                triplet_loss_and_grad(&emb, &mined.triplets, cfg.margin, cfg.theta);

            let probs = net.class_head.forward(&emb, &mut Phase::Mean)?;
            let (cl, g_bce) = losses::bce(&probs, &classes)?;
            let g_class = g_bce.map(|g| g * cfg.alpha as f32);
            let g_emb_from_class = net.class_head.backward(&g_class)?;
            for (g, a) in g_emb.data_mut().iter_mut().zip(g_emb_from_class.data()) {
                *g += a;
            }

            let loss = cfg.theta * tl + cfg.alpha * f64::from(cl);
            if !loss.is_finite() {
                return Err(Error::Training(format!(
                    "triplet loss became non-finite at epoch {epoch} step {step} (seed {})",
                    cfg.seed
                )));
            }
            epoch_triplet += tl;
            epoch_class += f64::from(cl);

            let g_h = net.embed.backward(&g_emb)?;
            net.trunk.backward(&g_h)?;

            let mut slots = net.trunk.param_slots();
            slots.extend(net.embed.param_slots());
            slots.extend(net.class_head.param_slots());
            adam.step(&mut slots)?;
        }

        let steps = batches.len().max(1) as f64;
        let (val_tl, val_acc) = evaluate(&mut net, val, cfg.margin)?;
        history.push(TripletEpochLog {
            epoch,
            train_loss: cfg.theta * epoch_triplet / steps + cfg.alpha * epoch_class / steps,
            triplet_term: epoch_triplet / steps,
            class_term: epoch_class / steps,
            mined_triplets: mined_total,
            single_domain_batches: single_domain,
            val_triplet_loss: val_tl,
            val_class_accuracy: val_acc,
        });
    }

    let index = EmbeddingIndex::build(&mut net, train, domain_labels)?;
    Ok(TrainedTriplet { net, index, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Unit vector in the (x, y) plane at angle phi, padded to 72 dims.
    fn planar(phi: f64) -> Vec<f32> {
        let mut v = vec![0.0f32; EMBED_DIM];
        v[0] = phi.cos() as f32;
        v[1] = phi.sin() as f32;
        v
    }

    /// Angle between two unit vectors giving chord distance d.
    fn angle_for(d: f64) -> f64 {
        2.0 * (d / 2.0).asin()
    }

    #[test]
    fn triplet_loss_closed_forms() {
        let a = planar(0.0);
        // d(a,p)=0, d(a,n)=1, margin 1 -> 0.
        let n = planar(angle_for(1.0));
        assert!((triplet_loss(&a, &a, &n, 1.0) - 0.0).abs() < 1e-6);
        // Identical a=p=n -> margin.
        assert!((triplet_loss(&a, &a, &a, 1.0) - 1.0).abs() < 1e-12);
        // d(a,p)=0.8, d(a,n)=1.2 -> 0.6.
        let p = planar(angle_for(0.8));
        let n = planar(-angle_for(1.2));
        assert!((triplet_loss(&a, &p, &n, 1.0) - 0.6).abs() < 1e-6);
    }

    #[test]
    fn categorization_matches_definitions_and_partitions() {
        assert_eq!(categorize(0.2, 1.5, 1.0), TripletCategory::Easy);
        assert_eq!(categorize(0.9, 0.3, 1.0), TripletCategory::Hard);
        assert_eq!(categorize(0.4, 0.9, 1.0), TripletCategory::SemiHard);
        // Boundaries: equality cases are exactly one category.
        assert_eq!(categorize(0.5, 1.5, 1.0), TripletCategory::Easy);
        assert_eq!(categorize(0.5, 0.5, 1.0), TripletCategory::Hard);
        let mut r = crate::rng::stream(3, &[1]);
        for _ in 0..200 {
            let d_ap = r.gen_range(0.0..2.0);
            let d_an = r.gen_range(0.0..2.0);
            // Exactly one of the three predicates holds.
            let easy = d_ap + 1.0 <= d_an;
            let hard = d_an <= d_ap;
            let semi = !easy && !hard;
            let got = categorize(d_ap, d_an, 1.0);
            let want = if easy {
                TripletCategory::Easy
            } else if hard {
                TripletCategory::Hard
            } else {
                assert!(semi);
                TripletCategory::SemiHard
            };
            assert_eq!(got, want);
        }
    }

    /// Brute-force miner used as the oracle.
    fn mine_oracle(embs: &[&[f32]], domains: &[usize], margin: f64) -> Vec<Triplet> {
        let n = embs.len();
        let mut out = Vec::new();
        for a in 0..n {
            for p in 0..n {
                if a == p || domains[a] != domains[p] {
                    continue;
                }
                let d_ap = euclid(embs[a], embs[p]);
                let mut semi: Option<(f64, usize)> = None;
                let mut easy: Option<(f64, usize)> = None;
                for neg in 0..n {
                    if domains[neg] == domains[a] {
                        continue;
                    }
                    let d_an = euclid(embs[a], embs[neg]);
                    if d_ap < d_an && d_an < d_ap + margin {
                        if semi.map(|(d, _)| d_an < d).unwrap_or(true) {
                            semi = Some((d_an, neg));
                        }
                    } else if d_an >= d_ap + margin
                        && easy.map(|(d, _)| d_an < d).unwrap_or(true)
                    {
                        easy = Some((d_an, neg));
                    }
                }
                if let Some((_, neg)) = semi {
                    out.push(Triplet {
                        anchor: a,
                        positive: p,
                        negative: neg,
                        category: TripletCategory::SemiHard,
                    });
                } else if let Some((_, neg)) = easy {
                    out.push(Triplet {
                        anchor: a,
                        positive: p,
                        negative: neg,
                        category: TripletCategory::Easy,
                    });
                }
            }
        }
        out
    }

    fn random_unit(r: &mut rand_chacha::ChaCha8Rng) -> Vec<f32> {
        let v: Vec<f64> = (0..EMBED_DIM)
            .map(|_| r.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.iter().map(|x| (x / norm) as f32).collect()
    }

    #[test]
    fn miner_matches_exhaustive_enumeration() {
        let mut r = crate::rng::stream(7, &[2]);
        for trial in 0..40 {
            let n = r.gen_range(4..=32);
            let n_domains = r.gen_range(2..=4usize);
            let embs: Vec<Vec<f32>> = (0..n).map(|_| random_unit(&mut r)).collect();
            let domains: Vec<usize> = (0..n).map(|_| r.gen_range(0..n_domains)).collect();
            let refs: Vec<&[f32]> = embs.iter().map(|e| e.as_slice()).collect();
            let got = mine_semi_hard(&refs, &domains, 1.0);
            let want = mine_oracle(&refs, &domains, 1.0);
            assert_eq!(got.triplets, want, "trial {trial}");
        }
    }

    #[test]
    fn single_domain_batch_mines_nothing() {
        let embs: Vec<Vec<f32>> = vec![planar(0.0), planar(0.3), planar(0.8)];
        let refs: Vec<&[f32]> = embs.iter().map(|e| e.as_slice()).collect();
        let out = mine_semi_hard(&refs, &[2, 2, 2], 1.0);
        assert!(out.triplets.is_empty());
        assert!(out.single_domain);
        assert_eq!(out.pairs_examined, 0);
    }

    #[test]
    fn two_by_two_batch_examines_four_pairs() {
        let embs: Vec<Vec<f32>> =
            vec![planar(0.0), planar(0.2), planar(1.5), planar(1.8)];
        let refs: Vec<&[f32]> = embs.iter().map(|e| e.as_slice()).collect();
        let out = mine_semi_hard(&refs, &[0, 0, 1, 1], 1.0);
        assert_eq!(out.pairs_examined, 4);
        assert!(!out.single_domain);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut r = crate::rng::stream(9, &[4]);
        let b = 6usize;
        let embs: Vec<Vec<f32>> = (0..b).map(|_| random_unit(&mut r)).collect();
        let domains = vec![0, 0, 1, 1, 2, 2];
        let refs: Vec<&[f32]> = embs.iter().map(|e| e.as_slice()).collect();
        let triplets = mine_semi_hard(&refs, &domains, 1.0).triplets;
        assert!(!triplets.is_empty());

        let flat: Vec<f32> = embs.iter().flatten().copied().collect();
        let t = Tensor::from_vec(&[b, EMBED_DIM], flat.clone());
        let (_, grad) = triplet_loss_and_grad(&t, &triplets, 1.0, 1.0);

        let loss_of = |data: &[f32]| -> f64 {
            let row = |i: usize| &data[i * EMBED_DIM..(i + 1) * EMBED_DIM];
            triplets
                .iter()
                .map(|t| triplet_loss(row(t.anchor), row(t.positive), row(t.negative), 1.0))
                .sum::<f64>()
                / triplets.len() as f64
        };
        let eps = 1e-3f32;
        for idx in (0..flat.len()).step_by(37) {
            let mut plus = flat.clone();
            plus[idx] += eps;
            let mut minus = flat.clone();
            minus[idx] -= eps;
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * f64::from(eps));
            let an = f64::from(grad.data()[idx]);
            assert!(
                (fd - an).abs() < 1e-3,
                "index {idx}: finite diff {fd} vs analytic {an}"
            );
        }
    }

    fn tiny_index() -> EmbeddingIndex {
        // One domain at known distances {0.1, 0.3, 0.9, 1.4} from the
        // planar(0) query, another far away.
        let rows = [
            planar(angle_for(0.1)),
            planar(angle_for(0.3)),
            planar(angle_for(0.9)),
            planar(angle_for(1.4)),
            planar(std::f64::consts::PI),
            planar(-std::f64::consts::PI / 2.0),
        ];
        EmbeddingIndex {
            domain_labels: vec!["near".into(), "far".into()],
            embeddings: rows.iter().flatten().copied().collect(),
            domains: vec![0, 0, 0, 0, 1, 1],
        }
    }

    #[test]
    fn relationship_factor_counts_strictly_below_lambda() {
        let index = tiny_index();
        let q = planar(0.0);
        let rel = relationship_factor(&q, &index, 0.5).unwrap();
        assert_eq!(rel.source, RelSource::Triplet);
        assert!((rel.beta[0] - 0.5).abs() < 1e-12, "beta {:?}", rel.beta);
        assert_eq!(rel.beta[1], 0.0);
        // lambda = 0: strict inequality empties every count.
        let rel0 = relationship_factor(&q, &index, 0.0).unwrap();
        assert!(rel0.beta.iter().all(|&b| b == 0.0));
        // Monotone in lambda.
        let mut prev = vec![0.0; 2];
        for l in [0.0, 0.15, 0.35, 0.5, 0.95, 1.0] {
            let rel = relationship_factor(&q, &index, l).unwrap();
            for (b, p) in rel.beta.iter().zip(&prev) {
                assert!(b >= p);
            }
            prev = rel.beta;
        }
    }

    #[test]
    fn relationship_factor_validates_inputs() {
        let index = tiny_index();
        let q = planar(0.0);
        assert!(matches!(
            relationship_factor(&q, &index, 1.5),
            Err(Error::Argument(_))
        ));
        let mut long = q.clone();
        long.push(0.0);
        assert!(matches!(
            relationship_factor(&long, &index, 0.5),
            Err(Error::Shape { .. })
        ));
        let mut unnorm = q.clone();
        unnorm[0] = 2.0;
        assert!(matches!(
            relationship_factor(&unnorm, &index, 0.5),
            Err(Error::Argument(_))
        ));
        let mut empty_domain = index.clone();
        empty_domain.domains = vec![0; 6];
        assert!(matches!(
            relationship_factor(&q, &empty_domain, 0.5),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn relationship_factor_matches_brute_force_on_random_index() {
        let mut r = crate::rng::stream(11, &[5]);
        for _ in 0..10 {
            let n = 50;
            let embs: Vec<Vec<f32>> = (0..n).map(|_| random_unit(&mut r)).collect();
            let domains: Vec<u32> = (0..n).map(|i| (i % 3) as u32).collect();
            let index = EmbeddingIndex {
                domain_labels: vec!["a".into(), "b".into(), "c".into()],
                embeddings: embs.iter().flatten().copied().collect(),
                domains: domains.clone(),
            };
            let q = random_unit(&mut r);
            let lambda = r.gen_range(0.0..=1.0);
            let rel = relationship_factor(&q, &index, lambda).unwrap();
            for d in 0..3 {
                let rows: Vec<usize> =
                    (0..n).filter(|&i| domains[i] as usize == d).collect();
                let count = rows.iter().filter(|&&i| euclid(&q, &embs[i]) < lambda).count();
                assert_eq!(rel.beta[d], count as f64 / rows.len() as f64);
            }
        }
    }

    #[test]
    fn index_roundtrip_is_exact() {
        let index = tiny_index();
        let dir = tempfile::tempdir().unwrap();
        index.save(dir.path(), "emb").unwrap();
        let back = EmbeddingIndex::load(dir.path(), "emb").unwrap();
        assert_eq!(back, index);
    }

    fn tone_sets(seed: u64) -> (LabeledSet, LabeledSet, Vec<String>) {
        let ex = crate::features::FeatureExtractor::new();
        let mut r = crate::rng::stream(seed, &[7]);
        let mut build = |n: usize| {
            let mut set = LabeledSet::default();
            for i in 0..n {
                let domain = i % 2;
                let freq = [70.0, 350.0][domain];
                let abnormal = (i / 2) % 2 == 0;
                let samples: Vec<f64> = (0..2000)
                    .map(|t| {
                        let base = 0.4
                            * (2.0 * std::f64::consts::PI * freq * t as f64 / 2000.0).sin();
                        let extra = if abnormal {
                            0.3 * (2.0 * std::f64::consts::PI * 550.0 * t as f64 / 2000.0)
                                .sin()
                        } else {
                            0.0
                        };
                        base + extra + r.gen_range(-0.02..0.02)
                    })
                    .collect();
                set.maps.push(ex.extract_labeled(&samples, format!("s{i}")).unwrap());
                set.domains.push(domain);
                set.classes.push(abnormal);
            }
            set
        };
        (build(12), build(6), vec!["lo".into(), "hi".into()])
    }

    #[test]
    fn training_is_deterministic_and_indexes_every_training_instance() {
        let (train, val, labels) = tone_sets(21);
        let cfg = TripletTrainConfig { epochs: 3, per_domain: 3, seed: 17, ..Default::default() };
        let a = train_triplet(&train, &val, &labels, &cfg).unwrap();
        assert_eq!(a.history.len(), 3);
        assert_eq!(a.index.len(), train.len());
        a.index.validate().unwrap();
        assert!(a.history.iter().all(|e| e.train_loss.is_finite()));
        assert!(a.history.iter().all(|e| e.single_domain_batches == 0));
        let b = train_triplet(&train, &val, &labels, &cfg).unwrap();
        assert_eq!(a.net.trunk.export_blocks(), b.net.trunk.export_blocks());
        assert_eq!(a.net.embed.export_blocks(), b.net.embed.export_blocks());
        assert_eq!(a.net.class_head.export_blocks(), b.net.class_head.export_blocks());
        assert_eq!(a.index, b.index);
    }

    #[test]
    fn training_rejects_a_single_domain_set() {
        let (mut train, val, labels) = tone_sets(22);
        train.domains.iter_mut().for_each(|d| *d = 0);
        let cfg = TripletTrainConfig { epochs: 1, ..Default::default() };
        assert!(matches!(
            train_triplet(&train, &val, &labels, &cfg),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn net_emits_unit_embeddings() {
        let mut init = crate::rng::stream(13, &[crate::rng::tag::INIT]);
        let mut net = TripletNet::new(&mut init).unwrap();
        let ex = crate::features::FeatureExtractor::new();
        let mut r = crate::rng::stream(13, &[6]);
        let maps: Vec<FeatureMap> = (0..3)
            .map(|i| {
                let samples: Vec<f64> =
                    (0..2000).map(|_| r.gen_range(-0.5..0.5)).collect();
                ex.extract_labeled(&samples, format!("w{i}")).unwrap()
            })
            .collect();
        let refs: Vec<&FeatureMap> = maps.iter().collect();
        for e in net.embed_maps(&refs).unwrap() {
            let norm = e.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6, "norm {norm}");
        }
    }
}
