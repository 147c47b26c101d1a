//! Bayesian domain recognizer: a flipout CNN with a softmax domain
//! head and a sigmoid class head, trained on the ELBO (task losses
//! plus KL divided by the training-set size). Prediction runs
//! Monte Carlo sampling over the weight posterior and averages the
//! head probabilities; the spread across samples is reported as an
//! uncertainty estimate.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{losses, Adam, AdamConfig, LayerSpec, Phase, Stack, Tensor};
use crate::ensemble::{RelSource, RelationshipVector};
use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::rng::{self, tag};

use super::{batch_tensor, stratified_batches, LabeledSet};

/// Width of the shared representation feeding both heads.
const TRUNK_OUT: usize = 32;
/// Batch chunk for inference.
const PREDICT_CHUNK: usize = 64;

/// Trunk: three flipout convs with pooling, then two flipout dense
/// layers down to a 32-wide representation.
pub fn trunk_specs() -> Vec<LayerSpec> {
    vec![
        LayerSpec::Conv2dFlipout { in_ch: 1, in_h: 26, in_w: 99, out_ch: 16, kh: 3, kw: 3 },
        LayerSpec::Relu,
        LayerSpec::MaxPool2x2,
        LayerSpec::Conv2dFlipout { in_ch: 16, in_h: 12, in_w: 48, out_ch: 16, kh: 2, kw: 2 },
        LayerSpec::Relu,
        LayerSpec::MaxPool2x2,
        LayerSpec::Conv2dFlipout { in_ch: 16, in_h: 5, in_w: 23, out_ch: 8, kh: 2, kw: 2 },
        LayerSpec::Relu,
        LayerSpec::MaxPool2x2,
        LayerSpec::Flatten,
        LayerSpec::DenseFlipout { in_dim: 176, out_dim: 64 },
        LayerSpec::Relu,
        LayerSpec::DenseFlipout { in_dim: 64, out_dim: TRUNK_OUT },
        LayerSpec::Relu,
    ]
}

pub fn domain_head_specs(n_domains: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::DenseFlipout { in_dim: TRUNK_OUT, out_dim: n_domains },
        LayerSpec::Softmax,
    ]
}

pub fn class_head_specs() -> Vec<LayerSpec> {
    vec![LayerSpec::DenseFlipout { in_dim: TRUNK_OUT, out_dim: 1 }, LayerSpec::Sigmoid]
}

/// The recognizer network: shared variational trunk plus domain and
/// class heads.
pub struct BayesNet {
    pub n_domains: usize,
    pub trunk: Stack<f32>,
    pub domain_head: Stack<f32>,
    pub class_head: Stack<f32>,
}

impl BayesNet {
    pub fn new(n_domains: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if n_domains < 2 {
            return Err(Error::Argument(format!(
                "domain head needs at least two domains, got {n_domains}"
            )));
        }
        Ok(BayesNet {
            n_domains,
            trunk: Stack::from_specs(&trunk_specs(), rng)?,
            domain_head: Stack::from_specs(&domain_head_specs(n_domains), rng)?,
            class_head: Stack::from_specs(&class_head_specs(), rng)?,
        })
    }

    pub fn from_stacks(n_domains: usize, mut stacks: Vec<Stack<f32>>) -> Result<Self> {
        if stacks.len() != 3 {
            return Err(Error::Format(format!(
                "bayes checkpoint needs 3 stacks, found {}",
                stacks.len()
            )));
        }
        let class_head = stacks.pop().expect("len checked");
        let domain_head = stacks.pop().expect("len checked");
        let trunk = stacks.pop().expect("len checked");
        Ok(BayesNet { n_domains, trunk, domain_head, class_head })
    }

    /// One forward pass under the given phase: domain softmax rows and
    /// class probabilities for the batch.
    pub fn forward(
        &mut self,
        x: &Tensor<f32>,
        phase: &mut Phase,
    ) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let h = self.trunk.forward(x, phase)?;
        let d = self.domain_head.forward(&h, phase)?;
        let c = self.class_head.forward(&h, phase)?;
        Ok((d, c))
    }

    /// Total KL divergence of all variational layers.
    pub fn kl(&self) -> f64 {
        f64::from(self.trunk.kl()) + f64::from(self.domain_head.kl())
            + f64::from(self.class_head.kl())
    }

    /// Mean-pass probabilities for a set of maps, chunked.
    pub fn mean_forward(
        &mut self,
        maps: &[&FeatureMap],
    ) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        let mut domain_probs = Vec::with_capacity(maps.len());
        let mut class_probs = Vec::with_capacity(maps.len());
        for chunk in maps.chunks(PREDICT_CHUNK) {
            let x = batch_tensor(chunk);
            let (d, c) = self.forward(&x, &mut Phase::Mean)?;
            for i in 0..chunk.len() {
                domain_probs.push(
                    d.data()[i * self.n_domains..(i + 1) * self.n_domains]
                        .iter()
                        .map(|&v| f64::from(v))
                        .collect(),
                );
                class_probs.push(f64::from(c.data()[i]));
            }
        }
        Ok((domain_probs, class_probs))
    }
}

/// Monte Carlo prediction for one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McPrediction {
    /// Mean domain softmax over samples.
    pub domain_probs: Vec<f64>,
    /// Population variance of the domain softmax over samples.
    pub domain_variance: Vec<f64>,
    /// Mean class probability over samples.
    pub class_prob: f64,
    /// Population variance of the class probability.
    pub class_variance: f64,
    pub n_samples: usize,
}

/// Welford accumulator: exact for degenerate inputs (identical samples
/// keep the mean bitwise equal to them and the variance exactly zero).
#[derive(Debug, Clone)]
struct Welford {
    n: usize,
    mean: f64,
    m2: f64,
}

impl Welford {
    fn new() -> Self {
        Welford { n: 0, mean: 0.0, m2: 0.0 }
    }

    fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    fn variance(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.m2 / self.n as f64
        }
    }
}

/// Monte Carlo prediction over a batch of maps: `n_samples` sampled
/// passes, each using the noise stream derived for its sample index,
/// averaged per instance. Every map in one call shares the per-sample
/// weight perturbations (the per-example sign flips still decorrelate
/// them); callers wanting fully independent noise per instance should
/// call per map. Deterministic given (weights, maps, n_samples, seed).
pub fn mc_predict_set(
    net: &mut BayesNet,
    maps: &[&FeatureMap],
    n_samples: usize,
    seed: u64,
) -> Result<Vec<McPrediction>> {
    if n_samples == 0 {
        return Err(Error::Argument("mc_predict needs at least one sample".into()));
    }
    if maps.is_empty() {
        return Ok(Vec::new());
    }
    let n_domains = net.n_domains;
    let mut domain_acc: Vec<Vec<Welford>> =
        (0..maps.len()).map(|_| vec![Welford::new(); n_domains]).collect();
    let mut class_acc: Vec<Welford> = vec![Welford::new(); maps.len()];

    for i in 0..n_samples {
        let mut noise = rng::stream(seed, &[tag::MC, i as u64]);
        let mut offset = 0;
        for chunk in maps.chunks(PREDICT_CHUNK) {
            let x = batch_tensor(chunk);
            let (d, c) = net.forward(&x, &mut Phase::Sampled(&mut noise))?;
            for j in 0..chunk.len() {
                for k in 0..n_domains {
                    domain_acc[offset + j][k].push(f64::from(d.data()[j * n_domains + k]));
                }
                class_acc[offset + j].push(f64::from(c.data()[j]));
            }
            offset += chunk.len();
        }
    }

    Ok((0..maps.len())
        .map(|j| McPrediction {
            domain_probs: domain_acc[j].iter().map(|w| w.mean).collect(),
            domain_variance: domain_acc[j].iter().map(|w| w.variance()).collect(),
            class_prob: class_acc[j].mean,
            class_variance: class_acc[j].variance(),
            n_samples,
        })
        .collect())
}

/// Monte Carlo prediction for a single map.
pub fn mc_predict(
    net: &mut BayesNet,
    map: &FeatureMap,
    n_samples: usize,
    seed: u64,
) -> Result<McPrediction> {
    Ok(mc_predict_set(net, &[map], n_samples, seed)?.pop().expect("one map in, one out"))
}

/// Wraps averaged domain probabilities as the stage-one relationship
/// vector for threshold fusion.
pub fn relationship_from_probs(probs: &[f64]) -> Result<RelationshipVector> {
    if probs.is_empty() {
        return Err(Error::Argument("relationship vector needs at least one domain".into()));
    }
    for (i, &p) in probs.iter().enumerate() {
        if !p.is_finite() || !(-1e-9..=1.0 + 1e-9).contains(&p) {
            return Err(Error::Argument(format!(
                "domain probability {i} out of range: {p}"
            )));
        }
    }
    Ok(RelationshipVector {
        beta: probs.iter().map(|&p| p.clamp(0.0, 1.0)).collect(),
        source: RelSource::Bayes,
    })
}

/// Training configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BayesTrainConfig {
    pub theta: f64,
    pub alpha: f64,
    pub epochs: usize,
    pub per_domain: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for BayesTrainConfig {
    fn default() -> Self {
        BayesTrainConfig { theta: 1.0, alpha: 1.0, epochs: 300, per_domain: 8, lr: 1e-3, seed: 0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BayesEpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub domain_term: f64,
    pub class_term: f64,
    pub kl_term: f64,
    pub val_domain_accuracy: f64,
    pub val_class_accuracy: f64,
}

pub struct TrainedBayes {
    pub net: BayesNet,
    pub history: Vec<BayesEpochLog>,
    /// Epoch whose weights were kept (highest validation domain
    /// accuracy; earliest on ties).
    pub best_epoch: usize,
    pub best_val_domain_accuracy: f64,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean-pass validation accuracy for both heads.
fn evaluate(net: &mut BayesNet, set: &LabeledSet) -> Result<(f64, f64)> {
    let maps: Vec<&FeatureMap> = set.maps.iter().collect();
    let (domain_probs, class_probs) = net.mean_forward(&maps)?;
    let domain_ok = domain_probs
        .iter()
        .zip(&set.domains)
        .filter(|(row, &d)| argmax(row) == d)
        .count();
    let class_ok = class_probs
        .iter()
        .zip(&set.classes)
        .filter(|(&p, &y)| (p >= 0.5) == y)
        .count();
    Ok((domain_ok as f64 / set.len() as f64, class_ok as f64 / set.len() as f64))
}

/// Trains the variational recognizer on
/// theta * CCE(domain) + alpha * BCE(class) + KL / n_train,
/// one sampled pass per step, and restores the epoch with the best
/// validation domain accuracy before returning.
pub fn train_bayes(
    train: &LabeledSet,
    val: &LabeledSet,
    domain_labels: &[String],
    cfg: &BayesTrainConfig,
) -> Result<TrainedBayes> {
    let n_domains = domain_labels.len();
    train.validate(n_domains)?;
    val.validate(n_domains)?;
    let n_train = train.len();

    let mut init = rng::stream(cfg.seed, &[tag::INIT]);
    let mut net = BayesNet::new(n_domains, &mut init)?;
    let mut adam = Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() });

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, Vec<Vec<Vec<f32>>>)> = None;
    let mut global_step = 0u64;

    for epoch in 0..cfg.epochs {
        let mut batch_rng = rng::stream(cfg.seed, &[tag::BATCH, epoch as u64]);
        let batches =
            stratified_batches(&train.domains, n_domains, cfg.per_domain, &mut batch_rng);
        let mut epoch_domain = 0.0f64;
        let mut epoch_class = 0.0f64;
        let mut epoch_kl = 0.0f64;
        for batch in &batches {
            let maps: Vec<&FeatureMap> = batch.iter().map(|&i| &train.maps[i]).collect();
            let doms: Vec<usize> = batch.iter().map(|&i| train.domains[i]).collect();
            let classes: Vec<bool> = batch.iter().map(|&i| train.classes[i]).collect();

            let x = batch_tensor(&maps);
            net.trunk.zero_grad();
            net.domain_head.zero_grad();
            net.class_head.zero_grad();

            let mut noise = rng::stream(cfg.seed, &[tag::FLIPOUT, global_step]);
            let mut phase = Phase::Sampled(&mut noise);
            let h = net.trunk.forward(&x, &mut phase)?;
            let d = net.domain_head.forward(&h, &mut phase)?;
            let c = net.class_head.forward(&h, &mut phase)?;

            let (l_domain, g_cce) = losses::cce(&d, &doms)?;
            let (l_class, g_bce) = losses::bce(&c, &classes)?;
            let kl = net.kl() / n_train as f64;
            let loss =
                cfg.theta * f64::from(l_domain) + cfg.alpha * f64::from(l_class) + kl;
            if !loss.is_finite() {
                return Err(Error::Training(format!(
                    "elbo became non-finite at epoch {epoch} step {global_step} (seed {})",
                    cfg.seed
                )));
            }
            epoch_domain += f64::from(l_domain);
            epoch_class += f64::from(l_class);
            epoch_kl += kl;

            let g_d = net.domain_head.backward(&g_cce.map(|g| g * cfg.theta as f32))?;
            let g_c = net.class_head.backward(&g_bce.map(|g| g * cfg.alpha as f32))?;
            let mut g_h = g_d;
            for (g, a) in g_h.data_mut().iter_mut().zip(g_c.data()) {
                *g += a;
            }
            net.trunk.backward(&g_h)?;

            let kl_scale = 1.0 / n_train as f32;
            net.trunk.kl_backward(kl_scale);
            net.domain_head.kl_backward(kl_scale);
            net.class_head.kl_backward(kl_scale);

            let mut slots = net.trunk.param_slots();
            slots.extend(net.domain_head.param_slots());
            slots.extend(net.class_head.param_slots());
            adam.step(&mut slots)?;
            global_step += 1;
        }

        let steps = batches.len().max(1) as f64;
        let (val_domain, val_class) = evaluate(&mut net, val)?;
        history.push(BayesEpochLog {
            epoch,
            train_loss: cfg.theta * epoch_domain / steps
                + cfg.alpha * epoch_class / steps
                + epoch_kl / steps,
            domain_term: epoch_domain / steps,
            class_term: epoch_class / steps,
            kl_term: epoch_kl / steps,
            val_domain_accuracy: val_domain,
            val_class_accuracy: val_class,
        });

        if best.as_ref().map(|(_, acc, _)| val_domain > *acc).unwrap_or(true) {
            best = Some((
                epoch,
                val_domain,
                vec![net.trunk.snapshot(), net.domain_head.snapshot(), net.class_head.snapshot()],
            ));
        }
    }

    let (best_epoch, best_acc, snaps) = best.expect("epochs >= 1 leaves a best snapshot");
    net.trunk.restore(&snaps[0]);
    net.domain_head.restore(&snaps[1]);
    net.class_head.restore(&snaps[2]);

    Ok(TrainedBayes { net, history, best_epoch, best_val_domain_accuracy: best_acc })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bayes::zero_stddevs;
    use crate::features::FeatureExtractor;
    use rand::Rng;

    fn random_map(seed: u64, idx: u64) -> FeatureMap {
        let ex = FeatureExtractor::new();
        let mut r = crate::rng::stream(seed, &[90, idx]);
        let samples: Vec<f64> = (0..2000).map(|_| r.gen_range(-0.5..0.5)).collect();
        ex.extract_labeled(&samples, format!("m{idx}")).unwrap()
    }

    fn small_net(seed: u64) -> BayesNet {
        let mut init = crate::rng::stream(seed, &[crate::rng::tag::INIT]);
        BayesNet::new(3, &mut init).unwrap()
    }

    #[test]
    fn zero_samples_is_an_error() {
        let mut net = small_net(1);
        let map = random_map(1, 0);
        assert!(matches!(mc_predict(&mut net, &map, 0, 5), Err(Error::Argument(_))));
    }

    #[test]
    fn one_sample_has_zero_variance_and_valid_probs() {
        let mut net = small_net(2);
        let map = random_map(2, 0);
        let pred = mc_predict(&mut net, &map, 1, 5).unwrap();
        assert_eq!(pred.n_samples, 1);
        assert!(pred.domain_variance.iter().all(|&v| v == 0.0));
        assert_eq!(pred.class_variance, 0.0);
        let sum: f64 = pred.domain_probs.iter().sum();
        assert!((sum - 1.0).abs() < 1e-5, "softmax sum {sum}");
        assert!(pred.class_prob > 0.0 && pred.class_prob < 1.0);
    }

    #[test]
    fn zero_stddevs_collapse_sampling_to_the_mean_pass() {
        let mut net = small_net(3);
        zero_stddevs(&mut net.trunk.param_slots());
        zero_stddevs(&mut net.domain_head.param_slots());
        zero_stddevs(&mut net.class_head.param_slots());
        let map = random_map(3, 0);
        let (mean_d, mean_c) = net.mean_forward(&[&map]).unwrap();
        let pred = mc_predict(&mut net, &map, 5, 17).unwrap();
        // Degenerate posterior: every sample equals the mean pass, so
        // the average is bitwise identical and the variance is 0.
        assert_eq!(pred.domain_probs, mean_d[0]);
        assert_eq!(pred.class_prob, mean_c[0]);
        assert!(pred.domain_variance.iter().all(|&v| v == 0.0));
        assert_eq!(pred.class_variance, 0.0);
    }

    #[test]
    fn same_seed_reproduces_and_sampling_actually_varies() {
        let mut net = small_net(4);
        let map = random_map(4, 0);
        let a = mc_predict(&mut net, &map, 7, 21).unwrap();
        let b = mc_predict(&mut net, &map, 7, 21).unwrap();
        assert_eq!(a, b);
        let c = mc_predict(&mut net, &map, 7, 22).unwrap();
        assert_ne!(a.domain_probs, c.domain_probs);
        // Fresh init stddevs are nonzero, so samples differ.
        assert!(a.domain_variance.iter().any(|&v| v > 0.0));
    }

    #[test]
    fn batch_prediction_matches_per_instance_shape() {
        let mut net = small_net(5);
        let maps: Vec<FeatureMap> = (0..3).map(|i| random_map(5, i)).collect();
        let refs: Vec<&FeatureMap> = maps.iter().collect();
        let preds = mc_predict_set(&mut net, &refs, 4, 9).unwrap();
        assert_eq!(preds.len(), 3);
        for p in &preds {
            assert_eq!(p.domain_probs.len(), 3);
            let sum: f64 = p.domain_probs.iter().sum();
            assert!((sum - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn relationship_wraps_probabilities() {
        let rel = relationship_from_probs(&[0.7, 0.2, 0.1]).unwrap();
        assert_eq!(rel.source, RelSource::Bayes);
        assert_eq!(rel.beta, vec![0.7, 0.2, 0.1]);
        assert!(matches!(relationship_from_probs(&[]), Err(Error::Argument(_))));
        assert!(matches!(relationship_from_probs(&[1.2, 0.0]), Err(Error::Argument(_))));
        assert!(matches!(
            relationship_from_probs(&[f64::NAN, 0.5]),
            Err(Error::Argument(_))
        ));
    }

    fn tiny_sets(seed: u64) -> (LabeledSet, LabeledSet, Vec<String>) {
        // Three synthetic domains distinguished by tone frequency.
        let ex = FeatureExtractor::new();
        let mut r = crate::rng::stream(seed, &[91]);
        let mut build = |n: usize| {
            let mut set = LabeledSet::default();
            for i in 0..n {
                let domain = i % 3;
                let freq = [60.0, 220.0, 480.0][domain];
                let abnormal = i % 2 == 0;
                let samples: Vec<f64> = (0..2000)
                    .map(|t| {
                        let base =
                            0.4 * (2.0 * std::f64::consts::PI * freq * t as f64 / 2000.0).sin();
                        let extra = if abnormal {
                            0.25 * (2.0 * std::f64::consts::PI * 333.0 * t as f64 / 2000.0).sin()
                        } else {
                            0.0
                        };
                        base + extra + r.gen_range(-0.02..0.02)
                    })
                    .collect();
                set.maps.push(ex.extract_labeled(&samples, format!("t{i}")).unwrap());
                set.domains.push(domain);
                set.classes.push(abnormal);
            }
            set
        };
        (build(18), build(9), vec!["a".into(), "b".into(), "c".into()])
    }

    #[test]
    fn training_runs_deterministically_and_keeps_the_best_epoch() {
        let (train, val, labels) = tiny_sets(6);
        let cfg = BayesTrainConfig { epochs: 3, per_domain: 3, seed: 11, ..Default::default() };
        let a = train_bayes(&train, &val, &labels, &cfg).unwrap();
        assert_eq!(a.history.len(), 3);
        assert!(a.best_epoch < 3);
        let best_in_history = a
            .history
            .iter()
            .map(|e| e.val_domain_accuracy)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(a.best_val_domain_accuracy, best_in_history);
        let b = train_bayes(&train, &val, &labels, &cfg).unwrap();
        assert_eq!(a.net.trunk.export_blocks(), b.net.trunk.export_blocks());
        assert_eq!(a.net.domain_head.export_blocks(), b.net.domain_head.export_blocks());
        assert_eq!(a.net.class_head.export_blocks(), b.net.class_head.export_blocks());
        // KL term is logged and positive for a freshly regularized net.
        assert!(a.history[0].kl_term > 0.0);
    }
}
