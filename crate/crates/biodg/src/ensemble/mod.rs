//! Per-domain classifier ensemble and decision fusion.
//!
//! Stage two of the pipeline: each basis domain gets its own small
//! binary CNN trained on class-balanced windows of that domain alone.
//! At prediction time the stage-one relationship vector selects a
//! subset of these classifiers; their hard votes are fused by majority,
//! and an empty selection falls back to the recognizer's own class
//! head. The joint-learning baseline lives here too: a softmax domain
//! identifier soft-gates the same per-domain classifier shape into a
//! single weighted probability, trained end to end.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{balance_classes, ClassLabel};
use crate::engine::{losses, Adam, AdamConfig, LayerSpec, Phase, Scalar, Stack, Tensor};
use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::recognizer::{batch_tensor, stratified_batches, LabeledSet};
use crate::rng::{self, tag};

/// Inference batch chunk.
const PREDICT_CHUNK: usize = 64;

/// Which recognizer produced a relationship vector. The source decides
/// the selection rule inside [`fuse`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelSource {
    Triplet,
    Bayes,
}

/// Stage-one output: per basis domain, the degree of association
/// between an instance and that domain, each entry in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationshipVector {
    pub beta: Vec<f64>,
    pub source: RelSource,
}

impl RelationshipVector {
    pub fn validate(&self) -> Result<()> {
        if self.beta.is_empty() {
            return Err(Error::Argument("relationship vector is empty".into()));
        }
        for (i, &b) in self.beta.iter().enumerate() {
            if !b.is_finite() || !(0.0..=1.0).contains(&b) {
                return Err(Error::Argument(format!(
                    "relationship factor {i} out of [0,1]: {b}"
                )));
            }
        }
        Ok(())
    }
}

/// How many basis domains an instance associates with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationshipKind {
    OneToOne,
    OneToN,
    OneToNone,
}

/// One classifier's contribution to a fusion decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainVote {
    pub domain: String,
    pub probability: f64,
    pub vote: ClassLabel,
    pub selected: bool,
}

/// The fused decision for one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionResult {
    pub selected_domains: Vec<String>,
    pub votes: Vec<DomainVote>,
    pub relationship_kind: RelationshipKind,
    pub final_class: ClassLabel,
    pub fallback_used: bool,
}

/// Elementwise threshold: 1 iff v_i >= phi. The boundary is inclusive.
pub fn thr(v: &[f64], phi: f64) -> Vec<bool> {
    v.iter().map(|&x| x >= phi).collect()
}

/// Hard class decision at the 0.5 boundary (inclusive on abnormal).
pub fn hard_vote(probability: f64) -> ClassLabel {
    if probability >= 0.5 {
        ClassLabel::Abnormal
    } else {
        ClassLabel::Normal
    }
}

/// Fuses per-domain classifier probabilities under a relationship
/// vector into one decision.
///
/// Selection: a triplet-sourced vector selects every domain with
/// beta > 0 (its distance threshold was already applied when beta was
/// counted, so `phi` is ignored); a bayes-sourced vector selects
/// thr(beta, phi). A nonempty selection takes the majority of the
/// selected classifiers' hard votes; an even split defers to the vote
/// of the selected domain with the highest beta, and if several tied
/// top domains disagree the result is abnormal (the conservative
/// default). An empty selection falls back to the recognizer's class
/// head probability with `fallback_used = true`.
pub fn fuse(
    rel: &RelationshipVector,
    phi: f64,
    domain_labels: &[String],
    dsc_probs: &[f64],
    fallback_prob: f64,
) -> Result<FusionResult> {
    rel.validate()?;
    if rel.beta.len() != domain_labels.len() || rel.beta.len() != dsc_probs.len() {
        return Err(Error::shape(
            format!("{} domains", rel.beta.len()),
            format!("{} labels / {} probabilities", domain_labels.len(), dsc_probs.len()),
        ));
    }
    for (i, &p) in dsc_probs.iter().enumerate() {
        if !p.is_finite() || !(0.0..=1.0).contains(&p) {
            return Err(Error::Argument(format!(
                "classifier probability for {} out of [0,1]: {p}",
                domain_labels[i]
            )));
        }
    }
    if !fallback_prob.is_finite() || !(0.0..=1.0).contains(&fallback_prob) {
        return Err(Error::Argument(format!(
            "fallback probability out of [0,1]: {fallback_prob}"
        )));
    }
    let selected = match rel.source {
        RelSource::Triplet => rel.beta.iter().map(|&b| b > 0.0).collect::<Vec<bool>>(),
        RelSource::Bayes => {
            if !(0.0..=1.0).contains(&phi) {
                return Err(Error::Argument(format!(
                    "selection threshold must lie in [0,1], got {phi}"
                )));
            }
            thr(&rel.beta, phi)
        }
    };

    let votes: Vec<DomainVote> = domain_labels
        .iter()
        .zip(dsc_probs)
        .zip(&selected)
        .map(|((label, &p), &sel)| DomainVote {
            domain: label.clone(),
            probability: p,
            vote: hard_vote(p),
            selected: sel,
        })
        .collect();
    let selected_idx: Vec<usize> =
        (0..votes.len()).filter(|&i| selected[i]).collect();

    if selected_idx.is_empty() {
        return Ok(FusionResult {
            selected_domains: Vec::new(),
            votes,
            relationship_kind: RelationshipKind::OneToNone,
            final_class: hard_vote(fallback_prob),
            fallback_used: true,
        });
    }

    let abnormal = selected_idx
        .iter()
        .filter(|&&i| votes[i].vote == ClassLabel::Abnormal)
        .count();
    let normal = selected_idx.len() - abnormal;
    let final_class = if abnormal != normal {
        if abnormal > normal { ClassLabel::Abnormal } else { ClassLabel::Normal }
    } else {
        // Even split: the strongest-associated selected domain decides;
        // disagreeing ties resolve to abnormal.
        let top = selected_idx
            .iter()
            .map(|&i| rel.beta[i])
            .fold(f64::NEG_INFINITY, f64::max);
        let top_votes: Vec<ClassLabel> = selected_idx
            .iter()
            .filter(|&&i| rel.beta[i] == top)
            .map(|&i| votes[i].vote)
            .collect();
        if top_votes.iter().all(|&v| v == top_votes[0]) {
            top_votes[0]
        } else {
            ClassLabel::Abnormal
        }
    };

    Ok(FusionResult {
        selected_domains: selected_idx.iter().map(|&i| domain_labels[i].clone()).collect(),
        votes,
        relationship_kind: if selected_idx.len() == 1 {
            RelationshipKind::OneToOne
        } else {
            RelationshipKind::OneToN
        },
        final_class,
        fallback_used: false,
    })
}

/// Per-domain classifier: two 20-filter convs, each with relu and 2x2
/// max-pool, then a dense sigmoid head.
pub fn dsc_specs() -> Vec<LayerSpec> {
    vec![
        LayerSpec::Conv2d { in_ch: 1, in_h: 26, in_w: 99, out_ch: 20, kh: 3, kw: 3 },
        LayerSpec::Relu,
        LayerSpec::MaxPool2x2,
        LayerSpec::Conv2d { in_ch: 20, in_h: 12, in_w: 48, out_ch: 20, kh: 2, kw: 2 },
        LayerSpec::Relu,
        LayerSpec::MaxPool2x2,
        LayerSpec::Flatten,
        LayerSpec::Dense { in_dim: 2300, out_dim: 1 },
        LayerSpec::Sigmoid,
    ]
}

/// A trained binary classifier for one basis domain.
pub struct DomainClassifier {
    pub domain: String,
    pub stack: Stack<f32>,
}

impl DomainClassifier {
    pub fn probabilities(&mut self, maps: &[&FeatureMap]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(maps.len());
        for chunk in maps.chunks(PREDICT_CHUNK) {
            let x = batch_tensor(chunk);
            let p = self.stack.forward(&x, &mut Phase::Mean)?;
            out.extend(p.data().iter().map(|&v| f64::from(v)));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DscTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for DscTrainConfig {
    fn default() -> Self {
        DscTrainConfig { epochs: 60, batch_size: 16, lr: 1e-3, seed: 0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DscEpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub holdout_accuracy: f64,
}

pub struct TrainedDsc {
    pub classifier: DomainClassifier,
    pub history: Vec<DscEpochLog>,
    pub best_epoch: usize,
    /// Accuracy on the internal holdout at the kept epoch.
    pub holdout_accuracy: f64,
    /// Windows actually trained on after balancing and holdout split.
    pub n_train: usize,
}

fn classify_accuracy(probs: &[f64], classes: &[bool]) -> f64 {
    if probs.is_empty() {
        return 0.0;
    }
    let ok = probs.iter().zip(classes).filter(|(&p, &y)| (p >= 0.5) == y).count();
    ok as f64 / probs.len() as f64
}

/// Trains one per-domain classifier with BCE on class-balanced windows
/// of a single basis domain. One window in five (after balancing) is
/// held out to pick the best epoch; a domain with only one class is a
/// balance error.
pub fn train_domain_classifier(
    domain: &str,
    maps: &[FeatureMap],
    classes: &[bool],
    cfg: &DscTrainConfig,
) -> Result<TrainedDsc> {
    if maps.len() != classes.len() {
        return Err(Error::shape(
            format!("{} labels", maps.len()),
            format!("{}", classes.len()),
        ));
    }
    let labels: Vec<ClassLabel> = classes
        .iter()
        .map(|&a| if a { ClassLabel::Abnormal } else { ClassLabel::Normal })
        .collect();
    let kept = balance_classes(&labels, cfg.seed)?;

    let mut train_idx = Vec::new();
    let mut hold_idx = Vec::new();
    for (pos, &i) in kept.iter().enumerate() {
        if pos % 5 == 4 {
            hold_idx.push(i);
        } else {
            train_idx.push(i);
        }
    }
    if hold_idx.is_empty() {
        hold_idx = train_idx.clone();
    }
    let hold_maps: Vec<&FeatureMap> = hold_idx.iter().map(|&i| &maps[i]).collect();
    let hold_classes: Vec<bool> = hold_idx.iter().map(|&i| classes[i]).collect();

    let mut init = rng::stream(cfg.seed, &[tag::INIT]);
    let mut stack = Stack::from_specs(&dsc_specs(), &mut init)?;
    let mut adam = Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() });

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, Vec<Vec<f32>>)> = None;
    for epoch in 0..cfg.epochs {
        let mut order = train_idx.clone();
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng::stream(cfg.seed, &[tag::BATCH, epoch as u64]));
        let mut epoch_loss = 0.0f64;
        let mut steps = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let bmaps: Vec<&FeatureMap> = batch.iter().map(|&i| &maps[i]).collect();
            let bclasses: Vec<bool> = batch.iter().map(|&i| classes[i]).collect();
            let x = batch_tensor(&bmaps);
            stack.zero_grad();
            let p = stack.forward(&x, &mut Phase::Mean)?;
            let (loss, g) = losses::bce(&p, &bclasses)?;
            if !f64::from(loss).is_finite() {
                return Err(Error::Training(format!(
                    "classifier for {domain} hit a non-finite loss at epoch {epoch} (seed {})",
                    cfg.seed
                )));
            }
            epoch_loss += f64::from(loss);
            steps += 1;
            stack.backward(&g)?;
            adam.step(&mut stack.param_slots())?;
        }

        let mut clf = DomainClassifier { domain: domain.to_string(), stack };
        let acc = classify_accuracy(&clf.probabilities(&hold_maps)?, &hold_classes);
        stack = clf.stack;
        history.push(DscEpochLog {
            epoch,
            train_loss: epoch_loss / steps.max(1) as f64,
            holdout_accuracy: acc,
        });
        if best.as_ref().map(|(_, b, _)| acc > *b).unwrap_or(true) {
            best = Some((epoch, acc, stack.snapshot()));
        }
    }

    let (best_epoch, holdout_accuracy, snap) =
        best.ok_or_else(|| Error::Config("classifier training needs epochs >= 1".into()))?;
    stack.restore(&snap);
    Ok(TrainedDsc {
        classifier: DomainClassifier { domain: domain.to_string(), stack },
        history,
        best_epoch,
        holdout_accuracy,
        n_train: train_idx.len(),
    })
}

/// The per-domain classifiers for every basis domain, in label order.
pub struct DomainEnsemble {
    pub domain_labels: Vec<String>,
    pub classifiers: Vec<DomainClassifier>,
}

impl DomainEnsemble {
    /// Probability matrix: one row per map, one column per basis domain.
    pub fn probability_matrix(&mut self, maps: &[&FeatureMap]) -> Result<Vec<Vec<f64>>> {
        let mut columns = Vec::with_capacity(self.classifiers.len());
        for clf in &mut self.classifiers {
            columns.push(clf.probabilities(maps)?);
        }
        Ok((0..maps.len())
            .map(|r| columns.iter().map(|c| c[r]).collect())
            .collect())
    }
}

pub struct TrainedEnsemble {
    pub ensemble: DomainEnsemble,
    pub reports: Vec<TrainedDscReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainedDscReport {
    pub domain: String,
    pub best_epoch: usize,
    pub holdout_accuracy: f64,
    pub n_train: usize,
}

/// Trains one classifier per basis domain on that domain's windows.
/// Per-domain seeds derive from the base seed and the domain position.
pub fn train_ensemble(
    train: &LabeledSet,
    domain_labels: &[String],
    cfg: &DscTrainConfig,
) -> Result<TrainedEnsemble> {
    train.validate(domain_labels.len())?;
    let mut classifiers = Vec::with_capacity(domain_labels.len());
    let mut reports = Vec::with_capacity(domain_labels.len());
    for (d, label) in domain_labels.iter().enumerate() {
        let idx: Vec<usize> =
            (0..train.len()).filter(|&i| train.domains[i] == d).collect();
        if idx.is_empty() {
            return Err(Error::Domain(format!("no training windows for domain {label}")));
        }
        let maps: Vec<FeatureMap> = idx.iter().map(|&i| train.maps[i].clone()).collect();
        let classes: Vec<bool> = idx.iter().map(|&i| train.classes[i]).collect();
        let dcfg = DscTrainConfig {
            seed: rng::derive(cfg.seed, &[tag::INIT, d as u64]),
            ..cfg.clone()
        };
        let trained = train_domain_classifier(label, &maps, &classes, &dcfg)?;
        reports.push(TrainedDscReport {
            domain: label.clone(),
            best_epoch: trained.best_epoch,
            holdout_accuracy: trained.holdout_accuracy,
            n_train: trained.n_train,
        });
        classifiers.push(trained.classifier);
    }
    Ok(TrainedEnsemble {
        ensemble: DomainEnsemble { domain_labels: domain_labels.to_vec(), classifiers },
        reports,
    })
}

/// Domain identifier trunk for the baseline: the variational recognizer
/// topology with ordinary layers and no class head.
pub fn di_trunk_specs() -> Vec<LayerSpec> {
    vec![
        LayerSpec::Conv2d { in_ch: 1, in_h: 26, in_w: 99, out_ch: 16, kh: 3, kw: 3 },
        LayerSpec::Relu,
        LayerSpec::MaxPool2x2,
        LayerSpec::Conv2d { in_ch: 16, in_h: 12, in_w: 48, out_ch: 16, kh: 2, kw: 2 },
        LayerSpec::Relu,
        LayerSpec::MaxPool2x2,
        LayerSpec::Conv2d { in_ch: 16, in_h: 5, in_w: 23, out_ch: 8, kh: 2, kw: 2 },
        LayerSpec::Relu,
        LayerSpec::MaxPool2x2,
        LayerSpec::Flatten,
        LayerSpec::Dense { in_dim: 176, out_dim: 64 },
        LayerSpec::Relu,
        LayerSpec::Dense { in_dim: 64, out_dim: 32 },
        LayerSpec::Relu,
    ]
}

pub fn di_head_specs(n_domains: usize) -> Vec<LayerSpec> {
    vec![LayerSpec::Dense { in_dim: 32, out_dim: n_domains }, LayerSpec::Softmax]
}

/// Soft-gated weighted sum: y = sum_i weights[i] * branch_probs[i].
/// With softmaxed weights the result is a convex combination, so it
/// stays inside (0, 1) whenever every branch output does.
pub fn fused_probability<S: Scalar>(weights: &[S], branch_probs: &[S]) -> S {
    debug_assert_eq!(weights.len(), branch_probs.len());
    let mut acc = S::zero();
    for (&w, &p) in weights.iter().zip(branch_probs) {
        acc = acc + w * p;
    }
    acc
}

/// Joint-learning baseline: a softmax domain identifier gates one
/// classifier branch per basis domain. Unlike the hard selection of
/// [`fuse`], every branch receives gradient for every instance.
pub struct BaselineNet<S: Scalar> {
    pub n_domains: usize,
    pub di_trunk: Stack<S>,
    pub di_head: Stack<S>,
    pub branches: Vec<Stack<S>>,
}

pub struct BaselineParts<S: Scalar> {
    /// Domain weights, one row per instance.
    pub di: Tensor<S>,
    /// One [B,1] probability tensor per branch.
    pub branches: Vec<Tensor<S>>,
}

impl<S: Scalar> BaselineNet<S> {
    pub fn new(n_domains: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if n_domains < 2 {
            return Err(Error::Argument(format!(
                "baseline needs at least two domains, got {n_domains}"
            )));
        }
        Ok(BaselineNet {
            n_domains,
            di_trunk: Stack::from_specs(&di_trunk_specs(), rng)?,
            di_head: Stack::from_specs(&di_head_specs(n_domains), rng)?,
            branches: (0..n_domains)
                .map(|_| Stack::from_specs(&dsc_specs(), rng))
                .collect::<Result<_>>()?,
        })
    }

    pub fn from_stacks(n_domains: usize, mut stacks: Vec<Stack<S>>) -> Result<Self> {
        if stacks.len() != n_domains + 2 {
            return Err(Error::Format(format!(
                "baseline checkpoint needs {} stacks, found {}",
                n_domains + 2,
                stacks.len()
            )));
        }
        let branches = stacks.split_off(2);
        let di_head = stacks.pop().expect("len checked");
        let di_trunk = stacks.pop().expect("len checked");
        Ok(BaselineNet { n_domains, di_trunk, di_head, branches })
    }

    pub fn all_stacks(&self) -> Vec<&Stack<S>> {
        let mut v = vec![&self.di_trunk, &self.di_head];
        v.extend(self.branches.iter());
        v
    }

    pub fn forward_parts(&mut self, x: &Tensor<S>) -> Result<BaselineParts<S>> {
        let h = self.di_trunk.forward(x, &mut Phase::Mean)?;
        let di = self.di_head.forward(&h, &mut Phase::Mean)?;
        let branches = self
            .branches
            .iter_mut()
            .map(|b| b.forward(x, &mut Phase::Mean))
            .collect::<Result<Vec<_>>>()?;
        Ok(BaselineParts { di, branches })
    }

    /// Fused probability per instance from forward parts.
    pub fn fused(&self, parts: &BaselineParts<S>) -> Vec<S> {
        let b = parts.di.shape()[0];
        let n = self.n_domains;
        (0..b)
            .map(|r| {
                let weights = &parts.di.data()[r * n..(r + 1) * n];
                let probs: Vec<S> =
                    parts.branches.iter().map(|t| t.data()[r]).collect();
                fused_probability(weights, &probs)
            })
            .collect()
    }

    /// One training step's forward and backward: accumulates parameter
    /// gradients of theta * CCE(domain weights) + alpha * BCE(fused)
    /// into the stacks and returns the loss terms. The fused term
    /// backpropagates by the product rule: the identifier receives
    /// g * branch_i and branch i receives g * weight_i.
    pub fn loss_and_grads(
        &mut self,
        x: &Tensor<S>,
        domains: &[usize],
        classes: &[bool],
        theta: S,
        alpha: S,
    ) -> Result<(S, S, S)> {
        let b = x.shape()[0];
        let n = self.n_domains;
        self.di_trunk.zero_grad();
        self.di_head.zero_grad();
        for branch in &mut self.branches {
            branch.zero_grad();
        }

        let parts = self.forward_parts(x)?;
        let fused = self.fused(&parts);
        let y = Tensor::from_vec(&[b, 1], fused);

        let (l_domain, g_cce) = losses::cce(&parts.di, domains)?;
        let (l_class, g_bce) = losses::bce(&y, classes)?;

        let mut g_di = vec![S::zero(); b * n];
        for r in 0..b {
            let g = alpha * g_bce.data()[r];
            for i in 0..n {
                g_di[r * n + i] =
                    theta * g_cce.data()[r * n + i] + g * parts.branches[i].data()[r];
            }
        }
        let g_h = self.di_head.backward(&Tensor::from_vec(&[b, n], g_di))?;
        self.di_trunk.backward(&g_h)?;

        for (i, branch) in self.branches.iter_mut().enumerate() {
            let g_branch: Vec<S> = (0..b)
                .map(|r| alpha * g_bce.data()[r] * parts.di.data()[r * n + i])
                .collect();
            branch.backward(&Tensor::from_vec(&[b, 1], g_branch))?;
        }

        Ok((theta * l_domain + alpha * l_class, l_domain, l_class))
    }

    /// Mean-pass predictions: fused class probability and domain
    /// weights per map.
    pub fn predict(
        &mut self,
        maps: &[&FeatureMap],
    ) -> Result<(Vec<f64>, Vec<Vec<f64>>)>
    where
        S: From<f32>,
        f64: From<S>,
    {
        let mut class_probs = Vec::with_capacity(maps.len());
        let mut domain_weights = Vec::with_capacity(maps.len());
        for chunk in maps.chunks(PREDICT_CHUNK) {
            let x32 = batch_tensor(chunk);
            let x = Tensor::from_vec(
                x32.shape(),
                x32.data().iter().map(|&v| <S as From<f32>>::from(v)).collect(),
            );
            let parts = self.forward_parts(&x)?;
            for (r, &p) in self.fused(&parts).iter().enumerate() {
                class_probs.push(f64::from(p));
                domain_weights.push(
                    parts.di.data()[r * self.n_domains..(r + 1) * self.n_domains]
                        .iter()
                        .map(|&w| f64::from(w))
                        .collect(),
                );
            }
        }
        Ok((class_probs, domain_weights))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaselineTrainConfig {
    pub theta: f64,
    pub alpha: f64,
    pub epochs: usize,
    pub per_domain: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for BaselineTrainConfig {
    fn default() -> Self {
        BaselineTrainConfig {
            theta: 0.9,
            alpha: 0.1,
            epochs: 300,
            per_domain: 8,
            lr: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaselineEpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub domain_term: f64,
    pub class_term: f64,
    pub val_domain_accuracy: f64,
    pub val_class_accuracy: f64,
}

pub struct TrainedBaseline {
    pub net: BaselineNet<f32>,
    pub history: Vec<BaselineEpochLog>,
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

fn evaluate_baseline(net: &mut BaselineNet<f32>, set: &LabeledSet) -> Result<(f64, f64)> {
    let maps: Vec<&FeatureMap> = set.maps.iter().collect();
    let (class_probs, weights) = net.predict(&maps)?;
    let domain_ok = weights
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

/// Trains the joint baseline and keeps the epoch with the best
/// validation domain accuracy.
pub fn train_baseline(
    train: &LabeledSet,
    val: &LabeledSet,
    domain_labels: &[String],
    cfg: &BaselineTrainConfig,
) -> Result<TrainedBaseline> {
    let n_domains = domain_labels.len();
    train.validate(n_domains)?;
    val.validate(n_domains)?;

    let mut init = rng::stream(cfg.seed, &[tag::INIT]);
    let mut net: BaselineNet<f32> = BaselineNet::new(n_domains, &mut init)?;
    let mut adam = Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() });

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, Vec<Vec<Vec<f32>>>)> = None;
    for epoch in 0..cfg.epochs {
        let mut batch_rng = rng::stream(cfg.seed, &[tag::BATCH, epoch as u64]);
        let batches =
            stratified_batches(&train.domains, n_domains, cfg.per_domain, &mut batch_rng);
        let mut epoch_domain = 0.0f64;
        let mut epoch_class = 0.0f64;
        for (step, batch) in batches.iter().enumerate() {
            let maps: Vec<&FeatureMap> = batch.iter().map(|&i| &train.maps[i]).collect();
            let doms: Vec<usize> = batch.iter().map(|&i| train.domains[i]).collect();
            let classes: Vec<bool> = batch.iter().map(|&i| train.classes[i]).collect();
            let x = batch_tensor(&maps);
            let (loss, l_domain, l_class) = net.loss_and_grads(
                &x,
                &doms,
                &classes,
                cfg.theta as f32,
                cfg.alpha as f32,
            )?;
            if !f64::from(loss).is_finite() {
                return Err(Error::Training(format!(
                    "baseline loss became non-finite at epoch {epoch} step {step} (seed {})",
                    cfg.seed
                )));
            }
            epoch_domain += f64::from(l_domain);
            epoch_class += f64::from(l_class);
            let mut slots = net.di_trunk.param_slots();
            slots.extend(net.di_head.param_slots());
            for branch in &mut net.branches {
                slots.extend(branch.param_slots());
            }
            adam.step(&mut slots)?;
        }

        let steps = batches.len().max(1) as f64;
        let (val_domain, val_class) = evaluate_baseline(&mut net, val)?;
        history.push(BaselineEpochLog {
            epoch,
            train_loss: cfg.theta * epoch_domain / steps + cfg.alpha * epoch_class / steps,
            domain_term: epoch_domain / steps,
            class_term: epoch_class / steps,
            val_domain_accuracy: val_domain,
            val_class_accuracy: val_class,
        });
        if best.as_ref().map(|(_, acc, _)| val_domain > *acc).unwrap_or(true) {
            let mut snaps = vec![net.di_trunk.snapshot(), net.di_head.snapshot()];
            snaps.extend(net.branches.iter().map(|b| b.snapshot()));
            best = Some((epoch, val_domain, snaps));
        }
    }

    let (best_epoch, best_acc, snaps) =
        best.ok_or_else(|| Error::Config("baseline training needs epochs >= 1".into()))?;
    net.di_trunk.restore(&snaps[0]);
    net.di_head.restore(&snaps[1]);
    for (branch, snap) in net.branches.iter_mut().zip(&snaps[2..]) {
        branch.restore(snap);
    }

    Ok(TrainedBaseline { net, history, best_epoch, best_val_domain_accuracy: best_acc })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureExtractor;
    use rand::Rng;

    fn labels(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("d{i}")).collect()
    }

    #[test]
    fn thr_examples_and_inclusive_boundary() {
        assert_eq!(thr(&[0.1, 0.6, 0.9], 0.5), vec![false, true, true]);
        assert_eq!(thr(&[0.3, 0.0, 1.0], 0.0), vec![true, true, true]);
        assert_eq!(thr(&[0.5], 0.5), vec![true]);
    }

    #[test]
    fn thr_is_monotone_in_phi() {
        let mut r = crate::rng::stream(1, &[50]);
        for _ in 0..50 {
            let v: Vec<f64> = (0..6).map(|_| r.gen_range(0.0..1.0)).collect();
            let mut prev = thr(&v, 0.0);
            for step in 1..=10 {
                let cur = thr(&v, step as f64 / 10.0);
                for (c, p) in cur.iter().zip(&prev) {
                    assert!(!c | p, "raising phi added a selection");
                }
                prev = cur;
            }
        }
    }

    fn bayes_rel(beta: &[f64]) -> RelationshipVector {
        RelationshipVector { beta: beta.to_vec(), source: RelSource::Bayes }
    }

    fn triplet_rel(beta: &[f64]) -> RelationshipVector {
        RelationshipVector { beta: beta.to_vec(), source: RelSource::Triplet }
    }

    #[test]
    fn majority_of_selected_votes_wins() {
        let rel = bayes_rel(&[0.9, 0.8, 0.7, 0.1, 0.1, 0.1]);
        let probs = [0.8, 0.7, 0.2, 0.9, 0.9, 0.9];
        let out = fuse(&rel, 0.5, &labels(6), &probs, 0.0).unwrap();
        assert_eq!(out.relationship_kind, RelationshipKind::OneToN);
        assert_eq!(out.selected_domains, vec!["d0", "d1", "d2"]);
        assert_eq!(out.final_class, ClassLabel::Abnormal);
        assert!(!out.fallback_used);
        assert_eq!(out.votes.len(), 6);
        assert!(out.votes[3].vote == ClassLabel::Abnormal && !out.votes[3].selected);
    }

    #[test]
    fn empty_selection_falls_back_to_the_recognizer_head() {
        let rel = triplet_rel(&[0.0; 6]);
        let probs = [0.9; 6];
        let out = fuse(&rel, 0.0, &labels(6), &probs, 0.7).unwrap();
        assert_eq!(out.relationship_kind, RelationshipKind::OneToNone);
        assert!(out.fallback_used);
        assert!(out.selected_domains.is_empty());
        assert_eq!(out.final_class, ClassLabel::Abnormal);
        let out = fuse(&rel, 0.0, &labels(6), &probs, 0.2).unwrap();
        assert_eq!(out.final_class, ClassLabel::Normal);
    }

    #[test]
    fn one_hot_selection_equals_the_single_classifier() {
        for (d, &p) in [0.9, 0.1, 0.5, 0.49].iter().enumerate().take(4) {
            let mut beta = [0.0; 6];
            beta[d] = 0.6;
            let mut probs = [0.5; 6];
            probs[d] = p;
            let out = fuse(&bayes_rel(&beta), 0.5, &labels(6), &probs, 0.0).unwrap();
            assert_eq!(out.relationship_kind, RelationshipKind::OneToOne);
            assert_eq!(out.selected_domains, vec![format!("d{d}")]);
            assert_eq!(out.final_class, hard_vote(p));
            assert!(!out.fallback_used);
        }
    }

    #[test]
    fn triplet_selection_is_strictly_positive() {
        let rel = triplet_rel(&[0.0, 1e-9, 0.3, 0.0, 0.0, 0.0]);
        let out = fuse(&rel, 0.0, &labels(6), &[0.9; 6], 0.1).unwrap();
        assert_eq!(out.selected_domains, vec!["d1", "d2"]);
    }

    #[test]
    fn fusion_is_invariant_under_domain_permutation() {
        let mut r = crate::rng::stream(2, &[51]);
        let base_labels = labels(6);
        for _ in 0..60 {
            let beta: Vec<f64> = (0..6).map(|_| r.gen_range(0.0..1.0)).collect();
            let probs: Vec<f64> = (0..6).map(|_| r.gen_range(0.0..1.0)).collect();
            let source = if r.gen_bool(0.5) { RelSource::Bayes } else { RelSource::Triplet };
            let rel = RelationshipVector { beta: beta.clone(), source };
            let phi = r.gen_range(0.0..1.0);
            let fallback = r.gen_range(0.0..1.0);
            let out = fuse(&rel, phi, &base_labels, &probs, fallback).unwrap();

            let mut perm: Vec<usize> = (0..6).collect();
            use rand::seq::SliceRandom;
            perm.shuffle(&mut r);
            let rel_p = RelationshipVector {
                beta: perm.iter().map(|&i| beta[i]).collect(),
                source,
            };
            let labels_p: Vec<String> =
                perm.iter().map(|&i| base_labels[i].clone()).collect();
            let probs_p: Vec<f64> = perm.iter().map(|&i| probs[i]).collect();
            let out_p = fuse(&rel_p, phi, &labels_p, &probs_p, fallback).unwrap();

            assert_eq!(out.final_class, out_p.final_class);
            assert_eq!(out.relationship_kind, out_p.relationship_kind);
            assert_eq!(out.fallback_used, out_p.fallback_used);
            let mut a = out.selected_domains.clone();
            let mut b = out_p.selected_domains.clone();
            a.sort();
            b.sort();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn even_split_defers_to_the_strongest_domain_then_abnormal() {
        // Two selected, opposite votes, distinct beta: the stronger one
        // decides in either direction.
        let rel = bayes_rel(&[0.9, 0.6, 0.0, 0.0, 0.0, 0.0]);
        let out = fuse(&rel, 0.5, &labels(6), &[0.9, 0.1, 0.5, 0.5, 0.5, 0.5], 0.0).unwrap();
        assert_eq!(out.final_class, ClassLabel::Abnormal);
        let out = fuse(&rel, 0.5, &labels(6), &[0.1, 0.9, 0.5, 0.5, 0.5, 0.5], 0.0).unwrap();
        assert_eq!(out.final_class, ClassLabel::Normal);
        // Tied beta with disagreeing votes: abnormal wins.
        let rel = bayes_rel(&[0.8, 0.8, 0.0, 0.0, 0.0, 0.0]);
        let out = fuse(&rel, 0.5, &labels(6), &[0.1, 0.9, 0.5, 0.5, 0.5, 0.5], 0.0).unwrap();
        assert_eq!(out.final_class, ClassLabel::Abnormal);
        // Tied beta with agreeing votes: their shared vote stands.
        let out = fuse(&rel, 0.5, &labels(6), &[0.2, 0.3, 0.5, 0.5, 0.5, 0.5], 0.0).unwrap();
        assert_eq!(out.final_class, ClassLabel::Normal);
    }

    #[test]
    fn fuse_validates_inputs() {
        let rel = bayes_rel(&[1.2, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(matches!(
            fuse(&rel, 0.5, &labels(6), &[0.5; 6], 0.5),
            Err(Error::Argument(_))
        ));
        let rel = bayes_rel(&[0.5; 6]);
        assert!(matches!(
            fuse(&rel, 1.5, &labels(6), &[0.5; 6], 0.5),
            Err(Error::Argument(_))
        ));
        assert!(matches!(
            fuse(&rel, 0.5, &labels(5), &[0.5; 6], 0.5),
            Err(Error::Shape { .. })
        ));
        assert!(matches!(
            fuse(&rel, 0.5, &labels(6), &[1.5; 6], 0.5),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn fusion_result_serializes_with_readable_tags() {
        let rel = triplet_rel(&[0.0; 6]);
        let out = fuse(&rel, 0.0, &labels(6), &[0.4; 6], 0.9).unwrap();
        let json = serde_json::to_string(&out).unwrap();
        assert!(json.contains("\"one_to_none\""));
        assert!(json.contains("\"fallback_used\":true"));
        assert!(json.contains("\"abnormal\""));
        let back: FusionResult = serde_json::from_str(&json).unwrap();
        assert_eq!(back, out);
    }

    #[test]
    fn fused_probability_identities() {
        // One-hot weights pick out a single branch.
        let probs = [0.3f64, 0.8, 0.6];
        for k in 0..3 {
            let mut w = [0.0f64; 3];
            w[k] = 1.0;
            assert_eq!(fused_probability(&w, &probs), probs[k]);
        }
        // Uniform weights average the branches.
        let w = [1.0 / 3.0; 3];
        let got: f64 = fused_probability(&w, &probs);
        assert!((got - (0.3 + 0.8 + 0.6) / 3.0).abs() < 1e-12);
        // Random weights match the arithmetic oracle, and the value is
        // invariant under permuting (weight, branch) pairs together.
        let mut r = crate::rng::stream(3, &[52]);
        for _ in 0..50 {
            let mut w: Vec<f64> = (0..6).map(|_| r.gen_range(0.0..1.0)).collect();
            let sum: f64 = w.iter().sum();
            w.iter_mut().for_each(|x| *x /= sum);
            let p: Vec<f64> = (0..6).map(|_| r.gen_range(0.0..1.0)).collect();
            let oracle: f64 = w.iter().zip(&p).map(|(a, b)| a * b).sum();
            assert!((fused_probability(&w, &p) - oracle).abs() < 1e-12);
            let mut perm: Vec<usize> = (0..6).collect();
            use rand::seq::SliceRandom;
            perm.shuffle(&mut r);
            let wp: Vec<f64> = perm.iter().map(|&i| w[i]).collect();
            let pp: Vec<f64> = perm.iter().map(|&i| p[i]).collect();
            assert!((fused_probability(&wp, &pp) - oracle).abs() < 1e-12);
        }
    }

    /// Random feature-map-shaped tensor for the f64 gradient check.
    fn random_input(r: &mut rand_chacha::ChaCha8Rng, b: usize) -> Tensor<f64> {
        let data: Vec<f64> =
            (0..b * 26 * 99).map(|_| r.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(&[b, 1, 26, 99], data)
    }

    #[test]
    fn baseline_product_rule_gradients_match_finite_differences() {
        let mut init = crate::rng::stream(4, &[crate::rng::tag::INIT]);
        let mut net: BaselineNet<f64> = BaselineNet::new(3, &mut init).unwrap();
        let mut r = crate::rng::stream(4, &[53]);
        let x = random_input(&mut r, 2);
        let domains = vec![0usize, 2];
        let classes = vec![true, false];
        let (theta, alpha) = (0.9, 0.1);

        let _ = net.loss_and_grads(&x, &domains, &classes, theta, alpha).unwrap();
        let grads: Vec<Vec<f64>> = {
            let mut all = net.di_trunk.param_slots();
            all.extend(net.di_head.param_slots());
            for branch in &mut net.branches {
                all.extend(branch.param_slots());
            }
            all.iter().map(|s| s.grads.to_vec()).collect()
        };

        // Small enough that truncation stays below the comparison floor
        // even for parameters with gradients near 1e-7.
        let h = 1e-6;
        let mut checked = 0;
        let mut slot_lens = Vec::new();
        {
            let mut all = net.di_trunk.param_slots();
            all.extend(net.di_head.param_slots());
            for branch in &mut net.branches {
                all.extend(branch.param_slots());
            }
            for s in &all {
                slot_lens.push(s.values.len());
            }
        }
        for (slot_i, &len) in slot_lens.iter().enumerate() {
            // A few spread-out parameters per slot keeps this fast.
            for j in [0, len / 2, len - 1] {
                let eval = |net: &mut BaselineNet<f64>, delta: f64| -> f64 {
                    {
                        let mut all = net.di_trunk.param_slots();
                        all.extend(net.di_head.param_slots());
                        for branch in &mut net.branches {
                            all.extend(branch.param_slots());
                        }
                        all[slot_i].values[j] += delta;
                    }
                    let (loss, _, _) =
                        net.loss_and_grads(&x, &domains, &classes, theta, alpha).unwrap();
                    {
                        let mut all = net.di_trunk.param_slots();
                        all.extend(net.di_head.param_slots());
                        for branch in &mut net.branches {
                            all.extend(branch.param_slots());
                        }
                        all[slot_i].values[j] -= delta;
                    }
                    loss
                };
                let fd = (eval(&mut net, h) - eval(&mut net, -h)) / (2.0 * h);
                let an = grads[slot_i][j];
                let denom = fd.abs().max(an.abs()).max(1e-6);
                assert!(
                    ((fd - an) / denom).abs() < 1e-3,
                    "slot {slot_i} param {j}: finite diff {fd} vs analytic {an}"
                );
                checked += 1;
            }
        }
        assert!(checked >= 24);
    }

    #[test]
    fn baseline_forward_matches_manual_weighted_sum() {
        let mut init = crate::rng::stream(5, &[crate::rng::tag::INIT]);
        let mut net: BaselineNet<f64> = BaselineNet::new(3, &mut init).unwrap();
        let mut r = crate::rng::stream(5, &[54]);
        let x = random_input(&mut r, 3);
        let parts = net.forward_parts(&x).unwrap();
        let fused = net.fused(&parts);
        for row in 0..3 {
            let manual: f64 = (0..3)
                .map(|i| parts.di.data()[row * 3 + i] * parts.branches[i].data()[row])
                .sum();
            assert_eq!(fused[row], manual);
            assert!(fused[row] > 0.0 && fused[row] < 1.0);
            let wsum: f64 = parts.di.data()[row * 3..row * 3 + 3].iter().sum();
            assert!((wsum - 1.0).abs() < 1e-12, "softmax weights sum to one");
        }
    }

    fn tone_set(seed: u64, n: usize, domains: usize) -> LabeledSet {
        let ex = FeatureExtractor::new();
        let mut r = crate::rng::stream(seed, &[55]);
        let mut set = LabeledSet::default();
        for i in 0..n {
            let domain = i % domains;
            let freq = 60.0 + 120.0 * domain as f64;
            // Alternate the class within each domain so every domain
            // holds both classes.
            let abnormal = (i / domains) % 2 == 0;
            let samples: Vec<f64> = (0..2000)
                .map(|t| {
                    let base =
                        0.4 * (2.0 * std::f64::consts::PI * freq * t as f64 / 2000.0).sin();
                    let extra = if abnormal {
                        0.3 * (2.0 * std::f64::consts::PI * 550.0 * t as f64 / 2000.0).sin()
                    } else {
                        0.0
                    };
                    base + extra + r.gen_range(-0.02..0.02)
                })
                .collect();
            set.maps.push(ex.extract_labeled(&samples, format!("e{i}")).unwrap());
            set.domains.push(domain);
            set.classes.push(abnormal);
        }
        set
    }

    #[test]
    fn domain_classifier_trains_on_balanced_windows_deterministically() {
        let set = tone_set(6, 20, 1);
        let cfg = DscTrainConfig { epochs: 4, batch_size: 4, seed: 3, ..Default::default() };
        let mut a = train_domain_classifier("d0", &set.maps, &set.classes, &cfg).unwrap();
        assert_eq!(a.history.len(), 4);
        assert!(a.best_epoch < 4);
        assert!(a.n_train > 0);
        // Loss moves and the kept epoch's holdout accuracy is recorded.
        assert!(a.history[0].train_loss.is_finite());
        let b = train_domain_classifier("d0", &set.maps, &set.classes, &cfg).unwrap();
        assert_eq!(
            a.classifier.stack.export_blocks(),
            b.classifier.stack.export_blocks()
        );
        for p in a.classifier.probabilities(&set.maps.iter().collect::<Vec<_>>()).unwrap() {
            assert!(p > 0.0 && p < 1.0);
        }
    }

    #[test]
    fn single_class_domain_is_a_balance_error() {
        let mut set = tone_set(7, 8, 1);
        set.classes = vec![true; 8];
        let cfg = DscTrainConfig { epochs: 1, ..Default::default() };
        assert!(matches!(
            train_domain_classifier("d0", &set.maps, &set.classes, &cfg),
            Err(Error::Balance(_))
        ));
    }

    #[test]
    fn ensemble_trains_one_classifier_per_domain() {
        let set = tone_set(8, 24, 2);
        let cfg = DscTrainConfig { epochs: 2, batch_size: 4, seed: 5, ..Default::default() };
        let trained = train_ensemble(&set, &labels(2), &cfg).unwrap();
        assert_eq!(trained.ensemble.classifiers.len(), 2);
        assert_eq!(trained.reports.len(), 2);
        let mut ens = trained.ensemble;
        let maps: Vec<&FeatureMap> = set.maps.iter().take(3).collect();
        let matrix = ens.probability_matrix(&maps).unwrap();
        assert_eq!(matrix.len(), 3);
        assert!(matrix.iter().all(|row| row.len() == 2));
    }

    #[test]
    fn baseline_trains_deterministically_and_tracks_the_best_epoch() {
        let train = tone_set(9, 18, 3);
        let val = tone_set(10, 9, 3);
        let cfg = BaselineTrainConfig {
            epochs: 2,
            per_domain: 3,
            seed: 7,
            ..Default::default()
        };
        let a = train_baseline(&train, &val, &labels(3), &cfg).unwrap();
        assert_eq!(a.history.len(), 2);
        assert!(a.best_epoch < 2);
        let best = a
            .history
            .iter()
            .map(|e| e.val_domain_accuracy)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(a.best_val_domain_accuracy, best);
        let b = train_baseline(&train, &val, &labels(3), &cfg).unwrap();
        for (sa, sb) in a.net.all_stacks().iter().zip(b.net.all_stacks()) {
            assert_eq!(sa.export_blocks(), sb.export_blocks());
        }
    }
}
