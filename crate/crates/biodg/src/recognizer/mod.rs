//! Domain recognizers: the first stage of the two-stage pipeline.
//!
//! Both variants consume standardized 26x99 feature maps and output a
//! relationship vector over the basis domains. The triplet variant
//! learns a metric embedding and counts near neighbors per domain; the
//! Bayesian variant outputs a domain posterior directly. Each also
//! carries a binary class head that serves as the fallback when no
//! basis domain is selected.

pub mod bayes;
pub mod triplet;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::features::{FeatureMap, FRAME_COLS, N_COEFFS};

pub use bayes::{
    mc_predict, mc_predict_set, relationship_from_probs, train_bayes, BayesEpochLog, BayesNet,
    BayesTrainConfig, McPrediction, TrainedBayes,
};
pub use triplet::{
    categorize, euclid, mine_semi_hard, relationship_factor, train_triplet, triplet_loss,
    EmbeddingIndex, MiningOutcome, TrainedTriplet, Triplet, TripletCategory, TripletEpochLog,
    TripletNet, TripletTrainConfig, EMBED_DIM,
};

/// A set of labeled instances ready for training: standardized feature
/// maps with aligned domain indices and binary class labels
/// (`true` = abnormal).
#[derive(Debug, Clone, Default)]
pub struct LabeledSet {
    pub maps: Vec<FeatureMap>,
    pub domains: Vec<usize>,
    pub classes: Vec<bool>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn validate(&self, n_domains: usize) -> Result<()> {
        if self.maps.len() != self.domains.len() || self.maps.len() != self.classes.len() {
            return Err(Error::shape(
                format!("{} aligned labels", self.maps.len()),
                format!("{} domains / {} classes", self.domains.len(), self.classes.len()),
            ));
        }
        if self.is_empty() {
            return Err(Error::EmptyInput("labeled set has no instances".into()));
        }
        if let Some(&bad) = self.domains.iter().find(|&&d| d >= n_domains) {
            return Err(Error::Domain(format!(
                "domain index {bad} out of range for {n_domains} basis domains"
            )));
        }
        Ok(())
    }
}

/// Packs feature maps into a [B, 1, 26, 99] network input.
pub fn batch_tensor(maps: &[&FeatureMap]) -> Tensor<f32> {
    let mut data = Vec::with_capacity(maps.len() * N_COEFFS * FRAME_COLS);
    for m in maps {
        data.extend_from_slice(m.values());
    }
    Tensor::from_vec(&[maps.len(), 1, N_COEFFS, FRAME_COLS], data)
}

/// Domain-stratified batch plan for one epoch: each batch takes
/// `per_domain` instances from every domain, cycling through seeded
/// per-domain shuffles so every instance appears at least once per
/// epoch (smaller domains repeat).
pub(crate) fn stratified_batches(
    domains: &[usize],
    n_domains: usize,
    per_domain: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<usize>> {
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); n_domains];
    for (i, &d) in domains.iter().enumerate() {
        pools[d].push(i);
    }
    for pool in pools.iter_mut() {
        pool.shuffle(rng);
    }
    let largest = pools.iter().map(Vec::len).max().unwrap_or(0);
    if largest == 0 {
        return Vec::new();
    }
    let steps = largest.div_ceil(per_domain);
    let mut batches = Vec::with_capacity(steps);
    for s in 0..steps {
        let mut batch = Vec::new();
        for pool in &pools {
            if pool.is_empty() {
                continue;
            }
            for j in 0..per_domain {
                batch.push(pool[(s * per_domain + j) % pool.len()]);
            }
        }
        batches.push(batch);
    }
    batches
}
