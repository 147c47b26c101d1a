//! Experiment orchestration: k-fold cross-validation over a prepared
//! corpus, per-fold training of the recognizers, the per-domain
//! classifier ensemble, and the joint baseline, evaluation on held-out
//! folds and every unseen-role domain, and report emission.
//!
//! Layout of an experiment output directory:
//!
//! ```text
//! out/
//!   report.json              full metrics, audit trail included
//!   report.csv               accuracy table, one row per evaluation target
//!   report.md                the same table rendered for humans
//!   matrix.csv               domain-accuracy matrix (overall and per class)
//!   folds/fold_NN.log.jsonl  per-fold training curves and raw counts
//!   embeddings.bin           float32 72-dim embeddings, fold-0 model
//!   embeddings.labels.jsonl  one label row per embedding
//!   timings.json             wall-clock timings
//! ```
//!
//! Every file except `timings.json` is a pure function of the config and
//! the corpus: rerunning with identical inputs reproduces them byte for
//! byte. Wall-clock numbers are quarantined in their own file for exactly
//! that reason.
//!
//! Leakage discipline: fold splits are record-atomic, feature
//! standardization is fit on the training folds only, and the embedding
//! index stores training embeddings only. The per-fold log files carry
//! the held-out record ids and all raw counts, so every derived column
//! in the report can be recomputed from them.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::store::fold_assignments;
use crate::corpus::{load_corpus, ClassLabel, Corpus, DomainRole};
use crate::ensemble::{
    fuse, train_baseline, train_ensemble, BaselineEpochLog, BaselineTrainConfig, DomainEnsemble,
    DscTrainConfig, TrainedDscReport,
};
use crate::error::{Error, Result};
use crate::features::{load_instance_features, FeatureMap, FeatureStats};
use crate::recognizer::{
    mc_predict_set, relationship_factor, relationship_from_probs, train_bayes, train_triplet,
    BayesEpochLog, BayesTrainConfig, LabeledSet, TripletEpochLog, TripletNet, TripletTrainConfig,
    EMBED_DIM,
};
use crate::rng::{self, tag};

// Component indices under tag::EXPERIMENT, one seed lane per model so
// fold jobs stay disjoint however many run in parallel.
const COMP_TRIPLET: u64 = 0;
const COMP_BAYES: u64 = 1;
const COMP_ENSEMBLE: u64 = 2;
const COMP_BASELINE: u64 = 3;
const COMP_MC_EVAL: u64 = 4;

/// Which recognizer(s) an experiment trains and evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecognizerKind {
    Triplet,
    Bayes,
    Both,
}

impl RecognizerKind {
    pub fn wants_triplet(self) -> bool {
        matches!(self, RecognizerKind::Triplet | RecognizerKind::Both)
    }

    pub fn wants_bayes(self) -> bool {
        matches!(self, RecognizerKind::Bayes | RecognizerKind::Both)
    }
}

/// Output formats for the aggregated report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Json,
    Csv,
    Markdown,
}

impl ReportFormat {
    pub fn all() -> Vec<ReportFormat> {
        vec![ReportFormat::Json, ReportFormat::Csv, ReportFormat::Markdown]
    }
}

fn default_recognizer() -> RecognizerKind {
    RecognizerKind::Both
}
fn default_theta() -> f64 {
    1.0
}
fn default_alpha() -> f64 {
    1.0
}
fn default_baseline_theta() -> f64 {
    0.9
}
fn default_baseline_alpha() -> f64 {
    0.1
}
fn default_epochs() -> usize {
    300
}
fn default_dsc_epochs() -> usize {
    60
}
fn default_folds() -> usize {
    10
}
fn default_lambda_grid() -> Vec<f64> {
    vec![0.2, 0.5, 1.0]
}
fn default_phi_grid() -> Vec<f64> {
    vec![0.2, 0.5, 0.7]
}
fn default_mc_samples() -> usize {
    100
}
fn default_per_domain() -> usize {
    8
}
fn default_dsc_batch() -> usize {
    16
}
fn default_lr() -> f64 {
    1e-3
}
fn default_formats() -> Vec<ReportFormat> {
    ReportFormat::all()
}

/// Everything a cross-validation run depends on. The whole pipeline is
/// a deterministic function of this struct plus the corpus on disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub corpus_dir: PathBuf,
    pub out_dir: PathBuf,
    #[serde(default = "default_recognizer")]
    pub recognizer: RecognizerKind,
    /// Recognizer loss weight on the domain term.
    #[serde(default = "default_theta")]
    pub theta: f64,
    /// Recognizer loss weight on the class term.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Baseline loss weight on the domain term.
    #[serde(default = "default_baseline_theta")]
    pub baseline_theta: f64,
    /// Baseline loss weight on the class term.
    #[serde(default = "default_baseline_alpha")]
    pub baseline_alpha: f64,
    /// Epochs for the recognizers and the baseline.
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Epochs for each per-domain classifier.
    #[serde(default = "default_dsc_epochs")]
    pub dsc_epochs: usize,
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default)]
    pub seed: u64,
    /// Distance thresholds for embedding-based fusion.
    #[serde(default = "default_lambda_grid")]
    pub lambda_grid: Vec<f64>,
    /// Posterior thresholds for Bayesian fusion.
    #[serde(default = "default_phi_grid")]
    pub phi_grid: Vec<f64>,
    /// Monte Carlo samples per prediction at evaluation time.
    #[serde(default = "default_mc_samples")]
    pub mc_samples: usize,
    /// Instances drawn per basis domain per training batch.
    #[serde(default = "default_per_domain")]
    pub per_domain: usize,
    /// Batch size for per-domain classifier training.
    #[serde(default = "default_dsc_batch")]
    pub dsc_batch: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    /// Fold jobs to run concurrently; 0 means all available cores.
    #[serde(default)]
    pub threads: usize,
    /// Report formats to write.
    #[serde(default = "default_formats")]
    pub formats: Vec<ReportFormat>,
}

impl ExperimentConfig {
    /// A config with every tunable at its default, pointing at the given
    /// corpus and output directories.
    pub fn new(corpus_dir: impl Into<PathBuf>, out_dir: impl Into<PathBuf>) -> Self {
        ExperimentConfig {
            corpus_dir: corpus_dir.into(),
            out_dir: out_dir.into(),
            recognizer: default_recognizer(),
            theta: default_theta(),
            alpha: default_alpha(),
            baseline_theta: default_baseline_theta(),
            baseline_alpha: default_baseline_alpha(),
            epochs: default_epochs(),
            dsc_epochs: default_dsc_epochs(),
            folds: default_folds(),
            seed: 0,
            lambda_grid: default_lambda_grid(),
            phi_grid: default_phi_grid(),
            mc_samples: default_mc_samples(),
            per_domain: default_per_domain(),
            dsc_batch: default_dsc_batch(),
            lr: default_lr(),
            threads: 0,
            formats: default_formats(),
        }
    }

    /// Parses a JSON config file and validates it.
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_reader(fs::File::open(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::Config(format!(
                "cross-validation needs at least 2 folds, got {}",
                self.folds
            )));
        }
        if self.epochs == 0 || self.dsc_epochs == 0 {
            return Err(Error::Config("epoch counts must be positive".into()));
        }
        if self.mc_samples == 0 {
            return Err(Error::Config("mc_samples must be positive".into()));
        }
        if self.per_domain < 2 {
            return Err(Error::Config(format!(
                "per_domain must be at least 2 so batches hold same-domain pairs, got {}",
                self.per_domain
            )));
        }
        if self.dsc_batch == 0 {
            return Err(Error::Config("dsc_batch must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        for (name, v) in [
            ("theta", self.theta),
            ("alpha", self.alpha),
            ("baseline_theta", self.baseline_theta),
            ("baseline_alpha", self.baseline_alpha),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        for (name, grid, used) in [
            ("lambda_grid", &self.lambda_grid, self.recognizer.wants_triplet()),
            ("phi_grid", &self.phi_grid, self.recognizer.wants_bayes()),
        ] {
            if used && grid.is_empty() {
                return Err(Error::Config(format!("{name} must not be empty")));
            }
            if let Some(&bad) = grid.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::Config(format!("{name} value {bad} outside [0, 1]")));
            }
        }
        if self.formats.is_empty() {
            return Err(Error::Config("at least one report format is required".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// counts and statistics

/// Raw prediction counts for one evaluation target, split by true class.
/// The overall tally is always the sum of the per-class tallies, so the
/// weighted per-class recombination identity holds by construction.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub correct: usize,
    pub total: usize,
    pub correct_normal: usize,
    pub total_normal: usize,
    pub correct_abnormal: usize,
    pub total_abnormal: usize,
}

impl Counts {
    /// Records one prediction (`true` = abnormal for both arguments).
    pub fn push(&mut self, predicted_abnormal: bool, truth_abnormal: bool) {
        let ok = predicted_abnormal == truth_abnormal;
        self.total += 1;
        self.correct += ok as usize;
        if truth_abnormal {
            self.total_abnormal += 1;
            self.correct_abnormal += ok as usize;
        } else {
            self.total_normal += 1;
            self.correct_normal += ok as usize;
        }
    }

    pub fn merge(&mut self, other: &Counts) {
        self.correct += other.correct;
        self.total += other.total;
        self.correct_normal += other.correct_normal;
        self.total_normal += other.total_normal;
        self.correct_abnormal += other.correct_abnormal;
        self.total_abnormal += other.total_abnormal;
    }

    fn pct(correct: usize, total: usize) -> f64 {
        if total == 0 {
            0.0
        } else {
            100.0 * correct as f64 / total as f64
        }
    }

    /// Accuracy in percent; empty tallies read as zero.
    pub fn pct_overall(&self) -> f64 {
        Self::pct(self.correct, self.total)
    }

    pub fn pct_normal(&self) -> f64 {
        Self::pct(self.correct_normal, self.total_normal)
    }

    pub fn pct_abnormal(&self) -> f64 {
        Self::pct(self.correct_abnormal, self.total_abnormal)
    }
}

/// Mean and sample standard deviation over fold-level values.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

/// Aggregates fold-level values; fewer than two values give std 0.
pub fn stat(values: &[f64]) -> Stat {
    if values.is_empty() {
        return Stat::default();
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Stat { mean, std }
}

/// Fold-aggregated accuracy of one method on one target, in percent.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MethodStat {
    pub overall: Stat,
    pub normal: Stat,
    pub abnormal: Stat,
}

fn method_stat(folds: &[Counts]) -> MethodStat {
    MethodStat {
        overall: stat(&folds.iter().map(Counts::pct_overall).collect::<Vec<_>>()),
        normal: stat(&folds.iter().map(Counts::pct_normal).collect::<Vec<_>>()),
        abnormal: stat(&folds.iter().map(Counts::pct_abnormal).collect::<Vec<_>>()),
    }
}

// ---------------------------------------------------------------------------
// domain-accuracy matrix

/// One evaluation target: every window of one domain with its labels.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub domain: String,
    pub maps: Vec<FeatureMap>,
    /// `true` = abnormal.
    pub classes: Vec<bool>,
}

/// Accuracy of every per-domain classifier on every domain. Rows are
/// classifiers (basis domains), columns are evaluation domains; cells
/// hold raw counts so fold contributions add exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainAccuracyMatrix {
    pub classifier_domains: Vec<String>,
    pub eval_domains: Vec<String>,
    pub cells: Vec<Vec<Counts>>,
}

impl DomainAccuracyMatrix {
    fn blank(classifier_domains: Vec<String>, eval_domains: Vec<String>) -> Self {
        let cells = vec![vec![Counts::default(); eval_domains.len()]; classifier_domains.len()];
        DomainAccuracyMatrix { classifier_domains, eval_domains, cells }
    }

    fn merge(&mut self, other: &DomainAccuracyMatrix) {
        for (ours, theirs) in self.cells.iter_mut().zip(&other.cells) {
            for (a, b) in ours.iter_mut().zip(theirs) {
                a.merge(b);
            }
        }
    }

    /// Column index of an evaluation domain.
    pub fn eval_column(&self, domain: &str) -> Option<usize> {
        self.eval_domains.iter().position(|d| d == domain)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,classifier");
        for d in &self.eval_domains {
            out.push(',');
            out.push_str(d);
        }
        out.push('\n');
        let variants: [(&str, fn(&Counts) -> f64); 3] = [
            ("overall", Counts::pct_overall),
            ("normal", Counts::pct_normal),
            ("abnormal", Counts::pct_abnormal),
        ];
        for (name, pct) in variants {
            for (i, clf) in self.classifier_domains.iter().enumerate() {
                out.push_str(name);
                out.push(',');
                out.push_str(clf);
                for cell in &self.cells[i] {
                    out.push(',');
                    out.push_str(&fmt2(pct(cell)));
                }
                out.push('\n');
            }
        }
        out
    }
}

/// Evaluates every classifier of a trained ensemble on every given set.
/// Entry (i, j) tallies classifier i's 0.5-thresholded predictions on
/// set j.
pub fn domain_accuracy_matrix(
    ensemble: &mut DomainEnsemble,
    sets: &[EvalSet],
) -> Result<DomainAccuracyMatrix> {
    let mut matrix = DomainAccuracyMatrix::blank(
        ensemble.domain_labels.clone(),
        sets.iter().map(|s| s.domain.clone()).collect(),
    );
    for (j, set) in sets.iter().enumerate() {
        if set.maps.len() != set.classes.len() {
            return Err(Error::shape(
                format!("{} labels for {}", set.maps.len(), set.domain),
                format!("{}", set.classes.len()),
            ));
        }
        let refs: Vec<&FeatureMap> = set.maps.iter().collect();
        let probs = ensemble.probability_matrix(&refs)?;
        for (w, &truth) in set.classes.iter().enumerate() {
            for i in 0..matrix.classifier_domains.len() {
                matrix.cells[i][j].push(probs[w][i] >= 0.5, truth);
            }
        }
    }
    Ok(matrix)
}

// ---------------------------------------------------------------------------
// data assembly

struct DomainData {
    id: String,
    maps: Vec<FeatureMap>,
    classes: Vec<bool>,
    records: Vec<String>,
}

/// All feature maps of the corpus plus the fold plan, loaded once and
/// shared read-only across fold jobs.
pub struct ExperimentData {
    basis: Vec<DomainData>,
    unseen: Vec<DomainData>,
    folds: BTreeMap<String, Vec<Vec<String>>>,
}

impl ExperimentData {
    pub fn basis_labels(&self) -> Vec<String> {
        self.basis.iter().map(|d| d.id.clone()).collect()
    }

    pub fn unseen_labels(&self) -> Vec<String> {
        self.unseen.iter().map(|d| d.id.clone()).collect()
    }

    pub fn fold_plan(&self) -> &BTreeMap<String, Vec<Vec<String>>> {
        &self.folds
    }
}

fn load_domain_data(corpus: &Corpus, id: &str) -> Result<DomainData> {
    let dom = corpus.domain(id)?;
    let mut maps = Vec::with_capacity(dom.instances.len());
    let mut classes = Vec::with_capacity(dom.instances.len());
    let mut records = Vec::with_capacity(dom.instances.len());
    for row in &dom.instances {
        maps.push(load_instance_features(corpus, row)?);
        classes.push(row.class == ClassLabel::Abnormal);
        records.push(row.record_id.clone());
    }
    if maps.is_empty() {
        return Err(Error::EmptyInput(format!("domain {id} has no instances")));
    }
    Ok(DomainData { id: id.to_string(), maps, classes, records })
}

/// Loads every cached feature map and computes the record-atomic,
/// class-stratified fold plan for the basis domains.
pub fn load_experiment_data(corpus: &Corpus, k: usize, seed: u64) -> Result<ExperimentData> {
    let basis_ids = corpus.basis_ids();
    if basis_ids.len() < 2 {
        return Err(Error::Config(format!(
            "experiments need at least two basis domains, corpus has {}",
            basis_ids.len()
        )));
    }
    let mut basis = Vec::with_capacity(basis_ids.len());
    for id in &basis_ids {
        basis.push(load_domain_data(corpus, id)?);
    }
    let mut unseen = Vec::new();
    for id in corpus.unseen_ids() {
        unseen.push(load_domain_data(corpus, &id)?);
    }
    let folds = fold_assignments(corpus, k, seed)?;
    Ok(ExperimentData { basis, unseen, folds })
}

/// The materials of one fold: standardized train/validation sets over
/// the basis domains, standardized unseen sets, and the audit trail of
/// which records were held out.
pub struct SplitSets {
    pub train: LabeledSet,
    pub val: LabeledSet,
    pub stats: FeatureStats,
    pub unseen: Vec<EvalSet>,
    pub val_records: BTreeMap<String, Vec<String>>,
}

/// Splits one fold out of the shared data. Standardization stats come
/// from the training windows only and are applied to everything else.
fn assemble_fold(data: &ExperimentData, fold: usize) -> Result<SplitSets> {
    let mut train_refs: Vec<&FeatureMap> = Vec::new();
    let mut train_domains = Vec::new();
    let mut train_classes = Vec::new();
    let mut val_refs: Vec<&FeatureMap> = Vec::new();
    let mut val_domains = Vec::new();
    let mut val_classes = Vec::new();
    let mut val_records = BTreeMap::new();

    for (d, dom) in data.basis.iter().enumerate() {
        let plan = data.folds.get(&dom.id).ok_or_else(|| {
            Error::Fold(format!("no fold assignments for basis domain {}", dom.id))
        })?;
        let held: &Vec<String> = plan.get(fold).ok_or_else(|| {
            Error::Fold(format!("fold {fold} out of range for domain {}", dom.id))
        })?;
        let held_set: BTreeSet<&str> = held.iter().map(String::as_str).collect();
        val_records.insert(dom.id.clone(), held.clone());
        for (w, map) in dom.maps.iter().enumerate() {
            if held_set.contains(dom.records[w].as_str()) {
                val_refs.push(map);
                val_domains.push(d);
                val_classes.push(dom.classes[w]);
            } else {
                train_refs.push(map);
                train_domains.push(d);
                train_classes.push(dom.classes[w]);
            }
        }
    }
    if train_refs.is_empty() || val_refs.is_empty() {
        return Err(Error::Fold(format!("fold {fold} leaves an empty train or validation side")));
    }

    let stats = FeatureStats::fit_refs(&train_refs)?;
    let apply_all = |refs: &[&FeatureMap]| -> Result<Vec<FeatureMap>> {
        refs.iter().map(|m| stats.apply(m)).collect()
    };
    let train = LabeledSet {
        maps: apply_all(&train_refs)?,
        domains: train_domains,
        classes: train_classes,
    };
    let val =
        LabeledSet { maps: apply_all(&val_refs)?, domains: val_domains, classes: val_classes };

    let mut unseen = Vec::with_capacity(data.unseen.len());
    for dom in &data.unseen {
        let refs: Vec<&FeatureMap> = dom.maps.iter().collect();
        unseen.push(EvalSet {
            domain: dom.id.clone(),
            maps: apply_all(&refs)?,
            classes: dom.classes.clone(),
        });
    }
    Ok(SplitSets { train, val, stats, unseen, val_records })
}

/// Loads the corpus data and assembles one fold; convenience entry for
/// one-shot training commands.
pub fn assemble_split(corpus: &Corpus, k: usize, seed: u64, fold: usize) -> Result<SplitSets> {
    let data = load_experiment_data(corpus, k, seed)?;
    assemble_fold(&data, fold)
}

// ---------------------------------------------------------------------------
// per-fold execution

/// Seeds of one fold's components, derived disjointly from the master
/// seed so folds can train in parallel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentSeeds {
    pub triplet: u64,
    pub bayes: u64,
    pub ensemble: u64,
    pub baseline: u64,
    pub mc_eval: u64,
}

impl ComponentSeeds {
    pub fn for_fold(master: u64, fold: usize) -> Self {
        let lane = |c: u64| rng::derive(master, &[tag::EXPERIMENT, fold as u64, c]);
        ComponentSeeds {
            triplet: lane(COMP_TRIPLET),
            bayes: lane(COMP_BAYES),
            ensemble: lane(COMP_ENSEMBLE),
            baseline: lane(COMP_BASELINE),
            mc_eval: lane(COMP_MC_EVAL),
        }
    }
}

/// One line of a fold log file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum FoldEvent {
    Meta {
        fold: usize,
        seeds: ComponentSeeds,
        val_records: BTreeMap<String, Vec<String>>,
        n_train_windows: usize,
        n_val_windows: usize,
    },
    TripletEpoch {
        fold: usize,
        #[serde(flatten)]
        log: TripletEpochLog,
    },
    BayesEpoch {
        fold: usize,
        #[serde(flatten)]
        log: BayesEpochLog,
    },
    Dsc {
        fold: usize,
        #[serde(flatten)]
        report: TrainedDscReport,
    },
    BaselineEpoch {
        fold: usize,
        #[serde(flatten)]
        log: BaselineEpochLog,
    },
    /// Raw counts of one method on one target; `threshold` carries the
    /// grid value for fusion methods and is absent otherwise.
    Result {
        fold: usize,
        db: String,
        method: String,
        #[serde(skip_serializing_if = "Option::is_none")]
        threshold: Option<f64>,
        #[serde(flatten)]
        counts: Counts,
    },
}

/// Row label: pooled held-out basis windows, or one unseen domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowRole {
    Basis,
    Unseen,
}

#[derive(Debug, Clone)]
struct FoldRow {
    db: String,
    role: RowRole,
    bl: Counts,
    bcnn: Option<Counts>,
    one_sh_cl: Option<Counts>,
    fusion_triplet: Vec<Counts>,
    fusion_bayes: Vec<Counts>,
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct FoldTiming {
    pub fold: usize,
    pub triplet_s: f64,
    pub bayes_s: f64,
    pub ensemble_s: f64,
    pub baseline_s: f64,
    pub eval_s: f64,
    pub total_s: f64,
}

/// Wall-clock timings. Written to `timings.json` only, never into the
/// report files, so reports stay byte-stable across reruns.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RuntimeStats {
    pub total_s: f64,
    pub embeddings_s: f64,
    pub folds: Vec<FoldTiming>,
}

struct FoldOutput {
    summary: FoldSummary,
    events: Vec<FoldEvent>,
    rows: Vec<FoldRow>,
    matrix: DomainAccuracyMatrix,
    bayes_val_domain_acc: Option<f64>,
    baseline_val_domain_acc: f64,
    dsc_reports: Vec<TrainedDscReport>,
    timing: FoldTiming,
    /// Fold 0 keeps its embedding model for the export.
    triplet_artifacts: Option<(TripletNet, FeatureStats)>,
}

/// Audit row for one fold: what was held out and which seeds each
/// component trained under.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldSummary {
    pub fold: usize,
    pub seeds: ComponentSeeds,
    pub val_records: BTreeMap<String, Vec<String>>,
    pub n_train_windows: usize,
    pub n_val_windows: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bayes_best_epoch: Option<usize>,
    pub baseline_best_epoch: usize,
}

struct TargetData<'a> {
    db: String,
    role: RowRole,
    maps: Vec<&'a FeatureMap>,
    truths: &'a [bool],
    /// Basis domain per window for matrix attribution; None for unseen
    /// targets (their column is the whole target).
    basis_domains: Option<&'a [usize]>,
}

fn run_fold(cfg: &ExperimentConfig, data: &ExperimentData, fold: usize) -> Result<FoldOutput> {
    let fold_start = Instant::now();
    let labels = data.basis_labels();
    let sets = assemble_fold(data, fold)?;
    let seeds = ComponentSeeds::for_fold(cfg.seed, fold);
    let mut timing = FoldTiming { fold, ..FoldTiming::default() };

    let mut events = vec![FoldEvent::Meta {
        fold,
        seeds,
        val_records: sets.val_records.clone(),
        n_train_windows: sets.train.len(),
        n_val_windows: sets.val.len(),
    }];

    let mut triplet = None;
    if cfg.recognizer.wants_triplet() {
        let t = Instant::now();
        let trained = train_triplet(
            &sets.train,
            &sets.val,
            &labels,
            &TripletTrainConfig {
                theta: cfg.theta,
                alpha: cfg.alpha,
                epochs: cfg.epochs,
                per_domain: cfg.per_domain,
                lr: cfg.lr,
                seed: seeds.triplet,
                ..TripletTrainConfig::default()
            },
        )?;
        timing.triplet_s = t.elapsed().as_secs_f64();
        events.extend(
            trained.history.iter().map(|log| FoldEvent::TripletEpoch { fold, log: log.clone() }),
        );
        triplet = Some(trained);
    }

    let mut bayes = None;
    if cfg.recognizer.wants_bayes() {
        let t = Instant::now();
        let trained = train_bayes(
            &sets.train,
            &sets.val,
            &labels,
            &BayesTrainConfig {
                theta: cfg.theta,
                alpha: cfg.alpha,
                epochs: cfg.epochs,
                per_domain: cfg.per_domain,
                lr: cfg.lr,
                seed: seeds.bayes,
            },
        )?;
        timing.bayes_s = t.elapsed().as_secs_f64();
        events.extend(
            trained.history.iter().map(|log| FoldEvent::BayesEpoch { fold, log: log.clone() }),
        );
        bayes = Some(trained);
    }

    let t = Instant::now();
    let mut ensemble = train_ensemble(
        &sets.train,
        &labels,
        &DscTrainConfig {
            epochs: cfg.dsc_epochs,
            batch_size: cfg.dsc_batch,
            lr: cfg.lr,
            seed: seeds.ensemble,
        },
    )?;
    timing.ensemble_s = t.elapsed().as_secs_f64();
    events.extend(
        ensemble.reports.iter().map(|report| FoldEvent::Dsc { fold, report: report.clone() }),
    );

    let t = Instant::now();
    let mut baseline = train_baseline(
        &sets.train,
        &sets.val,
        &labels,
        &BaselineTrainConfig {
            theta: cfg.baseline_theta,
            alpha: cfg.baseline_alpha,
            epochs: cfg.epochs,
            per_domain: cfg.per_domain,
            lr: cfg.lr,
            seed: seeds.baseline,
        },
    )?;
    timing.baseline_s = t.elapsed().as_secs_f64();
    events.extend(
        baseline.history.iter().map(|log| FoldEvent::BaselineEpoch { fold, log: log.clone() }),
    );

    // Evaluation: the pooled held-out basis windows, then each unseen
    // domain. The recognizers never see the true domain of a window.
    let t = Instant::now();
    let mut targets = vec![TargetData {
        db: "basis".to_string(),
        role: RowRole::Basis,
        maps: sets.val.maps.iter().collect(),
        truths: &sets.val.classes,
        basis_domains: Some(&sets.val.domains),
    }];
    for set in &sets.unseen {
        targets.push(TargetData {
            db: set.domain.clone(),
            role: RowRole::Unseen,
            maps: set.maps.iter().collect(),
            truths: &set.classes,
            basis_domains: None,
        });
    }

    let mut matrix = DomainAccuracyMatrix::blank(
        labels.clone(),
        labels.iter().cloned().chain(sets.unseen.iter().map(|s| s.domain.clone())).collect(),
    );
    let mut rows = Vec::with_capacity(targets.len());
    for target in &targets {
        let n = target.maps.len();
        let dsc_probs = ensemble.ensemble.probability_matrix(&target.maps)?;
        for (w, &truth) in target.truths.iter().enumerate() {
            let col = match target.basis_domains {
                Some(doms) => doms[w],
                None => matrix
                    .eval_column(&target.db)
                    .expect("unseen target present in matrix columns"),
            };
            for i in 0..labels.len() {
                matrix.cells[i][col].push(dsc_probs[w][i] >= 0.5, truth);
            }
        }

        let (bl_probs, _) = baseline.net.predict(&target.maps)?;
        let mut bl = Counts::default();
        for (w, &truth) in target.truths.iter().enumerate() {
            bl.push(bl_probs[w] >= 0.5, truth);
        }

        let mut one_sh_cl = None;
        let mut fusion_triplet = Vec::new();
        if let Some(trained) = triplet.as_mut() {
            let embeddings = trained.net.embed_maps(&target.maps)?;
            let fallback = trained.net.class_probs(&target.maps)?;
            let mut head = Counts::default();
            for (w, &truth) in target.truths.iter().enumerate() {
                head.push(fallback[w] >= 0.5, truth);
            }
            one_sh_cl = Some(head);
            for &lambda in &cfg.lambda_grid {
                let mut counts = Counts::default();
                for (w, &truth) in target.truths.iter().enumerate() {
                    let rel = relationship_factor(&embeddings[w], &trained.index, lambda)?;
                    let fused = fuse(&rel, 0.0, &labels, &dsc_probs[w], fallback[w])?;
                    counts.push(fused.final_class == ClassLabel::Abnormal, truth);
                }
                fusion_triplet.push(counts);
            }
        }

        let mut bcnn = None;
        let mut fusion_bayes = Vec::new();
        if let Some(trained) = bayes.as_mut() {
            let mc = mc_predict_set(&mut trained.net, &target.maps, cfg.mc_samples, seeds.mc_eval)?;
            let mut head = Counts::default();
            for (w, &truth) in target.truths.iter().enumerate() {
                head.push(mc[w].class_prob >= 0.5, truth);
            }
            bcnn = Some(head);
            for &phi in &cfg.phi_grid {
                let mut counts = Counts::default();
                for (w, &truth) in target.truths.iter().enumerate() {
                    let rel = relationship_from_probs(&mc[w].domain_probs)?;
                    let fused = fuse(&rel, phi, &labels, &dsc_probs[w], mc[w].class_prob)?;
                    counts.push(fused.final_class == ClassLabel::Abnormal, truth);
                }
                fusion_bayes.push(counts);
            }
        }
        debug_assert_eq!(bl.total, n);
        rows.push(FoldRow {
            db: target.db.clone(),
            role: target.role,
            bl,
            bcnn,
            one_sh_cl,
            fusion_triplet,
            fusion_bayes,
        });
    }
    timing.eval_s = t.elapsed().as_secs_f64();

    for row in &rows {
        let mut push = |method: &str, threshold: Option<f64>, counts: Counts| {
            events.push(FoldEvent::Result {
                fold,
                db: row.db.clone(),
                method: method.to_string(),
                threshold,
                counts,
            });
        };
        push("bl", None, row.bl);
        if let Some(c) = row.bcnn {
            push("bcnn", None, c);
        }
        if let Some(c) = row.one_sh_cl {
            push("one_sh_cl", None, c);
        }
        for (g, &lambda) in cfg.lambda_grid.iter().enumerate() {
            push("one_sh_fusion", Some(lambda), row.fusion_triplet[g]);
        }
        for (g, &phi) in cfg.phi_grid.iter().enumerate() {
            push("bcnn_fusion", Some(phi), row.fusion_bayes[g]);
        }
    }

    timing.total_s = fold_start.elapsed().as_secs_f64();
    let summary = FoldSummary {
        fold,
        seeds,
        val_records: sets.val_records,
        n_train_windows: sets.train.len(),
        n_val_windows: sets.val.len(),
        bayes_best_epoch: bayes.as_ref().map(|b| b.best_epoch),
        baseline_best_epoch: baseline.best_epoch,
    };
    Ok(FoldOutput {
        summary,
        events,
        rows,
        matrix,
        bayes_val_domain_acc: bayes.as_ref().map(|b| 100.0 * b.best_val_domain_accuracy),
        baseline_val_domain_acc: 100.0 * baseline.best_val_domain_accuracy,
        dsc_reports: ensemble.reports,
        timing,
        triplet_artifacts: if fold == 0 {
            triplet.map(|t| (t.net, sets.stats))
        } else {
            None
        },
    })
}

// ---------------------------------------------------------------------------
// aggregation and report types

/// Accuracy of one fusion grid point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridStat {
    pub threshold: f64,
    #[serde(flatten)]
    pub acc: MethodStat,
}

/// One line of the final table: every method's fold-aggregated accuracy
/// on one evaluation target, plus the gain of the best fusion column
/// over the baseline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportRow {
    pub db: String,
    pub role: RowRole,
    pub bl: MethodStat,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bcnn: Option<MethodStat>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub one_sh_cl: Option<MethodStat>,
    pub one_sh_fusion: Vec<GridStat>,
    pub bcnn_fusion: Vec<GridStat>,
    /// Best embedding-fusion mean minus baseline mean, percentage points.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub one_sh_gain: Option<f64>,
    /// Best Bayesian-fusion mean minus baseline mean, percentage points.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bcnn_gain: Option<f64>,
}

/// Validation domain-classification accuracy of the models that predict
/// domains, in percent.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainRecognition {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bayes_validation: Option<Stat>,
    pub baseline_validation: Stat,
}

/// Published clinical-corpus reference figures, embedded for scale.
/// Those corpora are not distributed with this crate, so these numbers
/// are context, never an output of a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReferenceContext {
    pub db: String,
    pub bl: f64,
    pub best_one_sh_fusion: f64,
    pub one_sh_gain: f64,
    pub note: String,
}

impl Default for ReferenceContext {
    fn default() -> Self {
        ReferenceContext {
            db: "m3-h".into(),
            bl: 52.27,
            best_one_sh_fusion: 68.45,
            one_sh_gain: 16.18,
            note: "Published clinical-corpus figures, shown for scale only; \
                   this run neither uses those corpora nor reproduces these numbers."
                .into(),
        }
    }
}

/// The aggregated outcome of a cross-validated experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config: ExperimentConfig,
    pub basis_domains: Vec<String>,
    pub unseen_domains: Vec<String>,
    /// Unseen targets first, pooled basis row last.
    pub rows: Vec<ReportRow>,
    pub domain_recognition: DomainRecognition,
    /// Internal-holdout accuracy of each per-domain classifier.
    pub dsc_holdout: BTreeMap<String, Stat>,
    pub matrix: DomainAccuracyMatrix,
    pub fold_audit: Vec<FoldSummary>,
    pub context: ReferenceContext,
    /// Quarantined to `timings.json`; never serialized with the report.
    #[serde(skip)]
    pub runtime: RuntimeStats,
}

fn best_mean(grid: &[GridStat]) -> Option<f64> {
    grid.iter().map(|g| g.acc.overall.mean).fold(None, |acc, v| {
        Some(match acc {
            Some(a) if a >= v => a,
            _ => v,
        })
    })
}

fn aggregate_rows(cfg: &ExperimentConfig, outputs: &[FoldOutput]) -> Vec<ReportRow> {
    let n_targets = outputs[0].rows.len();
    let mut rows = Vec::with_capacity(n_targets);
    for r in 0..n_targets {
        let per_fold: Vec<&FoldRow> = outputs.iter().map(|o| &o.rows[r]).collect();
        let collect = |f: &dyn Fn(&FoldRow) -> Counts| -> Vec<Counts> {
            per_fold.iter().map(|row| f(row)).collect()
        };
        let bl = method_stat(&collect(&|row| row.bl));
        let bcnn = per_fold[0]
            .bcnn
            .map(|_| method_stat(&collect(&|row| row.bcnn.expect("bcnn on every fold"))));
        let one_sh_cl = per_fold[0].one_sh_cl.map(|_| {
            method_stat(&collect(&|row| row.one_sh_cl.expect("class head on every fold")))
        });
        let grid_stats = |grid: &[f64], pick: &dyn Fn(&FoldRow, usize) -> Counts| -> Vec<GridStat> {
            grid.iter()
                .enumerate()
                .map(|(g, &threshold)| GridStat {
                    threshold,
                    acc: method_stat(
                        &per_fold.iter().map(|row| pick(row, g)).collect::<Vec<_>>(),
                    ),
                })
                .collect()
        };
        let one_sh_fusion = if per_fold[0].fusion_triplet.is_empty() {
            Vec::new()
        } else {
            grid_stats(&cfg.lambda_grid, &|row, g| row.fusion_triplet[g])
        };
        let bcnn_fusion = if per_fold[0].fusion_bayes.is_empty() {
            Vec::new()
        } else {
            grid_stats(&cfg.phi_grid, &|row, g| row.fusion_bayes[g])
        };
        let one_sh_gain = best_mean(&one_sh_fusion).map(|best| best - bl.overall.mean);
        let bcnn_gain = best_mean(&bcnn_fusion).map(|best| best - bl.overall.mean);
        rows.push(ReportRow {
            db: per_fold[0].db.clone(),
            role: per_fold[0].role,
            bl,
            bcnn,
            one_sh_cl,
            one_sh_fusion,
            bcnn_fusion,
            one_sh_gain,
            bcnn_gain,
        });
    }
    // Unseen targets first, the pooled basis row last.
    rows.sort_by_key(|row| row.role == RowRole::Basis);
    rows
}

fn aggregate(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    outputs: &[FoldOutput],
) -> MetricsReport {
    let rows = aggregate_rows(cfg, outputs);

    let mut matrix = outputs[0].matrix.clone();
    for output in &outputs[1..] {
        matrix.merge(&output.matrix);
    }

    let bayes_validation = outputs[0].bayes_val_domain_acc.map(|_| {
        stat(&outputs
            .iter()
            .map(|o| o.bayes_val_domain_acc.expect("bayes accuracy on every fold"))
            .collect::<Vec<_>>())
    });
    let baseline_validation =
        stat(&outputs.iter().map(|o| o.baseline_val_domain_acc).collect::<Vec<_>>());

    let mut dsc_holdout = BTreeMap::new();
    for (d, label) in data.basis_labels().iter().enumerate() {
        let vals: Vec<f64> =
            outputs.iter().map(|o| 100.0 * o.dsc_reports[d].holdout_accuracy).collect();
        dsc_holdout.insert(label.clone(), stat(&vals));
    }

    MetricsReport {
        config: cfg.clone(),
        basis_domains: data.basis_labels(),
        unseen_domains: data.unseen_labels(),
        rows,
        domain_recognition: DomainRecognition { bayes_validation, baseline_validation },
        dsc_holdout,
        matrix,
        fold_audit: outputs.iter().map(|o| o.summary.clone()).collect(),
        context: ReferenceContext::default(),
        runtime: RuntimeStats {
            total_s: 0.0,
            embeddings_s: 0.0,
            folds: outputs.iter().map(|o| o.timing).collect(),
        },
    }
}

// ---------------------------------------------------------------------------
// cross-validation driver

fn thread_budget(cfg: &ExperimentConfig) -> usize {
    let hw = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let want = if cfg.threads == 0 { hw } else { cfg.threads };
    want.clamp(1, cfg.folds)
}

fn cross_validate(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
) -> Result<(MetricsReport, Vec<Vec<FoldEvent>>, Option<(TripletNet, FeatureStats)>)> {
    let folds: Vec<usize> = (0..cfg.folds).collect();
    let mut outputs: Vec<FoldOutput> = Vec::with_capacity(cfg.folds);
    for wave in folds.chunks(thread_budget(cfg)) {
        let wave_outputs = std::thread::scope(|scope| {
            let handles: Vec<_> = wave
                .iter()
                .map(|&fold| scope.spawn(move || run_fold(cfg, data, fold)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("fold job panicked"))
                .collect::<Result<Vec<_>>>()
        })?;
        outputs.extend(wave_outputs);
    }

    let report = aggregate(cfg, data, &outputs);
    let mut events = Vec::with_capacity(outputs.len());
    let mut artifacts = None;
    for output in outputs {
        if output.summary.fold == 0 {
            artifacts = output.triplet_artifacts;
        }
        events.push(output.events);
    }
    Ok((report, events, artifacts))
}

/// Trains and evaluates every fold and aggregates the metrics. Writes
/// nothing; `run_experiment` is the file-producing entry point.
pub fn run_cross_validation(cfg: &ExperimentConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    let corpus = load_corpus(&cfg.corpus_dir)?;
    let data = load_experiment_data(&corpus, cfg.folds, cfg.seed)?;
    Ok(cross_validate(cfg, &data)?.0)
}

// ---------------------------------------------------------------------------
// emission

fn fmt2(v: f64) -> String {
    format!("{v:.2}")
}

fn fmt_gain(v: f64) -> String {
    format!("{v:+.2}")
}

fn fmt_stat(s: &Stat) -> String {
    format!("{} ± {}", fmt2(s.mean), fmt2(s.std))
}

fn csv_columns(report: &MetricsReport) -> (Vec<String>, Vec<Vec<String>>) {
    let mut header = vec!["db".to_string(), "role".to_string()];
    let push_pair = |header: &mut Vec<String>, name: &str| {
        header.push(format!("{name}_mean"));
        header.push(format!("{name}_std"));
    };
    push_pair(&mut header, "bl");
    let has_bcnn = report.rows.iter().any(|r| r.bcnn.is_some());
    let has_triplet = report.rows.iter().any(|r| r.one_sh_cl.is_some());
    if has_bcnn {
        push_pair(&mut header, "bcnn");
    }
    if has_triplet {
        push_pair(&mut header, "one_sh_cl");
        for g in &report.rows[0].one_sh_fusion {
            push_pair(&mut header, &format!("one_sh_fusion_lt_{}", fmt2(g.threshold)));
        }
        header.push("one_sh_gain".to_string());
    }
    if has_bcnn {
        for g in &report.rows[0].bcnn_fusion {
            push_pair(&mut header, &format!("bcnn_fusion_ge_{}", fmt2(g.threshold)));
        }
        header.push("bcnn_gain".to_string());
    }

    let mut lines = Vec::with_capacity(report.rows.len());
    for row in &report.rows {
        let mut cells = vec![
            row.db.clone(),
            match row.role {
                RowRole::Basis => "basis".to_string(),
                RowRole::Unseen => "unseen".to_string(),
            },
        ];
        let push_stat = |cells: &mut Vec<String>, s: &Stat| {
            cells.push(fmt2(s.mean));
            cells.push(fmt2(s.std));
        };
        push_stat(&mut cells, &row.bl.overall);
        if has_bcnn {
            push_stat(&mut cells, &row.bcnn.as_ref().expect("bcnn column").overall);
        }
        if has_triplet {
            push_stat(&mut cells, &row.one_sh_cl.as_ref().expect("class head column").overall);
            for g in &row.one_sh_fusion {
                push_stat(&mut cells, &g.acc.overall);
            }
            cells.push(fmt_gain(row.one_sh_gain.expect("gain column")));
        }
        if has_bcnn {
            for g in &row.bcnn_fusion {
                push_stat(&mut cells, &g.acc.overall);
            }
            cells.push(fmt_gain(row.bcnn_gain.expect("gain column")));
        }
        lines.push(cells);
    }
    (header, lines)
}

fn report_csv(report: &MetricsReport) -> String {
    let (header, lines) = csv_columns(report);
    let mut out = header.join(",");
    out.push('\n');
    for cells in lines {
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    let ctx = &report.context;
    out.push_str(&format!(
        "# reference {} (not a result of this run): bl={} best_one_sh_fusion={} gain={}\n",
        ctx.db,
        fmt2(ctx.bl),
        fmt2(ctx.best_one_sh_fusion),
        fmt_gain(ctx.one_sh_gain)
    ));
    out
}

fn report_markdown(report: &MetricsReport) -> String {
    let has_bcnn = report.rows.iter().any(|r| r.bcnn.is_some());
    let has_triplet = report.rows.iter().any(|r| r.one_sh_cl.is_some());

    let mut header = vec!["DB".to_string(), "BL".to_string()];
    if has_bcnn {
        header.push("BCNN".to_string());
    }
    if has_triplet {
        header.push("1-Sh-Cl".to_string());
        for g in &report.rows[0].one_sh_fusion {
            header.push(format!("OneSh+Ense λ<{}", fmt2(g.threshold)));
        }
        header.push("Gain (OneSh)".to_string());
    }
    if has_bcnn {
        for g in &report.rows[0].bcnn_fusion {
            header.push(format!("BCNN+Ense φ≥{}", fmt2(g.threshold)));
        }
        header.push("Gain (BCNN)".to_string());
    }

    let mut out = String::from("# Cross-validated accuracy\n\n");
    out.push_str(&format!(
        "Corpus `{}`, {} folds, seed {}. Accuracies in percent, mean ± std across folds; \
         unseen domains are evaluated with every fold's models, the basis row pools each \
         fold's held-out windows.\n\n",
        report.config.corpus_dir.display(),
        report.config.folds,
        report.config.seed
    ));
    out.push_str(&format!("| {} |\n", header.join(" | ")));
    out.push_str(&format!("|{}\n", "---|".repeat(header.len())));
    for row in &report.rows {
        let mut cells = vec![row.db.clone(), fmt_stat(&row.bl.overall)];
        if has_bcnn {
            cells.push(fmt_stat(&row.bcnn.as_ref().expect("bcnn column").overall));
        }
        if has_triplet {
            cells.push(fmt_stat(&row.one_sh_cl.as_ref().expect("class head column").overall));
            for g in &row.one_sh_fusion {
                cells.push(fmt_stat(&g.acc.overall));
            }
            cells.push(fmt_gain(row.one_sh_gain.expect("gain column")));
        }
        if has_bcnn {
            for g in &row.bcnn_fusion {
                cells.push(fmt_stat(&g.acc.overall));
            }
            cells.push(fmt_gain(row.bcnn_gain.expect("gain column")));
        }
        out.push_str(&format!("| {} |\n", cells.join(" | ")));
    }

    out.push_str("\n## Domain recognition (validation)\n\n");
    if let Some(s) = &report.domain_recognition.bayes_validation {
        out.push_str(&format!("- Bayesian recognizer: {}\n", fmt_stat(s)));
    }
    out.push_str(&format!(
        "- Baseline domain head: {}\n",
        fmt_stat(&report.domain_recognition.baseline_validation)
    ));

    out.push_str("\n## Per-domain classifier holdout accuracy\n\n");
    for (domain, s) in &report.dsc_holdout {
        out.push_str(&format!("- {domain}: {}\n", fmt_stat(s)));
    }

    let ctx = &report.context;
    out.push_str(&format!(
        "\n> Reference ({}, not a result of this run): BL {}, best OneSh+Ense {}, gain {}. {}\n",
        ctx.db,
        fmt2(ctx.bl),
        fmt2(ctx.best_one_sh_fusion),
        fmt_gain(ctx.one_sh_gain),
        ctx.note
    ));
    out
}

/// Writes the report in one format; returns the file path.
pub fn emit_report(report: &MetricsReport, dir: &Path, format: ReportFormat) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let (name, body) = match format {
        ReportFormat::Json => ("report.json", serde_json::to_string_pretty(report)? + "\n"),
        ReportFormat::Csv => ("report.csv", report_csv(report)),
        ReportFormat::Markdown => ("report.md", report_markdown(report)),
    };
    let path = dir.join(name);
    fs::write(&path, body)?;
    Ok(path)
}

fn write_fold_logs(dir: &Path, events: &[Vec<FoldEvent>]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (fold, fold_events) in events.iter().enumerate() {
        let mut body = String::new();
        for event in fold_events {
            body.push_str(&serde_json::to_string(event)?);
            body.push('\n');
        }
        fs::write(dir.join(format!("fold_{fold:02}.log.jsonl")), body)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// embedding export

/// Label row for one exported embedding.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingLabel {
    pub row: usize,
    pub domain: String,
    pub role: DomainRole,
    pub class: ClassLabel,
    pub record_id: String,
    pub window_start_s: f64,
    /// Fold whose validation split holds this window's record; absent
    /// for unseen domains.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_fold: Option<usize>,
}

/// Embeds every window of the corpus with one trained model and writes
/// `embeddings.bin` (float32 little-endian, row-major, 72 per row) plus
/// `embeddings.labels.jsonl` (one label per row, same order). Rows run
/// over domains in id order, windows in instance order.
pub fn export_embeddings(
    net: &mut TripletNet,
    stats: &FeatureStats,
    corpus: &Corpus,
    fold_plan: Option<&BTreeMap<String, Vec<Vec<String>>>>,
    dir: &Path,
) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir)?;
    let mut bin: Vec<u8> = Vec::new();
    let mut labels = String::new();
    let mut row = 0usize;
    for (id, dom) in &corpus.domains {
        let record_fold: BTreeMap<&str, usize> = match fold_plan {
            Some(plan) => plan
                .get(id)
                .map(|folds| {
                    folds
                        .iter()
                        .enumerate()
                        .flat_map(|(f, records)| records.iter().map(move |r| (r.as_str(), f)))
                        .collect()
                })
                .unwrap_or_default(),
            None => BTreeMap::new(),
        };
        let mut maps = Vec::with_capacity(dom.instances.len());
        for inst in &dom.instances {
            maps.push(stats.apply(&load_instance_features(corpus, inst)?)?);
        }
        let refs: Vec<&FeatureMap> = maps.iter().collect();
        let embeddings = net.embed_maps(&refs)?;
        for (w, emb) in embeddings.iter().enumerate() {
            let norm = emb.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::Normalization(format!(
                    "embedding row {row} has norm {norm}, expected 1"
                )));
            }
            for &v in emb {
                bin.extend_from_slice(&v.to_le_bytes());
            }
            let inst = &dom.instances[w];
            let label = EmbeddingLabel {
                row,
                domain: id.clone(),
                role: dom.manifest.role,
                class: inst.class,
                record_id: inst.record_id.clone(),
                window_start_s: inst.window_start_s,
                val_fold: record_fold.get(inst.record_id.as_str()).copied(),
            };
            labels.push_str(&serde_json::to_string(&label)?);
            labels.push('\n');
            row += 1;
        }
    }
    let bin_path = dir.join("embeddings.bin");
    let labels_path = dir.join("embeddings.labels.jsonl");
    fs::write(&bin_path, bin)?;
    fs::write(&labels_path, labels)?;
    Ok((bin_path, labels_path))
}

/// Reads an `embeddings.bin` back as float32 values (`EMBED_DIM` per row).
pub fn read_embeddings(path: &Path) -> Result<Vec<f32>> {
    let raw = fs::read(path)?;
    if raw.len() % (4 * EMBED_DIM) != 0 {
        return Err(Error::Format(format!(
            "{}: length {} is not a whole number of {EMBED_DIM}-float rows",
            path.display(),
            raw.len()
        )));
    }
    Ok(raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect())
}

// ---------------------------------------------------------------------------
// top-level entry

/// Runs the full experiment and writes every output file under
/// `cfg.out_dir`. Everything except `timings.json` is reproducible byte
/// for byte from (config, corpus).
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<MetricsReport> {
    let start = Instant::now();
    cfg.validate()?;
    let corpus = load_corpus(&cfg.corpus_dir)?;
    let data = load_experiment_data(&corpus, cfg.folds, cfg.seed)?;
    let (mut report, events, artifacts) = cross_validate(cfg, &data)?;

    fs::create_dir_all(&cfg.out_dir)?;
    write_fold_logs(&cfg.out_dir.join("folds"), &events)?;
    for &format in &cfg.formats {
        emit_report(&report, &cfg.out_dir, format)?;
    }
    fs::write(cfg.out_dir.join("matrix.csv"), report.matrix.to_csv())?;

    if let Some((mut net, stats)) = artifacts {
        let t = Instant::now();
        export_embeddings(&mut net, &stats, &corpus, Some(&data.folds), &cfg.out_dir)?;
        report.runtime.embeddings_s = t.elapsed().as_secs_f64();
    }

    report.runtime.total_s = start.elapsed().as_secs_f64();
    fs::write(
        cfg.out_dir.join("timings.json"),
        serde_json::to_string_pretty(&report.runtime)? + "\n",
    )?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_synthetic_corpus, CorpusSpec, DomainSpec, SynthConfig};
    use crate::features::extract_domain;

    fn tiny_spec() -> CorpusSpec {
        let synth = |seed: u64, s1: f64, shelf: f64| SynthConfig {
            seed,
            s1_center_hz: s1,
            s2_center_hz: s1 + 42.0,
            low_shelf_gain_db: shelf,
            high_shelf_gain_db: -shelf,
            n_normal_records: 2,
            n_abnormal_records: 2,
            record_duration_s: 3.0,
            ..SynthConfig::default()
        };
        let domain = |id: &str, role: DomainRole, seed: u64, s1: f64, shelf: f64| DomainSpec {
            domain_id: id.to_string(),
            role,
            window_shift_s: 0.75,
            trim_s: 0.25,
            synth: synth(seed, s1, shelf),
        };
        CorpusSpec {
            domains: vec![
                domain("dom-a", DomainRole::Basis, 11, 50.0, 3.0),
                domain("dom-b", DomainRole::Basis, 22, 80.0, -3.0),
                domain("dom-x", DomainRole::Unseen, 33, 65.0, 0.0),
            ],
        }
    }

    fn tiny_corpus(root: &Path) -> Corpus {
        build_synthetic_corpus(&tiny_spec(), root).unwrap();
        let mut corpus = load_corpus(root).unwrap();
        for id in corpus.domains.keys().cloned().collect::<Vec<_>>() {
            extract_domain(&mut corpus, &id, false).unwrap();
        }
        load_corpus(root).unwrap()
    }

    fn tiny_config(corpus_dir: &Path, out_dir: &Path) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::new(corpus_dir, out_dir);
        cfg.epochs = 2;
        cfg.dsc_epochs = 2;
        cfg.folds = 2;
        cfg.per_domain = 2;
        cfg.dsc_batch = 2;
        cfg.mc_samples = 2;
        cfg.lambda_grid = vec![0.5];
        cfg.phi_grid = vec![0.5];
        cfg.seed = 5;
        cfg.threads = 2;
        cfg
    }

    #[test]
    fn config_defaults_round_trip_and_validate() {
        let cfg = ExperimentConfig::new("corpus", "out");
        cfg.validate().unwrap();
        assert_eq!(cfg.folds, 10);
        assert_eq!(cfg.epochs, 300);
        assert_eq!(cfg.lambda_grid, vec![0.2, 0.5, 1.0]);
        assert_eq!(cfg.phi_grid, vec![0.2, 0.5, 0.7]);
        assert_eq!(cfg.mc_samples, 100);
        assert_eq!(cfg.recognizer, RecognizerKind::Both);

        // A sparse JSON config picks up the same defaults.
        let sparse: ExperimentConfig =
            serde_json::from_str(r#"{"corpus_dir":"corpus","out_dir":"out"}"#).unwrap();
        sparse.validate().unwrap();
        assert_eq!(sparse.folds, cfg.folds);
        assert_eq!(sparse.theta, cfg.theta);
        assert_eq!(sparse.formats, ReportFormat::all());
    }

    #[test]
    fn config_rejects_bad_values() {
        let base = ExperimentConfig::new("c", "o");
        let mut cfg = base.clone();
        cfg.folds = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = base.clone();
        cfg.lambda_grid = vec![0.2, 1.5];
        assert!(cfg.validate().is_err());
        let mut cfg = base.clone();
        cfg.phi_grid = vec![];
        assert!(cfg.validate().is_err());
        let mut cfg = base.clone();
        cfg.recognizer = RecognizerKind::Triplet;
        cfg.phi_grid = vec![];
        cfg.validate().unwrap();
        let mut cfg = base.clone();
        cfg.lr = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = base.clone();
        cfg.per_domain = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = base.clone();
        cfg.theta = -0.5;
        assert!(cfg.validate().is_err());
        let mut cfg = base.clone();
        cfg.formats = vec![];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn stat_mean_and_sample_std() {
        let s = stat(&[1.0, 2.0, 3.0]);
        assert!((s.mean - 2.0).abs() < 1e-12);
        assert!((s.std - 1.0).abs() < 1e-12);
        let single = stat(&[7.5]);
        assert_eq!(single.mean, 7.5);
        assert_eq!(single.std, 0.0);
        assert_eq!(stat(&[]), Stat::default());
    }

    #[test]
    fn counts_overall_is_weighted_class_recombination() {
        let mut c = Counts::default();
        for i in 0..37usize {
            c.push(i % 3 == 0, i % 2 == 0);
        }
        assert_eq!(c.total, c.total_normal + c.total_abnormal);
        assert_eq!(c.correct, c.correct_normal + c.correct_abnormal);
        let recombined = (c.pct_normal() * c.total_normal as f64
            + c.pct_abnormal() * c.total_abnormal as f64)
            / c.total as f64;
        assert!((c.pct_overall() - recombined).abs() < 1e-9);
    }

    #[test]
    fn counts_merge_adds_exactly() {
        let mut a = Counts::default();
        a.push(true, true);
        a.push(false, true);
        let mut b = Counts::default();
        b.push(false, false);
        let mut merged = a;
        merged.merge(&b);
        assert_eq!(merged.total, 3);
        assert_eq!(merged.correct, 2);
        assert_eq!(merged.total_abnormal, 2);
        assert_eq!(merged.total_normal, 1);
    }

    fn grid(vals: &[(f64, f64)]) -> Vec<GridStat> {
        vals.iter()
            .map(|&(threshold, mean)| GridStat {
                threshold,
                acc: MethodStat {
                    overall: Stat { mean, std: 0.0 },
                    ..MethodStat::default()
                },
            })
            .collect()
    }

    #[test]
    fn gain_is_best_grid_mean_minus_baseline() {
        let fusion = grid(&[(0.2, 61.0), (0.5, 64.5), (1.0, 58.0)]);
        assert_eq!(best_mean(&fusion), Some(64.5));
        assert_eq!(best_mean(&[]), None);
    }

    fn hand_built_report() -> MetricsReport {
        let cfg = tiny_config(Path::new("corpus"), Path::new("out"));
        let ms = |mean: f64, std: f64| MethodStat {
            overall: Stat { mean, std },
            normal: Stat { mean, std },
            abnormal: Stat { mean, std },
        };
        let row = |db: &str, role: RowRole, bl: f64| {
            let one_sh_fusion = grid(&[(0.5, bl + 4.0)]);
            let bcnn_fusion = grid(&[(0.5, bl + 2.5)]);
            ReportRow {
                db: db.to_string(),
                role,
                bl: ms(bl, 1.25),
                bcnn: Some(ms(bl + 1.0, 0.5)),
                one_sh_cl: Some(ms(bl - 1.0, 0.5)),
                one_sh_gain: Some(4.0),
                bcnn_gain: Some(2.5),
                one_sh_fusion,
                bcnn_fusion,
            }
        };
        MetricsReport {
            config: cfg,
            basis_domains: vec!["dom-a".into(), "dom-b".into()],
            unseen_domains: vec!["dom-x".into()],
            rows: vec![row("dom-x", RowRole::Unseen, 57.31), row("basis", RowRole::Basis, 88.0)],
            domain_recognition: DomainRecognition {
                bayes_validation: Some(Stat { mean: 93.0, std: 2.0 }),
                baseline_validation: Stat { mean: 91.0, std: 3.0 },
            },
            dsc_holdout: BTreeMap::from([("dom-a".to_string(), Stat { mean: 97.0, std: 1.0 })]),
            matrix: DomainAccuracyMatrix::blank(
                vec!["dom-a".into(), "dom-b".into()],
                vec!["dom-a".into(), "dom-b".into(), "dom-x".into()],
            ),
            fold_audit: Vec::new(),
            context: ReferenceContext::default(),
            runtime: RuntimeStats::default(),
        }
    }

    #[test]
    fn csv_and_markdown_carry_identical_numbers() {
        let report = hand_built_report();
        let csv = report_csv(&report);
        let md = report_markdown(&report);
        // Every stat lands in both renderings with the same 2-decimal text.
        for row in &report.rows {
            for s in [
                &row.bl.overall,
                &row.bcnn.as_ref().unwrap().overall,
                &row.one_sh_cl.as_ref().unwrap().overall,
                &row.one_sh_fusion[0].acc.overall,
                &row.bcnn_fusion[0].acc.overall,
            ] {
                assert!(csv.contains(&fmt2(s.mean)), "csv missing {}", fmt2(s.mean));
                assert!(csv.contains(&fmt2(s.std)), "csv missing {}", fmt2(s.std));
                assert!(md.contains(&fmt_stat(s)), "md missing {}", fmt_stat(s));
            }
            assert!(csv.contains(&fmt_gain(row.one_sh_gain.unwrap())));
            assert!(md.contains(&fmt_gain(row.one_sh_gain.unwrap())));
        }
        // Unseen rows precede the pooled basis row in both.
        let csv_x = csv.find("dom-x").unwrap();
        let csv_basis = csv.find("\nbasis").unwrap();
        assert!(csv_x < csv_basis);
        let md_x = md.find("| dom-x").unwrap();
        let md_basis = md.find("| basis").unwrap();
        assert!(md_x < md_basis);
        // The reference line is marked as context, not output.
        assert!(csv.contains("not a result of this run"));
        assert!(md.contains("not a result of this run"));
    }

    #[test]
    fn report_json_round_trips() {
        let report = hand_built_report();
        let json = serde_json::to_string(&report).unwrap();
        let back: MetricsReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.rows.len(), report.rows.len());
        assert_eq!(back.rows[0].db, "dom-x");
        assert_eq!(back.rows[0].one_sh_gain, Some(4.0));
        assert_eq!(back.context.one_sh_gain, 16.18);
    }

    #[test]
    fn matrix_csv_has_three_variants_per_classifier() {
        let mut m = DomainAccuracyMatrix::blank(
            vec!["a".into(), "b".into()],
            vec!["a".into(), "b".into(), "x".into()],
        );
        m.cells[0][0].push(true, true);
        m.cells[0][0].push(false, true);
        let csv = m.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 1 + 3 * 2);
        assert_eq!(lines[0], "variant,classifier,a,b,x");
        assert!(lines[1].starts_with("overall,a,50.00"));
        for line in &lines[1..] {
            assert_eq!(line.split(',').count(), 5);
        }
    }

    #[test]
    fn fold_events_round_trip_as_jsonl() {
        let event = FoldEvent::Result {
            fold: 3,
            db: "dom-x".into(),
            method: "one_sh_fusion".into(),
            threshold: Some(0.5),
            counts: {
                let mut c = Counts::default();
                c.push(true, true);
                c
            },
        };
        let line = serde_json::to_string(&event).unwrap();
        assert!(line.contains("\"event\":\"result\""));
        let back: FoldEvent = serde_json::from_str(&line).unwrap();
        match back {
            FoldEvent::Result { fold, threshold, counts, .. } => {
                assert_eq!(fold, 3);
                assert_eq!(threshold, Some(0.5));
                assert_eq!(counts.total, 1);
            }
            other => panic!("wrong variant: {other:?}"),
        }
    }

    #[test]
    fn component_seeds_are_disjoint_across_folds() {
        let mut seen = BTreeSet::new();
        for fold in 0..4 {
            let s = ComponentSeeds::for_fold(9, fold);
            for v in [s.triplet, s.bayes, s.ensemble, s.baseline, s.mc_eval] {
                assert!(seen.insert(v), "seed collision at fold {fold}");
            }
        }
    }

    #[test]
    fn fold_assembly_partitions_records_without_leakage() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = tiny_corpus(dir.path());
        let k = 2;
        let data = load_experiment_data(&corpus, k, 5).unwrap();

        // Every basis record lands in exactly one fold.
        for dom in &data.basis {
            let plan = &data.folds[&dom.id];
            let mut all: Vec<&String> = plan.iter().flatten().collect();
            all.sort_unstable();
            all.dedup();
            let mut records: Vec<&String> = dom.records.iter().collect();
            records.sort_unstable();
            records.dedup();
            assert_eq!(all, records, "fold plan must cover domain {} exactly", dom.id);
        }

        let n_basis_windows: usize = data.basis.iter().map(|d| d.maps.len()).sum();
        for fold in 0..k {
            let sets = assemble_fold(&data, fold).unwrap();
            assert_eq!(sets.train.len() + sets.val.len(), n_basis_windows);
            // Validation windows are exactly the windows of held-out records.
            for (d, dom) in data.basis.iter().enumerate() {
                let held: BTreeSet<&str> =
                    sets.val_records[&dom.id].iter().map(String::as_str).collect();
                let expect_val =
                    dom.records.iter().filter(|r| held.contains(r.as_str())).count();
                let got_val = sets.val.domains.iter().filter(|&&vd| vd == d).count();
                assert_eq!(got_val, expect_val, "fold {fold} domain {}", dom.id);
                let got_train = sets.train.domains.iter().filter(|&&td| td == d).count();
                assert_eq!(got_train, dom.maps.len() - expect_val);
            }
            // Both classes survive on each side (stratified splits).
            assert!(sets.train.classes.iter().any(|&c| c));
            assert!(sets.train.classes.iter().any(|&c| !c));
            assert!(sets.val.classes.iter().any(|&c| c));
            assert!(sets.val.classes.iter().any(|&c| !c));
            assert_eq!(sets.unseen.len(), 1);
            assert_eq!(sets.unseen[0].domain, "dom-x");
        }
    }

    #[test]
    fn experiment_outputs_are_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let corpus_dir = dir.path().join("corpus");
        tiny_corpus(&corpus_dir);

        // The rerun uses the identical config, output directory included,
        // so the first run's bytes are snapshotted before rerunning.
        let out = dir.path().join("out");
        let cfg = tiny_config(&corpus_dir, &out);
        let report = run_experiment(&cfg).unwrap();
        let files = [
            "report.json",
            "report.csv",
            "report.md",
            "matrix.csv",
            "folds/fold_00.log.jsonl",
            "folds/fold_01.log.jsonl",
            "embeddings.bin",
            "embeddings.labels.jsonl",
        ];
        let first: Vec<Vec<u8>> =
            files.iter().map(|name| fs::read(out.join(name)).unwrap()).collect();
        fs::remove_dir_all(&out).unwrap();
        run_experiment(&cfg).unwrap();

        // Shape checks on the aggregated report.
        assert_eq!(report.rows.len(), 2);
        assert_eq!(report.rows[0].db, "dom-x");
        assert_eq!(report.rows[1].db, "basis");
        assert_eq!(report.rows[1].role, RowRole::Basis);
        let row = &report.rows[0];
        let gain = row.one_sh_gain.unwrap();
        assert!(
            (gain - (best_mean(&row.one_sh_fusion).unwrap() - row.bl.overall.mean)).abs() < 1e-9
        );
        assert_eq!(report.fold_audit.len(), 2);
        assert_eq!(report.matrix.classifier_domains, vec!["dom-a", "dom-b"]);
        assert_eq!(report.matrix.eval_domains, vec!["dom-a", "dom-b", "dom-x"]);
        // Matrix diagonal pools every fold's validation windows.
        let n_val_total: usize = report.fold_audit.iter().map(|f| f.n_val_windows).sum();
        let diag_total: usize =
            (0..2).map(|i| report.matrix.cells[i][i].total).sum();
        assert_eq!(diag_total, n_val_total);

        // Byte-identical reruns, wall-clock file excluded.
        for (name, before) in files.iter().zip(&first) {
            let after = fs::read(out.join(name)).unwrap();
            assert_eq!(&after, before, "{name} differs between identical runs");
        }
        let n_rows = fs::read(out.join("embeddings.bin")).unwrap().len() / (4 * EMBED_DIM);
        let labels = fs::read_to_string(out.join("embeddings.labels.jsonl")).unwrap();
        assert_eq!(labels.lines().count(), n_rows);
        let corpus = load_corpus(&corpus_dir).unwrap();
        let total_windows: usize =
            corpus.domains.values().map(|d| d.instances.len()).sum();
        assert_eq!(n_rows, total_windows);
    }
}
