//! Command-line surface. One umbrella command runs a whole configured
//! experiment; the subcommands expose each pipeline stage (corpus
//! construction, feature extraction, per-model training, recognition,
//! fused prediction) for one-off use.
//!
//! Every flag of `biodg run` mirrors a field of the experiment JSON
//! config; a flag given on the command line overrides the file.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::corpus::store::fold_assignments;
use crate::corpus::{
    build_synthetic_corpus, ingest_directory, load_corpus, wav, window_record, resample,
    ClassLabel, CorpusSpec, DomainRole, SignalRecord, DEFAULT_TRIM_S,
};
use crate::ensemble::{fuse, DomainClassifier, DomainEnsemble, FusionResult};
use crate::error::{Error, Result};
use crate::features::{
    extract_domain, read_feature_map, FeatureExtractor, FeatureMap, FeatureStats,
};
use crate::harness::{
    assemble_split, run_experiment, ExperimentConfig, RecognizerKind, ReportFormat,
};
use crate::model_io::{load_checkpoint, save_checkpoint, CheckpointMeta, StackDescriptor};
use crate::recognizer::{
    mc_predict_set, relationship_factor, relationship_from_probs, train_bayes, train_triplet,
    BayesNet, BayesTrainConfig, EmbeddingIndex, TripletNet, TripletTrainConfig,
};
use crate::ensemble::{train_baseline, train_ensemble, BaselineTrainConfig, DscTrainConfig};

const TRIPLET_KIND: &str = "triplet-recognizer";
const BAYES_KIND: &str = "bayes-recognizer";
const ENSEMBLE_KIND: &str = "domain-classifiers";
const BASELINE_KIND: &str = "joint-baseline";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FormatArg {
    Json,
    Csv,
    Markdown,
}

impl From<FormatArg> for ReportFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Json => ReportFormat::Json,
            FormatArg::Csv => ReportFormat::Csv,
            FormatArg::Markdown => ReportFormat::Markdown,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum RecognizerArg {
    Triplet,
    Bayes,
    Both,
}

impl From<RecognizerArg> for RecognizerKind {
    fn from(r: RecognizerArg) -> Self {
        match r {
            RecognizerArg::Triplet => RecognizerKind::Triplet,
            RecognizerArg::Bayes => RecognizerKind::Bayes,
            RecognizerArg::Both => RecognizerKind::Both,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum RoleArg {
    Basis,
    Unseen,
}

impl From<RoleArg> for DomainRole {
    fn from(r: RoleArg) -> Self {
        match r {
            RoleArg::Basis => DomainRole::Basis,
            RoleArg::Unseen => DomainRole::Unseen,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "biodg", version, about = "Domain-generalized heart-sound classification")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Master seed (overrides the config file for `run`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (experiment outputs, corpus root, or model dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Report format; repeat for several (overrides the config for `run`).
    #[arg(long, global = true, value_enum)]
    format: Vec<FormatArg>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a full cross-validated experiment from a JSON config.
    Run {
        /// Experiment config file.
        #[arg(long)]
        config: PathBuf,
        /// Corpus directory (overrides the config).
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Recognizer selection (overrides the config).
        #[arg(long, value_enum)]
        recognizer: Option<RecognizerArg>,
        /// Fold count (overrides the config).
        #[arg(long)]
        folds: Option<usize>,
        /// Recognizer/baseline epochs (overrides the config).
        #[arg(long)]
        epochs: Option<usize>,
        /// Monte Carlo samples at evaluation (overrides the config).
        #[arg(long)]
        mc: Option<usize>,
        /// Concurrent fold jobs, 0 = all cores (overrides the config).
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Corpus construction and fold planning.
    Corpus {
        #[command(subcommand)]
        command: CorpusCommand,
    },
    /// Feature extraction over cached corpus windows.
    Features {
        #[command(subcommand)]
        command: FeaturesCommand,
    },
    /// Train one model on one cross-validation split.
    Train {
        #[command(subcommand)]
        command: TrainCommand,
    },
    /// Run a trained recognizer over an input signal.
    Recognize {
        #[command(subcommand)]
        command: RecognizeCommand,
    },
    /// Two-stage prediction: recognizer plus classifier ensemble.
    Predict {
        /// Which recognizer supplies the relationship vector.
        #[arg(long, value_enum)]
        recognizer: RecognizerArg,
        /// WAV file or cached feature map (.f32).
        #[arg(long)]
        input: PathBuf,
        /// Directory holding the trained checkpoints.
        #[arg(long, default_value = "models")]
        models: PathBuf,
        /// Distance threshold for the embedding recognizer.
        #[arg(long, default_value_t = 0.2)]
        lambda: f64,
        /// Posterior threshold for the Bayesian recognizer.
        #[arg(long, default_value_t = 0.7)]
        phi: f64,
        /// Monte Carlo samples for the Bayesian recognizer.
        #[arg(long, default_value_t = 100)]
        mc: usize,
        /// Window shift in seconds for WAV inputs.
        #[arg(long, default_value_t = 0.2)]
        shift: f64,
        /// End trim in seconds for WAV inputs.
        #[arg(long, default_value_t = DEFAULT_TRIM_S)]
        trim: f64,
    },
}

#[derive(Debug, Subcommand)]
enum CorpusCommand {
    /// Generate a synthetic multi-domain corpus from a spec file.
    Synth {
        /// Corpus spec JSON (see `corpus spec-template`).
        #[arg(long)]
        config: PathBuf,
    },
    /// Print the standard 6-basis + 2-unseen corpus spec as JSON.
    SpecTemplate,
    /// Ingest a directory of labeled WAV files as one domain.
    Ingest {
        /// Directory of .wav files.
        #[arg(long)]
        dir: PathBuf,
        /// Domain id for the ingested recordings.
        #[arg(long)]
        domain: String,
        /// CSV class map: `record_id,normal|abnormal` per line.
        #[arg(long)]
        class_map: PathBuf,
        #[arg(long, value_enum, default_value_t = RoleArg::Basis)]
        role: RoleArg,
        /// Window shift in seconds.
        #[arg(long, default_value_t = 0.2)]
        shift: f64,
        /// End trim in seconds.
        #[arg(long, default_value_t = DEFAULT_TRIM_S)]
        trim: f64,
    },
    /// Compute and store the record-atomic fold plan.
    Folds {
        /// Corpus directory.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
    },
}

#[derive(Debug, Subcommand)]
enum FeaturesCommand {
    /// Extract and cache feature maps for corpus windows.
    Extract {
        /// Corpus directory.
        #[arg(long)]
        corpus: PathBuf,
        /// Single domain to extract; all domains when omitted.
        #[arg(long)]
        domain: Option<String>,
        /// Recompute maps that already exist.
        #[arg(long)]
        overwrite: bool,
    },
}

#[derive(Debug, clap::Args)]
struct SplitArgs {
    /// Corpus directory.
    #[arg(long)]
    corpus: PathBuf,
    /// Fold count of the split.
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Which fold serves as validation.
    #[arg(long, default_value_t = 0)]
    fold: usize,
}

#[derive(Debug, Subcommand)]
enum TrainCommand {
    /// Train the embedding recognizer and build its index.
    Triplet {
        #[command(flatten)]
        split: SplitArgs,
        #[arg(long, default_value_t = 1.0)]
        theta: f64,
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        #[arg(long, default_value_t = 300)]
        epochs: usize,
        #[arg(long, default_value_t = 1.0)]
        margin: f64,
        #[arg(long, default_value_t = 8)]
        per_domain: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
    },
    /// Train the variational recognizer.
    Bayes {
        #[command(flatten)]
        split: SplitArgs,
        #[arg(long, default_value_t = 1.0)]
        theta: f64,
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        #[arg(long, default_value_t = 300)]
        epochs: usize,
        #[arg(long, default_value_t = 8)]
        per_domain: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
    },
    /// Train one binary classifier per basis domain.
    Ensemble {
        #[command(flatten)]
        split: SplitArgs,
        #[arg(long, default_value_t = 60)]
        epochs: usize,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
    },
    /// Train the joint soft-gated baseline.
    Baseline {
        #[command(flatten)]
        split: SplitArgs,
        #[arg(long, default_value_t = 0.9)]
        theta: f64,
        #[arg(long, default_value_t = 0.1)]
        alpha: f64,
        #[arg(long, default_value_t = 300)]
        epochs: usize,
        #[arg(long, default_value_t = 8)]
        per_domain: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
    },
}

#[derive(Debug, Subcommand)]
enum RecognizeCommand {
    /// Embedding recognizer: relationship factors plus class probability.
    Triplet {
        /// WAV file or cached feature map (.f32).
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "models")]
        models: PathBuf,
        /// Distance threshold for counting same-domain neighbors.
        #[arg(long, default_value_t = 0.2)]
        lambda: f64,
        #[arg(long, default_value_t = 0.2)]
        shift: f64,
        #[arg(long, default_value_t = DEFAULT_TRIM_S)]
        trim: f64,
    },
    /// Variational recognizer: Monte Carlo domain posterior.
    Bayes {
        /// WAV file or cached feature map (.f32).
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "models")]
        models: PathBuf,
        /// Monte Carlo samples per window.
        #[arg(long, default_value_t = 100)]
        mc: usize,
        #[arg(long, default_value_t = 0.2)]
        shift: f64,
        #[arg(long, default_value_t = DEFAULT_TRIM_S)]
        trim: f64,
    },
}

/// Parses arguments and runs the selected command.
pub fn main() -> Result<()> {
    let cli = Cli::parse();
    let seed = cli.seed.unwrap_or(0);
    match cli.command {
        Command::Run { config, corpus, recognizer, folds, epochs, mc, threads } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            if let Some(out) = cli.out {
                cfg.out_dir = out;
            }
            if !cli.format.is_empty() {
                cfg.formats = cli.format.iter().map(|&f| f.into()).collect();
            }
            if let Some(corpus) = corpus {
                cfg.corpus_dir = corpus;
            }
            if let Some(r) = recognizer {
                cfg.recognizer = r.into();
            }
            if let Some(k) = folds {
                cfg.folds = k;
            }
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            if let Some(n) = mc {
                cfg.mc_samples = n;
            }
            if let Some(t) = threads {
                cfg.threads = t;
            }
            cfg.validate()?;
            let report = run_experiment(&cfg)?;
            println!("experiment complete: {} folds over {} basis domains", cfg.folds, report.basis_domains.len());
            for row in &report.rows {
                let gains = [
                    row.one_sh_gain.map(|g| format!("one-sh gain {g:+.2}")),
                    row.bcnn_gain.map(|g| format!("bcnn gain {g:+.2}")),
                ];
                let gains: Vec<String> = gains.into_iter().flatten().collect();
                println!(
                    "  {:<12} bl {:6.2} ± {:5.2}  {}",
                    row.db, row.bl.overall.mean, row.bl.overall.std, gains.join(", ")
                );
            }
            println!("outputs in {}", cfg.out_dir.display());
            Ok(())
        }
        Command::Corpus { command } => corpus_command(command, seed, cli.out),
        Command::Features { command } => features_command(command),
        Command::Train { command } => train_command(command, seed, cli.out),
        Command::Recognize { command } => recognize_command(command, seed),
        Command::Predict { recognizer, input, models, lambda, phi, mc, shift, trim } => {
            predict_command(recognizer, &input, &models, lambda, phi, mc, shift, trim, seed)
        }
    }
}

#[derive(Serialize)]
struct FoldPlanFile {
    k: usize,
    seed: u64,
    assignments: BTreeMap<String, Vec<Vec<String>>>,
}

fn corpus_command(command: CorpusCommand, seed: u64, out: Option<PathBuf>) -> Result<()> {
    match command {
        CorpusCommand::Synth { config } => {
            let spec: CorpusSpec = serde_json::from_reader(fs::File::open(&config)?)?;
            let root = out.unwrap_or_else(|| PathBuf::from("corpus"));
            let manifests = build_synthetic_corpus(&spec, &root)?;
            for m in &manifests {
                println!(
                    "{}: {} windows ({} normal / {} abnormal) from {} records",
                    m.domain_id,
                    m.counts.normal + m.counts.abnormal,
                    m.counts.normal,
                    m.counts.abnormal,
                    m.record_counts.normal + m.record_counts.abnormal
                );
            }
            println!("corpus written to {}", root.display());
            Ok(())
        }
        CorpusCommand::SpecTemplate => {
            let spec = CorpusSpec::standard(seed);
            println!("{}", serde_json::to_string_pretty(&spec)?);
            Ok(())
        }
        CorpusCommand::Ingest { dir, domain, class_map, role, shift, trim } => {
            let root = out.unwrap_or_else(|| PathBuf::from("corpus"));
            let manifest =
                ingest_directory(&root, &dir, &domain, role.into(), &class_map, shift, trim)?;
            println!(
                "{}: {} windows ({} normal / {} abnormal) ingested into {}",
                manifest.domain_id,
                manifest.counts.normal + manifest.counts.abnormal,
                manifest.counts.normal,
                manifest.counts.abnormal,
                root.display()
            );
            Ok(())
        }
        CorpusCommand::Folds { corpus, k } => {
            let loaded = load_corpus(&corpus)?;
            let assignments = fold_assignments(&loaded, k, seed)?;
            let path = corpus.join("folds.json");
            let body = serde_json::to_string_pretty(&FoldPlanFile { k, seed, assignments })?;
            fs::write(&path, body + "\n")?;
            println!("fold plan written to {}", path.display());
            Ok(())
        }
    }
}

fn features_command(command: FeaturesCommand) -> Result<()> {
    match command {
        FeaturesCommand::Extract { corpus, domain, overwrite } => {
            let mut loaded = load_corpus(&corpus)?;
            let targets: Vec<String> = match domain {
                Some(d) => vec![d],
                None => loaded.domains.keys().cloned().collect(),
            };
            for id in targets {
                let written = extract_domain(&mut loaded, &id, overwrite)?;
                println!("{id}: {written} feature maps written");
            }
            Ok(())
        }
    }
}

fn hyper(entries: &[(&str, f64)]) -> BTreeMap<String, f64> {
    entries.iter().map(|&(k, v)| (k.to_string(), v)).collect()
}

fn train_command(command: TrainCommand, seed: u64, out: Option<PathBuf>) -> Result<()> {
    let out = out.unwrap_or_else(|| PathBuf::from("models"));
    match command {
        TrainCommand::Triplet { split, theta, alpha, epochs, margin, per_domain, lr } => {
            let corpus = load_corpus(&split.corpus)?;
            let labels = corpus.basis_ids();
            let sets = assemble_split(&corpus, split.k, seed, split.fold)?;
            let trained = train_triplet(
                &sets.train,
                &sets.val,
                &labels,
                &TripletTrainConfig { theta, alpha, margin, epochs, per_domain, lr, seed },
            )?;
            let last = trained.history.last().expect("at least one epoch");
            println!(
                "triplet: epoch {} val triplet loss {:.4}, val class accuracy {:.2}%",
                last.epoch,
                last.val_triplet_loss,
                100.0 * last.val_class_accuracy
            );
            let meta = CheckpointMeta {
                name: "triplet".into(),
                kind: TRIPLET_KIND.into(),
                seed,
                stacks: vec![
                    descriptor("trunk", &trained.net.trunk),
                    descriptor("embed", &trained.net.embed),
                    descriptor("class_head", &trained.net.class_head),
                ],
                param_counts: Vec::new(),
                feature_stats: sets.stats,
                domain_labels: labels,
                hyper: hyper(&[
                    ("theta", theta),
                    ("alpha", alpha),
                    ("margin", margin),
                    ("epochs", epochs as f64),
                    ("per_domain", per_domain as f64),
                    ("lr", lr),
                    ("k", split.k as f64),
                    ("fold", split.fold as f64),
                ]),
            };
            save_checkpoint(
                &out,
                &meta,
                &[&trained.net.trunk, &trained.net.embed, &trained.net.class_head],
            )?;
            trained.index.save(&out, "triplet")?;
            println!("checkpoint and index written to {}", out.display());
            Ok(())
        }
        TrainCommand::Bayes { split, theta, alpha, epochs, per_domain, lr } => {
            let corpus = load_corpus(&split.corpus)?;
            let labels = corpus.basis_ids();
            let sets = assemble_split(&corpus, split.k, seed, split.fold)?;
            let trained = train_bayes(
                &sets.train,
                &sets.val,
                &labels,
                &BayesTrainConfig { theta, alpha, epochs, per_domain, lr, seed },
            )?;
            println!(
                "bayes: best epoch {} with val domain accuracy {:.2}%",
                trained.best_epoch,
                100.0 * trained.best_val_domain_accuracy
            );
            let meta = CheckpointMeta {
                name: "bayes".into(),
                kind: BAYES_KIND.into(),
                seed,
                stacks: vec![
                    descriptor("trunk", &trained.net.trunk),
                    descriptor("domain_head", &trained.net.domain_head),
                    descriptor("class_head", &trained.net.class_head),
                ],
                param_counts: Vec::new(),
                feature_stats: sets.stats,
                domain_labels: labels,
                hyper: hyper(&[
                    ("theta", theta),
                    ("alpha", alpha),
                    ("epochs", epochs as f64),
                    ("per_domain", per_domain as f64),
                    ("lr", lr),
                    ("k", split.k as f64),
                    ("fold", split.fold as f64),
                ]),
            };
            save_checkpoint(
                &out,
                &meta,
                &[&trained.net.trunk, &trained.net.domain_head, &trained.net.class_head],
            )?;
            println!("checkpoint written to {}", out.display());
            Ok(())
        }
        TrainCommand::Ensemble { split, epochs, batch, lr } => {
            let corpus = load_corpus(&split.corpus)?;
            let labels = corpus.basis_ids();
            let sets = assemble_split(&corpus, split.k, seed, split.fold)?;
            let trained = train_ensemble(
                &sets.train,
                &labels,
                &DscTrainConfig { epochs, batch_size: batch, lr, seed },
            )?;
            for report in &trained.reports {
                println!(
                    "{}: holdout accuracy {:.2}% (best epoch {}, {} train windows)",
                    report.domain,
                    100.0 * report.holdout_accuracy,
                    report.best_epoch,
                    report.n_train
                );
            }
            let stacks: Vec<&crate::engine::Stack<f32>> =
                trained.ensemble.classifiers.iter().map(|c| &c.stack).collect();
            let descriptors = trained
                .ensemble
                .classifiers
                .iter()
                .map(|c| descriptor(&format!("dsc_{}", c.domain), &c.stack))
                .collect();
            let meta = CheckpointMeta {
                name: "ensemble".into(),
                kind: ENSEMBLE_KIND.into(),
                seed,
                stacks: descriptors,
                param_counts: Vec::new(),
                feature_stats: sets.stats,
                domain_labels: labels,
                hyper: hyper(&[
                    ("epochs", epochs as f64),
                    ("batch", batch as f64),
                    ("lr", lr),
                    ("k", split.k as f64),
                    ("fold", split.fold as f64),
                ]),
            };
            save_checkpoint(&out, &meta, &stacks)?;
            println!("checkpoint written to {}", out.display());
            Ok(())
        }
        TrainCommand::Baseline { split, theta, alpha, epochs, per_domain, lr } => {
            let corpus = load_corpus(&split.corpus)?;
            let labels = corpus.basis_ids();
            let sets = assemble_split(&corpus, split.k, seed, split.fold)?;
            let trained = train_baseline(
                &sets.train,
                &sets.val,
                &labels,
                &BaselineTrainConfig { theta, alpha, epochs, per_domain, lr, seed },
            )?;
            println!(
                "baseline: best epoch {} with val domain accuracy {:.2}%",
                trained.best_epoch,
                100.0 * trained.best_val_domain_accuracy
            );
            let mut stacks: Vec<&crate::engine::Stack<f32>> =
                vec![&trained.net.di_trunk, &trained.net.di_head];
            let mut descriptors = vec![
                descriptor("di_trunk", &trained.net.di_trunk),
                descriptor("di_head", &trained.net.di_head),
            ];
            for (label, branch) in labels.iter().zip(&trained.net.branches) {
                descriptors.push(descriptor(&format!("branch_{label}"), branch));
                stacks.push(branch);
            }
            let meta = CheckpointMeta {
                name: "baseline".into(),
                kind: BASELINE_KIND.into(),
                seed,
                stacks: descriptors,
                param_counts: Vec::new(),
                feature_stats: sets.stats,
                domain_labels: labels,
                hyper: hyper(&[
                    ("theta", theta),
                    ("alpha", alpha),
                    ("epochs", epochs as f64),
                    ("per_domain", per_domain as f64),
                    ("lr", lr),
                    ("k", split.k as f64),
                    ("fold", split.fold as f64),
                ]),
            };
            save_checkpoint(&out, &meta, &stacks)?;
            println!("checkpoint written to {}", out.display());
            Ok(())
        }
    }
}

fn descriptor(name: &str, stack: &crate::engine::Stack<f32>) -> StackDescriptor {
    StackDescriptor { name: name.to_string(), layers: stack.specs().to_vec() }
}

/// Prints one output line, exiting quietly when the consumer (e.g.
/// `head`) has closed the pipe.
fn emit_line(line: &str) -> Result<()> {
    let mut stdout = std::io::stdout().lock();
    match writeln!(stdout, "{line}") {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => std::process::exit(0),
        other => Ok(other?),
    }
}

fn expect_kind(meta: &CheckpointMeta, kind: &str) -> Result<()> {
    if meta.kind != kind {
        return Err(Error::Format(format!(
            "checkpoint {} has kind {:?}, expected {kind:?}",
            meta.name, meta.kind
        )));
    }
    Ok(())
}

/// Windows an input into standardized feature maps. WAV files are
/// resampled, trimmed, and windowed like corpus records; a `.f32`
/// feature cache file is taken as a single window.
fn input_windows(
    input: &Path,
    stats: &FeatureStats,
    shift: f64,
    trim: f64,
) -> Result<Vec<(f64, FeatureMap)>> {
    let ext = input.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    if ext == "f32" {
        let map = read_feature_map(input, input.display().to_string())?;
        return Ok(vec![(0.0, stats.apply(&map)?)]);
    }
    let (rate, samples) = wav::read_wav(input)?;
    let stem = input
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("input")
        .to_string();
    // The class label is a placeholder; windowing never reads it.
    let record = SignalRecord::new(stem, "input".into(), ClassLabel::Normal, rate, samples)?;
    let record = resample(&record, crate::corpus::CANONICAL_RATE_HZ)?;
    let extractor = FeatureExtractor::new();
    let mut out = Vec::new();
    for window in window_record(&record, shift, trim)? {
        let map = extractor
            .extract_labeled(&window.samples, format!("{}@{:.3}s", input.display(), window.window_start_s))?;
        out.push((window.window_start_s, stats.apply(&map)?));
    }
    Ok(out)
}

fn load_triplet(models: &Path) -> Result<(CheckpointMeta, TripletNet, EmbeddingIndex)> {
    let (meta, stacks) = load_checkpoint(models, "triplet")?;
    expect_kind(&meta, TRIPLET_KIND)?;
    let net = TripletNet::from_stacks(stacks)?;
    let index = EmbeddingIndex::load(models, "triplet")?;
    Ok((meta, net, index))
}

fn load_bayes(models: &Path) -> Result<(CheckpointMeta, BayesNet)> {
    let (meta, stacks) = load_checkpoint(models, "bayes")?;
    expect_kind(&meta, BAYES_KIND)?;
    let n_domains = meta.domain_labels.len();
    let net = BayesNet::from_stacks(n_domains, stacks)?;
    Ok((meta, net))
}

fn load_ensemble(models: &Path) -> Result<(CheckpointMeta, DomainEnsemble)> {
    let (meta, stacks) = load_checkpoint(models, "ensemble")?;
    expect_kind(&meta, ENSEMBLE_KIND)?;
    if stacks.len() != meta.domain_labels.len() {
        return Err(Error::Format(format!(
            "ensemble checkpoint holds {} classifiers for {} domains",
            stacks.len(),
            meta.domain_labels.len()
        )));
    }
    let classifiers = meta
        .domain_labels
        .iter()
        .zip(stacks)
        .map(|(domain, stack)| DomainClassifier { domain: domain.clone(), stack })
        .collect();
    Ok((meta.clone(), DomainEnsemble { domain_labels: meta.domain_labels, classifiers }))
}

#[derive(Serialize)]
struct TripletLine<'a> {
    window_start_s: f64,
    domains: &'a [String],
    beta: Vec<f64>,
    class_prob: f64,
}

#[derive(Serialize)]
struct BayesLine<'a> {
    window_start_s: f64,
    domains: &'a [String],
    domain_probs: &'a [f64],
    domain_variance: &'a [f64],
    class_prob: f64,
    class_variance: f64,
}

fn recognize_command(command: RecognizeCommand, seed: u64) -> Result<()> {
    match command {
        RecognizeCommand::Triplet { input, models, lambda, shift, trim } => {
            let (meta, mut net, index) = load_triplet(&models)?;
            let windows = input_windows(&input, &meta.feature_stats, shift, trim)?;
            let maps: Vec<&FeatureMap> = windows.iter().map(|(_, m)| m).collect();
            let embeddings = net.embed_maps(&maps)?;
            let class_probs = net.class_probs(&maps)?;
            for (i, (start, _)) in windows.iter().enumerate() {
                let rel = relationship_factor(&embeddings[i], &index, lambda)?;
                let line = TripletLine {
                    window_start_s: *start,
                    domains: &meta.domain_labels,
                    beta: rel.beta,
                    class_prob: class_probs[i],
                };
                emit_line(&serde_json::to_string(&line)?)?;
            }
            Ok(())
        }
        RecognizeCommand::Bayes { input, models, mc, shift, trim } => {
            let (meta, mut net) = load_bayes(&models)?;
            let windows = input_windows(&input, &meta.feature_stats, shift, trim)?;
            let maps: Vec<&FeatureMap> = windows.iter().map(|(_, m)| m).collect();
            let predictions = mc_predict_set(&mut net, &maps, mc, seed)?;
            for ((start, _), pred) in windows.iter().zip(&predictions) {
                let line = BayesLine {
                    window_start_s: *start,
                    domains: &meta.domain_labels,
                    domain_probs: &pred.domain_probs,
                    domain_variance: &pred.domain_variance,
                    class_prob: pred.class_prob,
                    class_variance: pred.class_variance,
                };
                emit_line(&serde_json::to_string(&line)?)?;
            }
            Ok(())
        }
    }
}

#[derive(Serialize)]
struct PredictLine<'a> {
    window_start_s: f64,
    #[serde(flatten)]
    fusion: &'a FusionResult,
}

#[allow(clippy::too_many_arguments)]
fn predict_command(
    recognizer: RecognizerArg,
    input: &Path,
    models: &Path,
    lambda: f64,
    phi: f64,
    mc: usize,
    shift: f64,
    trim: f64,
    seed: u64,
) -> Result<()> {
    let (ens_meta, mut ensemble) = load_ensemble(models)?;
    match recognizer {
        RecognizerArg::Both => Err(Error::Argument(
            "predict needs a single recognizer: triplet or bayes".into(),
        )),
        RecognizerArg::Triplet => {
            let (meta, mut net, index) = load_triplet(models)?;
            if meta.domain_labels != ens_meta.domain_labels {
                return Err(Error::Format(
                    "recognizer and ensemble checkpoints disagree on domain labels".into(),
                ));
            }
            let windows = input_windows(input, &meta.feature_stats, shift, trim)?;
            let maps: Vec<&FeatureMap> = windows.iter().map(|(_, m)| m).collect();
            let embeddings = net.embed_maps(&maps)?;
            let fallback = net.class_probs(&maps)?;
            let dsc_probs = ensemble.probability_matrix(&maps)?;
            for (i, (start, _)) in windows.iter().enumerate() {
                let rel = relationship_factor(&embeddings[i], &index, lambda)?;
                let fusion = fuse(&rel, 0.0, &meta.domain_labels, &dsc_probs[i], fallback[i])?;
                emit_line(&serde_json::to_string(&PredictLine {
                    window_start_s: *start,
                    fusion: &fusion,
                })?)?;
            }
            Ok(())
        }
        RecognizerArg::Bayes => {
            let (meta, mut net) = load_bayes(models)?;
            if meta.domain_labels != ens_meta.domain_labels {
                return Err(Error::Format(
                    "recognizer and ensemble checkpoints disagree on domain labels".into(),
                ));
            }
            let windows = input_windows(input, &meta.feature_stats, shift, trim)?;
            let maps: Vec<&FeatureMap> = windows.iter().map(|(_, m)| m).collect();
            let predictions = mc_predict_set(&mut net, &maps, mc, seed)?;
            let dsc_probs = ensemble.probability_matrix(&maps)?;
            for (i, (start, _)) in windows.iter().enumerate() {
                let rel = relationship_from_probs(&predictions[i].domain_probs)?;
                let fusion = fuse(
                    &rel,
                    phi,
                    &meta.domain_labels,
                    &dsc_probs[i],
                    predictions[i].class_prob,
                )?;
                emit_line(&serde_json::to_string(&PredictLine {
                    window_start_s: *start,
                    fusion: &fusion,
                })?)?;
            }
            Ok(())
        }
    }
}
