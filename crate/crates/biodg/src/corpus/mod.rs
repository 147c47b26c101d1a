//! Corpus management: recordings, windows, manifests, synthesis.
//!
//! A corpus is a directory of domains. Each domain has a manifest header
//! (`<id>.manifest.json`), an instance list (`<id>.instances.jsonl`, one
//! JSON object per analysis window), and a `records/` directory of WAV
//! files. Domains are either `basis` (available for training) or
//! `unseen` (held out entirely, used to measure generalization).
//!
//! All ingest paths funnel records through the same protocol: resample
//! to the canonical rate, trim both ends, slice into 1 s windows at the
//! domain's shift. The synthetic generator produces multi-domain
//! heart-sound corpora that are pure functions of their configuration
//! and seed, which is what the reproducibility tests lean on.

pub mod folds;
pub mod store;
pub mod synth;
pub mod wav;
pub mod window;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use folds::{balance_classes, split_folds};
pub use store::{build_synthetic_corpus, ingest_directory, load_corpus, Corpus, LoadedDomain};
pub use synth::{generate_records, CorpusSpec, DomainSpec, SynthConfig};
pub use window::{resample, window_record};

/// Canonical sample rate all records are resampled to. The 0-600 Hz
/// analysis band needs only 1200 Hz; 2000 Hz leaves headroom and makes
/// the window arithmetic round.
pub const CANONICAL_RATE_HZ: u32 = 2000;

/// Analysis window length in seconds.
pub const WINDOW_S: f64 = 1.0;

/// Default end trim in seconds, removing transducer-handling artifacts.
pub const DEFAULT_TRIM_S: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassLabel {
    Normal,
    Abnormal,
}

impl ClassLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            ClassLabel::Normal => "normal",
            ClassLabel::Abnormal => "abnormal",
        }
    }

    pub fn from_str_loose(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "normal" | "0" => Ok(ClassLabel::Normal),
            "abnormal" | "1" => Ok(ClassLabel::Abnormal),
            other => Err(Error::Config(format!("unknown class label {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainRole {
    Basis,
    Unseen,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Ingested,
    Synthetic,
}

/// A raw labeled recording.
#[derive(Debug, Clone)]
pub struct SignalRecord {
    pub record_id: String,
    pub domain_id: String,
    pub class_label: ClassLabel,
    pub sample_rate_hz: u32,
    pub samples: Vec<f64>,
    pub patient_id: Option<String>,
}

impl SignalRecord {
    pub fn new(
        record_id: String,
        domain_id: String,
        class_label: ClassLabel,
        sample_rate_hz: u32,
        samples: Vec<f64>,
    ) -> Result<Self> {
        if sample_rate_hz == 0 {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        if samples.is_empty() {
            return Err(Error::EmptyInput(format!("record {record_id} has no samples")));
        }
        if !samples.iter().all(|s| s.is_finite() && s.abs() <= 1.0 + 1e-9) {
            return Err(Error::Format(format!(
                "record {record_id} has non-finite or out-of-range amplitudes"
            )));
        }
        Ok(SignalRecord {
            record_id,
            domain_id,
            class_label,
            sample_rate_hz,
            samples,
            patient_id: None,
        })
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }
}

/// One 1 s analysis window at the canonical rate.
#[derive(Debug, Clone)]
pub struct WindowedInstance {
    pub source_record_id: String,
    pub domain_id: String,
    pub class_label: ClassLabel,
    pub samples: Vec<f64>,
    pub window_start_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClassCounts {
    pub normal: usize,
    pub abnormal: usize,
}

impl ClassCounts {
    pub fn total(&self) -> usize {
        self.normal + self.abnormal
    }

    pub fn bump(&mut self, class: ClassLabel) {
        match class {
            ClassLabel::Normal => self.normal += 1,
            ClassLabel::Abnormal => self.abnormal += 1,
        }
    }
}

/// Domain header, serialized as `<domain_id>.manifest.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainManifest {
    pub domain_id: String,
    pub role: DomainRole,
    pub window_shift_s: f64,
    pub trim_s: f64,
    pub canonical_rate_hz: u32,
    pub provenance: Provenance,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Window (instance) counts per class.
    pub counts: ClassCounts,
    /// Source record counts per class.
    pub record_counts: ClassCounts,
}

/// One row of `<domain_id>.instances.jsonl`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstanceRow {
    pub record_id: String,
    pub window_start_s: f64,
    pub class: ClassLabel,
    /// WAV file holding the source record, relative to the corpus dir.
    pub sample_path: String,
    /// Cached feature map, relative to the corpus dir; set by extraction.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub feature_path: Option<String>,
}
