//! Domain-generalized heart-sound classification.
//!
//! Heart-sound corpora differ by recording device, site protocol, and
//! population; a classifier trained on one corpus degrades on the next.
//! This crate implements a two-stage defense: a *domain recognizer* maps an
//! incoming signal to a relationship vector over the known basis domains,
//! and a bank of per-domain binary classifiers is fused under that vector
//! by thresholded selection and majority vote. Two recognizers are
//! provided — a triplet-embedding model that scores domain membership by
//! distance in a learned embedding space, and a Bayesian convolutional
//! network whose Monte-Carlo domain posterior is used directly — plus a
//! jointly trained soft-fusion baseline for comparison.
//!
//! The crate is self-contained: it ships its own reverse-mode layer engine
//! ([`engine`]), variational flipout layers ([`bayes`]), an MFCC feature
//! pipeline ([`features`]), a seeded synthetic corpus generator
//! ([`corpus`]), and a cross-validation harness ([`harness`]) that emits
//! byte-reproducible reports. The `biodg` binary exposes every stage as a
//! subcommand.
//!
//! ```
//! use biodg::corpus::SynthConfig;
//! use biodg::features::{FeatureExtractor, FRAME_COLS, N_COEFFS};
//!
//! // One second of silence still produces a finite, full-shape map.
//! let extractor = FeatureExtractor::new();
//! let map = extractor.extract(&vec![0.0; 2000]).unwrap();
//! assert_eq!((map.rows(), map.cols()), (N_COEFFS, FRAME_COLS));
//! assert!(map.values().iter().all(|v| v.is_finite()));
//! # let _ = SynthConfig::default();
//! ```

pub mod bayes;
pub mod cli;
pub mod corpus;
pub mod engine;
pub mod ensemble;
pub mod error;
pub mod features;
pub mod harness;
pub mod model_io;
pub mod recognizer;
pub mod rng;

#[cfg(doctest)]
mod book_doctests;

pub use error::{Error, Result};
