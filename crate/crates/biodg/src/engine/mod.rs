//! Reverse-mode layer engine.
//!
//! A deliberately small training stack for fixed-topology CNNs: dense
//! tensors, a layer trait with explicit forward caching and backward
//! passes, three losses, and Adam. Convolutions lower to GEMM via
//! im2col, which is where essentially all training time goes.
//!
//! The engine is generic over [`scalar::Scalar`]: `f32` for training,
//! `f64` for finite-difference gradient verification. Layers are pure
//! functions of (parameters, input, noise stream), so training runs are
//! reproducible bit for bit.

pub mod adam;
pub mod grad_check;
pub mod init;
pub mod layers;
pub mod losses;
pub mod scalar;
pub mod stack;
pub mod tensor;

pub use adam::{Adam, AdamConfig};
pub use layers::{Layer, ParamSlot, Phase};
pub use scalar::Scalar;
pub use stack::{LayerSpec, Stack};
pub use tensor::Tensor;
