//! Layer stacks built from serializable specs.
//!
//! A [`Stack`] is an ordered list of layers constructed from
//! [`LayerSpec`]s. The spec list is the architecture descriptor that goes
//! into checkpoints: it carries every dimension explicitly (including
//! kernel sizes, which are implementation choices, not published values),
//! so a saved model is auditable and reloadable without ambiguity.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    Conv2d, ConvDims, Dense, Flatten, L2Normalize, Layer, MaxPool2x2, ParamSlot, Phase, Relu,
    Sigmoid, Softmax,
};
use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::bayes::{Conv2dFlipout, DenseFlipout};
use crate::error::{Error, Result};

/// Serializable layer descriptor. Conv specs carry their expected input
/// plane so shape errors surface at build time rather than mid-training.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d { in_ch: usize, in_h: usize, in_w: usize, out_ch: usize, kh: usize, kw: usize },
    Conv2dFlipout { in_ch: usize, in_h: usize, in_w: usize, out_ch: usize, kh: usize, kw: usize },
    Dense { in_dim: usize, out_dim: usize },
    DenseFlipout { in_dim: usize, out_dim: usize },
    Relu,
    Sigmoid,
    Softmax,
    MaxPool2x2,
    Flatten,
    L2Normalize,
}

impl LayerSpec {
    fn build<S: Scalar>(&self, rng: &mut ChaCha8Rng) -> Result<Box<dyn Layer<S> + Send>> {
        Ok(match *self {
            LayerSpec::Conv2d { in_ch, in_h, in_w, out_ch, kh, kw } => {
                check_conv_geometry(in_h, in_w, kh, kw)?;
                let dims = ConvDims { in_ch, h: in_h, w: in_w, kh, kw };
                Box::new(Conv2d::new(dims, out_ch, rng))
            }
            LayerSpec::Conv2dFlipout { in_ch, in_h, in_w, out_ch, kh, kw } => {
                check_conv_geometry(in_h, in_w, kh, kw)?;
                let dims = ConvDims { in_ch, h: in_h, w: in_w, kh, kw };
                Box::new(Conv2dFlipout::new(dims, out_ch, rng))
            }
            LayerSpec::Dense { in_dim, out_dim } => Box::new(Dense::new(in_dim, out_dim, rng)),
            LayerSpec::DenseFlipout { in_dim, out_dim } => {
                Box::new(DenseFlipout::new(in_dim, out_dim, rng))
            }
            LayerSpec::Relu => Box::new(Relu::new()),
            LayerSpec::Sigmoid => Box::new(Sigmoid::new()),
            LayerSpec::Softmax => Box::new(Softmax::new()),
            LayerSpec::MaxPool2x2 => Box::new(MaxPool2x2::new()),
            LayerSpec::Flatten => Box::new(Flatten::new()),
            LayerSpec::L2Normalize => Box::new(L2Normalize::new()),
        })
    }
}

fn check_conv_geometry(in_h: usize, in_w: usize, kh: usize, kw: usize) -> Result<()> {
    if kh == 0 || kw == 0 || kh > in_h || kw > in_w {
        return Err(Error::Config(format!(
            "conv kernel {kh}x{kw} does not fit input {in_h}x{in_w}"
        )));
    }
    Ok(())
}

pub struct Stack<S: Scalar> {
    specs: Vec<LayerSpec>,
    layers: Vec<Box<dyn Layer<S> + Send>>,
}

impl<S: Scalar> std::fmt::Debug for Stack<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stack").field("specs", &self.specs).finish()
    }
}

impl<S: Scalar> Stack<S> {
    /// Builds and initializes all layers, drawing weights sequentially
    /// from `rng` (so construction is deterministic per seed).
    pub fn from_specs(specs: &[LayerSpec], rng: &mut ChaCha8Rng) -> Result<Self> {
        let layers = specs
            .iter()
            .map(|s| s.build(rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Stack { specs: specs.to_vec(), layers })
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn forward(&mut self, x: &Tensor<S>, phase: &mut Phase) -> Result<Tensor<S>> {
        let mut cur = x.clone();
        for layer in &mut self.layers {
            cur = layer.forward(&cur, phase)?;
        }
        Ok(cur)
    }

    /// Backpropagates `gy` through the stack, consuming forward caches.
    pub fn backward(&mut self, gy: &Tensor<S>) -> Result<Tensor<S>> {
        let mut cur = gy.clone();
        for layer in self.layers.iter_mut().rev() {
            cur = layer.backward(&cur)?;
        }
        Ok(cur)
    }

    pub fn zero_grad(&mut self) {
        for layer in &mut self.layers {
            layer.zero_grad();
        }
    }

    /// Total KL divergence of all variational layers.
    pub fn kl(&self) -> S {
        let mut acc = S::zero();
        for layer in &self.layers {
            acc += layer.kl();
        }
        acc
    }

    /// Accumulates `scale * dKL/dparam` for all variational layers.
    pub fn kl_backward(&mut self, scale: S) {
        for layer in &mut self.layers {
            layer.kl_backward(scale);
        }
    }

    pub fn param_slots(&mut self) -> Vec<ParamSlot<'_, S>> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.param_slots())
            .collect()
    }

    pub fn param_blocks(&self) -> Vec<&[S]> {
        self.layers.iter().flat_map(|l| l.param_blocks()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.param_count()).sum()
    }

    /// Copies all parameter values out (for best-epoch checkpointing).
    pub fn snapshot(&self) -> Vec<Vec<S>> {
        self.param_blocks().iter().map(|b| b.to_vec()).collect()
    }

    pub fn restore(&mut self, snap: &[Vec<S>]) {
        let mut slots = self.param_slots();
        assert_eq!(slots.len(), snap.len(), "snapshot block count mismatch");
        for (slot, block) in slots.iter_mut().zip(snap) {
            slot.values.copy_from_slice(block);
        }
    }

    /// Parameter blocks as `f32` in descriptor order, for serialization.
    pub fn export_blocks(&self) -> Vec<Vec<f32>> {
        self.param_blocks()
            .iter()
            .map(|b| b.iter().map(|v| v.to_f32_()).collect())
            .collect()
    }

    pub fn import_blocks(&mut self, blocks: &[Vec<f32>]) -> Result<()> {
        let mut slots = self.param_slots();
        if slots.len() != blocks.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} parameter blocks, architecture needs {}",
                blocks.len(),
                slots.len()
            )));
        }
        for (i, (slot, block)) in slots.iter_mut().zip(blocks).enumerate() {
            if slot.values.len() != block.len() {
                return Err(Error::Format(format!(
                    "parameter block {i} has {} values, expected {}",
                    block.len(),
                    slot.values.len()
                )));
            }
            for (v, b) in slot.values.iter_mut().zip(block) {
                *v = S::from_f32_(*b);
            }
        }
        Ok(())
    }
}
