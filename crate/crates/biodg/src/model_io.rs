//! Checkpoints: a JSON descriptor next to a flat binary parameter
//! block.
//!
//! `<name>.ckpt.json` lists the model's stacks (layer specs in build
//! order), hyperparameters, feature-standardization stats, the label
//! order of any domain head, and the training seed. `<name>.ckpt.bin`
//! holds every parameter as float32 little-endian, stacks in descriptor
//! order and blocks in layer order within each stack, so a checkpoint
//! can be rebuilt without the code that trained it.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::engine::{LayerSpec, Stack};
use crate::error::{Error, Result};
use crate::features::FeatureStats;
use crate::rng;

/// One named layer stack inside a checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StackDescriptor {
    pub name: String,
    pub layers: Vec<LayerSpec>,
}

/// The JSON half of a checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub name: String,
    /// Model family tag, e.g. "triplet-recognizer" or "domain-classifier".
    pub kind: String,
    pub seed: u64,
    pub stacks: Vec<StackDescriptor>,
    /// Per-stack float32 parameter counts, in stack order.
    pub param_counts: Vec<usize>,
    pub feature_stats: FeatureStats,
    /// Domain label order used by any domain output head.
    pub domain_labels: Vec<String>,
    /// Scalar hyperparameters (loss weights, epochs, learning rate...).
    pub hyper: BTreeMap<String, f64>,
}

fn json_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.ckpt.json"))
}

fn bin_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.ckpt.bin"))
}

/// Writes `<name>.ckpt.json` and `<name>.ckpt.bin`. The stacks must be
/// passed in descriptor order.
pub fn save_checkpoint(dir: &Path, meta: &CheckpointMeta, stacks: &[&Stack<f32>]) -> Result<()> {
    if stacks.len() != meta.stacks.len() {
        return Err(Error::Argument(format!(
            "descriptor lists {} stacks, got {}",
            meta.stacks.len(),
            stacks.len()
        )));
    }
    let mut meta = meta.clone();
    meta.param_counts = stacks.iter().map(|s| s.param_count()).collect();

    fs::create_dir_all(dir)?;
    let mut bin = Vec::new();
    for stack in stacks {
        for block in stack.export_blocks() {
            for v in block {
                bin.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    fs::write(bin_path(dir, &meta.name), bin)?;
    fs::write(
        json_path(dir, &meta.name),
        serde_json::to_string_pretty(&meta)? + "\n",
    )?;
    Ok(())
}

/// Reads a checkpoint back: rebuilds each stack from its layer specs
/// and fills it with the stored parameters.
pub fn load_checkpoint(dir: &Path, name: &str) -> Result<(CheckpointMeta, Vec<Stack<f32>>)> {
    let meta: CheckpointMeta = serde_json::from_reader(fs::File::open(json_path(dir, name))?)?;
    let raw = fs::read(bin_path(dir, name))?;
    if raw.len() % 4 != 0 {
        return Err(Error::Format(format!(
            "{}: length {} is not a multiple of 4",
            bin_path(dir, name).display(),
            raw.len()
        )));
    }
    let values: Vec<f32> =
        raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();

    let total: usize = meta.param_counts.iter().sum();
    if meta.param_counts.len() != meta.stacks.len() || values.len() != total {
        return Err(Error::Format(format!(
            "checkpoint {name}: descriptor promises {total} parameters in {} stacks, binary holds {}",
            meta.stacks.len(),
            values.len()
        )));
    }

    // Initializer draws are immediately overwritten by import.
    let mut dummy = rng::stream(0, &[rng::tag::INIT]);
    let mut stacks = Vec::with_capacity(meta.stacks.len());
    let mut offset = 0usize;
    for (desc, &count) in meta.stacks.iter().zip(&meta.param_counts) {
        let mut stack = Stack::from_specs(&desc.layers, &mut dummy)?;
        if stack.param_count() != count {
            return Err(Error::Format(format!(
                "checkpoint {name}: stack {} expects {} parameters, descriptor says {count}",
                desc.name,
                stack.param_count()
            )));
        }
        let mut blocks = Vec::new();
        for size in stack.export_blocks().iter().map(Vec::len) {
            blocks.push(values[offset..offset + size].to_vec());
            offset += size;
        }
        stack.import_blocks(&blocks)?;
        stacks.push(stack);
    }
    Ok((meta, stacks))
}
