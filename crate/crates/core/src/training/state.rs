use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::Precision;
use super::optim::AdamW;
use crate::config::RunConfig;
use crate::data::QaMode;
use crate::encoders::{CheckpointFile, CloverModel, ModelConfig, ParamStore};
use crate::error::{CloverError, Result};
use crate::substrate::{Real, Rng, RngState};

const PARAM: &str = "param/";
const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";
const ORDER_STREAM: u64 = 0x0D3E;

/// Metadata stored alongside the tensors of a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    /// `pretrain`, `finetune-retrieval` or `finetune-vqa`.
    pub kind: String,
    /// Completed optimizer steps.
    pub step: usize,
    pub epoch: usize,
    pub precision: Precision,
    pub model: ModelConfig,
    pub run: RunConfig,
    /// Data-order generator for the epoch in progress.
    pub rng: RngState,
    pub adam_steps: BTreeMap<String, u64>,
    #[serde(default)]
    pub vqa_mode: Option<QaMode>,
}

/// Shuffled training order for an epoch, and the generator state after shuffling.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> (Vec<usize>, RngState) {
    let mut rng = Rng::derive(seed, &[ORDER_STREAM, epoch as u64]);
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    (order, rng.state())
}

pub fn save_checkpoint<T: Real>(
    path: &Path,
    model: &CloverModel<T>,
    opt: &AdamW<T>,
    meta: &CheckpointMeta,
) -> Result<()> {
    let mut file = CheckpointFile::new(model.config.digest(), serde_json::to_string(meta)?);
    for (name, t) in model.params.iter() {
        file.push(format!("{PARAM}{name}"), t);
    }
    for (name, t) in &opt.m {
        file.push(format!("{ADAM_M}{name}"), t);
    }
    for (name, t) in &opt.v {
        file.push(format!("{ADAM_V}{name}"), t);
    }
    file.save(path)
}

/// Loads model, optimizer moments and metadata, converting to precision `T`.
pub fn load_checkpoint<T: Real>(path: &Path) -> Result<(CloverModel<T>, AdamW<T>, CheckpointMeta)> {
    let file = CheckpointFile::load(path)?;
    let meta: CheckpointMeta = serde_json::from_str(&file.metadata)
        .map_err(|e| CloverError::Checkpoint(format!("{}: bad metadata: {e}", path.display())))?;
    if meta.model.digest() != file.config_digest {
        return Err(CloverError::Checkpoint(format!(
            "{}: config digest mismatch",
            path.display()
        )));
    }
    let mut params = ParamStore::default();
    for (name, t) in file.with_prefix(PARAM) {
        params.insert(name, t.to_real());
    }
    let model = CloverModel::from_params(meta.model.clone(), params)?;
    let t = &meta.run.train;
    let mut opt = AdamW::new(t.beta1, t.beta2, t.adam_eps, t.weight_decay);
    for (name, m) in file.with_prefix(ADAM_M) {
        opt.m.insert(name.to_string(), m.to_real());
    }
    for (name, v) in file.with_prefix(ADAM_V) {
        opt.v.insert(name.to_string(), v.to_real());
    }
    opt.steps = meta.adam_steps.clone();
    if opt.m.len() != opt.steps.len() || opt.v.len() != opt.steps.len() {
        return Err(CloverError::Checkpoint(format!(
            "{}: optimizer state is incomplete",
            path.display()
        )));
    }
    Ok((model, opt, meta))
}

/// Reads only the metadata of a checkpoint.
pub fn read_meta(path: &Path) -> Result<CheckpointMeta> {
    let file = CheckpointFile::load(path)?;
    serde_json::from_str(&file.metadata)
        .map_err(|e| CloverError::Checkpoint(format!("{}: bad metadata: {e}", path.display())))
}

pub fn load_model<T: Real>(path: &Path) -> Result<CloverModel<T>> {
    load_checkpoint(path).map(|(m, _, _)| m)
}
