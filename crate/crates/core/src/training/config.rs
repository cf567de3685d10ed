use serde::{Deserialize, Serialize};

use crate::error::{CloverError, Result};
use crate::masking::TextMaskStrategy;

/// Pre-training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Tri-modal alignment, semantic text masking, ranking and focal MLM.
    #[default]
    Clover,
    /// Tri-modal alignment with random text masking and cross-entropy MLM; no ranking.
    Tma,
    /// Symmetric InfoNCE on complete pairs plus cross-entropy MLM with random masking.
    Baseline,
}

impl Objective {
    pub fn text_strategy(self) -> TextMaskStrategy {
        match self {
            Objective::Clover => TextMaskStrategy::Semantic,
            Objective::Tma | Objective::Baseline => TextMaskStrategy::Random,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    Float32,
    Float64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub peak_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub objective: Objective,
    pub precision: Precision,
    /// Extra checkpoint every this many steps; 0 keeps only per-epoch checkpoints.
    pub checkpoint_every: usize,
    /// Stop (with a checkpoint) after this global step, as if interrupted.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            epochs: 10,
            warmup_epochs: 1,
            peak_lr: 3e-4,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-8,
            weight_decay: 0.005,
            seed: 0,
            objective: Objective::Clover,
            precision: Precision::Float32,
            checkpoint_every: 0,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CloverError::Config(m));
        if self.batch_size < 2 {
            return bad(format!(
                "batch_size {} must be at least 2 for contrastive training",
                self.batch_size
            ));
        }
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.warmup_epochs >= self.epochs {
            return bad(format!(
                "warmup_epochs {} must be below epochs {}",
                self.warmup_epochs, self.epochs
            ));
        }
        if !(self.peak_lr > 0.0) {
            return bad("peak_lr must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)".into());
        }
        if !(self.weight_decay >= 0.0) || !(self.adam_eps > 0.0) {
            return bad("weight_decay must be non-negative and adam_eps positive".into());
        }
        Ok(())
    }
}
