//! Data streams, AdamW, the learning-rate schedule, checkpoints and the training loop.

mod checkpoint;
mod data;
mod metrics;
mod optim;
mod run;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RawTensor};
pub use data::{DataConfig, DataStream, Task};
pub use metrics::{read_metrics, MetricRecord, Split};
pub use optim::{adamw_step, clip_global_norm, global_grad_norm, OptimizerState};
pub use run::{evaluate, train, EvalReport, RunPaths, TrainOutcome, TrainState};

use serde::{Deserialize, Serialize};

use crate::autodiff::DType;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    /// Fraction of `total_steps` spent warming up linearly from 0.
    pub warmup_fraction: f64,
    /// Hold `lr` after warmup instead of decaying linearly to 0.
    pub constant_after_warmup: bool,
    pub total_steps: u64,
    /// Sequences per step.
    pub batch_size: usize,
    pub seq_len: usize,
    pub clip_norm: f64,
    pub seed: u64,
    pub precision: DType,
    /// Validate every this many steps (0: only after the last step).
    pub eval_interval: u64,
    /// Held-out sequences per evaluation; 0 uses every validation window.
    pub eval_sequences: usize,
    /// Write `last.ckpt` every this many steps (0: never mid-run).
    pub checkpoint_interval: u64,
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            weight_decay: 0.01,
            betas: [0.9, 0.95],
            eps: 1e-8,
            warmup_fraction: 0.10,
            constant_after_warmup: false,
            total_steps: 1000,
            batch_size: 8,
            seq_len: 64,
            clip_norm: 1.0,
            seed: 0,
            precision: DType::F64,
            eval_interval: 100,
            eval_sequences: 64,
            checkpoint_interval: 500,
            val_fraction: 0.02,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return bad(format!("warmup_fraction must lie in (0, 1), got {}", self.warmup_fraction));
        }
        if !(self.clip_norm > 0.0) {
            return bad(format!("clip_norm must be positive, got {}", self.clip_norm));
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) || !(self.eps > 0.0) {
            return bad("lr and weight_decay must be nonnegative and eps positive".into());
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return bad(format!("betas must lie in [0, 1), got {:?}", self.betas));
        }
        if self.total_steps == 0 || self.batch_size == 0 || self.seq_len == 0 {
            return bad("total_steps, batch_size and seq_len must be positive".into());
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad(format!("val_fraction must lie in (0, 1), got {}", self.val_fraction));
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> u64 {
        (self.warmup_fraction * self.total_steps as f64).round() as u64
    }
}

/// Learning rate for update number `step` (1-based; `step = total_steps` is the last).
///
/// Rises linearly from 0 at step 0 to `lr` at the end of warmup, then falls
/// linearly to 0 at `total_steps`, or stays at `lr` with `constant_after_warmup`.
pub fn lr_at(config: &TrainConfig, step: u64) -> f64 {
    let total = config.total_steps;
    let step = step.min(total);
    let warm = config.warmup_steps();
    if step < warm {
        config.lr * step as f64 / warm as f64
    } else if config.constant_after_warmup || total == warm {
        config.lr
    } else {
        config.lr * (total - step) as f64 / (total - warm) as f64
    }
}
