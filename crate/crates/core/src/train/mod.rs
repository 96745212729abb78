//! Optimization and the teacher/student experiment loops.

pub mod optim;
mod trainer;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use optim::{adamw_step, cosine_lr, AdamW, OptimizerState};
pub use trainer::{
    evaluate_top1, fit, metrics_csv, read_metrics_csv, sweep_beta, sweep_csv, teacher_targets, train_student, train_teacher,
    write_metrics_csv, EpochMetrics, FitInputs, FitOutcome, FitState, Model, StudentRun, SweepRow,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_init: f32,
    pub batch_size: usize,
    pub optimizer: AdamW,
    pub seed: u64,
    /// Fraction of each class held out for best-checkpoint selection.
    pub val_fraction: f32,
    /// Run every per-sample computation serially.
    pub deterministic: bool,
    /// Worker threads for per-sample parallelism; `None` uses rayon's default.
    pub threads: Option<usize>,
    /// Update the SR generator together with the classifier.
    pub sr_fine_tune: bool,
}

impl TrainConfig {
    /// 200 epochs, lr 1e-6, batch 16.
    pub fn paper() -> Self {
        Self {
            epochs: 200,
            lr_init: 1e-6,
            batch_size: 16,
            optimizer: AdamW::default(),
            seed: 0,
            val_fraction: 0.1,
            deterministic: false,
            threads: None,
            sr_fine_tune: false,
        }
    }

    /// From-scratch desk-scale training.
    pub fn toy() -> Self {
        Self {
            epochs: 30,
            lr_init: 3e-4,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr_init > 0.0) || !self.lr_init.is_finite() {
            return Err(Error::Config(format!("lr_init must be positive, got {}", self.lr_init)));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!(
                "val_fraction must be in [0, 1), got {}",
                self.val_fraction
            )));
        }
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::Config("AdamW betas must be in [0, 1)".into()));
        }
        if !(o.eps > 0.0) || !(o.weight_decay >= 0.0) {
            return Err(Error::Config("AdamW eps must be > 0 and weight_decay ≥ 0".into()));
        }
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        Ok(())
    }
}
