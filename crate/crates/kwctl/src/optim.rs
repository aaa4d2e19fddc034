//! SGD with momentum and weight decay, plus cosine / step learning-rate
//! schedules.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use kw_core::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Anneal to zero over the whole run, per optimizer step.
    Cosine,
    /// Cosine with a linear ramp over the first `warmup_steps` steps; keeps
    /// the early temperature-annealing phase from taking full-size steps.
    WarmupCosine { warmup_steps: usize },
    /// Multiply by `gamma` every `step_size_epochs` epochs.
    Step { step_size_epochs: usize, gamma: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("lr", self.lr),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if let LrSchedule::Step { step_size_epochs, gamma } = self.schedule {
            if step_size_epochs == 0 || !gamma.is_finite() || gamma <= 0.0 {
                return Err("step schedule needs step_size_epochs > 0 and gamma > 0".into());
            }
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize, total_steps: usize, epoch: usize) -> f64 {
        let cosine = |lr: f64| {
            if total_steps == 0 {
                lr
            } else {
                lr * 0.5 * (1.0 + (PI * step as f64 / total_steps as f64).cos())
            }
        };
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => cosine(self.lr),
            LrSchedule::WarmupCosine { warmup_steps } => {
                let ramp = if warmup_steps == 0 {
                    1.0
                } else {
                    ((step + 1) as f64 / warmup_steps as f64).min(1.0)
                };
                cosine(self.lr * ramp)
            }
            LrSchedule::Step { step_size_epochs, gamma } => {
                self.lr * gamma.powi((epoch / step_size_epochs) as i32)
            }
        }
    }
}

/// Momentum state keyed by parameter name (deterministic iteration order).
pub struct Sgd {
    pub config: OptimizerConfig,
    pub buffers: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(config: OptimizerConfig) -> Self {
        Sgd { config, buffers: BTreeMap::new() }
    }

    /// `v = momentum * v + g + weight_decay * p; p -= lr * v`.
    pub fn update(&mut self, name: &str, param: &mut Tensor, grad: &Tensor, lr: f64) {
        let buf = self
            .buffers
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(param.shape()));
        let mu = self.config.momentum;
        let wd = self.config.weight_decay;
        for ((p, v), g) in param
            .data_mut()
            .iter_mut()
            .zip(buf.data_mut())
            .zip(grad.data())
        {
            *v = mu * *v + g + wd * *p;
            *p -= lr * *v;
        }
    }
}
