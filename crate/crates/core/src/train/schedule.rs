//! Linear warmup followed by half-cosine decay.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub floor_lr: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            peak_lr: 1e-4,
            warmup_steps: 10_000,
            total_steps: 440_000,
            floor_lr: 0.0,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.warmup_steps > 0 && self.warmup_steps < self.total_steps) {
            return Err(Error::Config(format!(
                "schedule needs 0 < warmup_steps ({}) < total_steps ({})",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(self.peak_lr > 0.0 && self.floor_lr >= 0.0 && self.floor_lr <= self.peak_lr) {
            return Err(Error::Config(format!(
                "schedule needs 0 ≤ floor_lr ({}) ≤ peak_lr ({}) and peak_lr > 0",
                self.floor_lr, self.peak_lr
            )));
        }
        Ok(())
    }

    /// Same shape, stretched or shrunk to `total_steps`; warmup keeps its
    /// fraction of the run but stays within `[1, total_steps − 1]`.
    pub fn rescaled(&self, total_steps: u64) -> Self {
        let frac = self.warmup_steps as f64 / self.total_steps as f64;
        let warmup = ((total_steps as f64 * frac).round() as u64).clamp(1, total_steps.saturating_sub(1).max(1));
        Self {
            total_steps,
            warmup_steps: warmup,
            ..*self
        }
    }
}

pub fn lr_at(step: u64, cfg: &ScheduleConfig) -> Result<f64> {
    if step > cfg.total_steps {
        return Err(Error::Config(format!(
            "step {step} beyond the schedule's {} steps",
            cfg.total_steps
        )));
    }
    Ok(lr_at_time(step as f64, cfg))
}

/// The schedule as a function of real-valued training time `t ≥ 0`;
/// [`lr_at`] samples it at integer steps.
pub fn lr_at_time(t: f64, cfg: &ScheduleConfig) -> f64 {
    let warmup = cfg.warmup_steps as f64;
    if t < warmup {
        return cfg.peak_lr * t / warmup;
    }
    let progress = ((t - warmup) / (cfg.total_steps as f64 - warmup)).min(1.0);
    cfg.floor_lr + (cfg.peak_lr - cfg.floor_lr) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}
