//! Scalar schedules for learning rate, EMA momentum and temperatures.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    Constant,
    LinearWarmup,
    Cosine,
    WarmupThenCosine,
}

/// Piecewise schedule over `0..=total_steps`.
///
/// * `Constant`: always `peak`.
/// * `LinearWarmup`: `start → peak` over `warmup_steps`, then `peak`.
/// * `Cosine`: half-cosine from `peak` to `final_value` over all steps.
/// * `WarmupThenCosine`: linear `start → peak`, then half-cosine to `final_value`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub start: f64,
    pub peak: f64,
    pub final_value: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

/// `a·(1−w) + b·w`, exact at both ends.
fn lerp(a: f64, b: f64, w: f64) -> f64 {
    a * (1.0 - w) + b * w
}

impl Schedule {
    pub fn constant(value: f64, total_steps: u64) -> Self {
        Schedule {
            kind: ScheduleKind::Constant,
            start: value,
            peak: value,
            final_value: value,
            warmup_steps: 0,
            total_steps,
        }
    }

    pub fn linear_warmup(start: f64, peak: f64, warmup_steps: u64, total_steps: u64) -> Self {
        Schedule {
            kind: ScheduleKind::LinearWarmup,
            start,
            peak,
            final_value: peak,
            warmup_steps: warmup_steps.min(total_steps),
            total_steps,
        }
    }

    pub fn cosine(peak: f64, final_value: f64, total_steps: u64) -> Self {
        Schedule {
            kind: ScheduleKind::Cosine,
            start: peak,
            peak,
            final_value,
            warmup_steps: 0,
            total_steps,
        }
    }

    pub fn warmup_cosine(
        start: f64,
        peak: f64,
        final_value: f64,
        warmup_steps: u64,
        total_steps: u64,
    ) -> Self {
        Schedule {
            kind: ScheduleKind::WarmupThenCosine,
            start,
            peak,
            final_value,
            warmup_steps: warmup_steps.min(total_steps),
            total_steps,
        }
    }

    pub fn value(&self, step: u64) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::param(format!(
                "schedule step {step} beyond total {}",
                self.total_steps
            )));
        }
        let warm = |s: u64| lerp(self.start, self.peak, s as f64 / self.warmup_steps as f64);
        let cos = |s: u64, begin: u64| {
            let span = self.total_steps - begin;
            if span == 0 {
                return self.final_value;
            }
            let progress = (s - begin) as f64 / span as f64;
            let w = 0.5 * (1.0 - (std::f64::consts::PI * progress).cos());
            lerp(self.peak, self.final_value, w)
        };
        Ok(match self.kind {
            ScheduleKind::Constant => self.peak,
            ScheduleKind::LinearWarmup if step < self.warmup_steps => warm(step),
            ScheduleKind::LinearWarmup => self.peak,
            ScheduleKind::Cosine => cos(step, 0),
            ScheduleKind::WarmupThenCosine if step < self.warmup_steps => warm(step),
            ScheduleKind::WarmupThenCosine => cos(step, self.warmup_steps),
        })
    }
}

/// Peak learning rate for a batch size under the linear scaling rule.
pub fn scaled_lr(base: f64, batch_size: usize) -> f64 {
    base * batch_size as f64 / 256.0
}
