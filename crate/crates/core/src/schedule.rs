//! Warmup + cosine (or constant) scalar schedules.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScheduleError {
    #[error("warmup {warmup} exceeds total steps {total}")]
    WarmupTooLong { warmup: u64, total: u64 },
    #[error("non-finite schedule endpoint")]
    NonFinite,
    #[error("step {step} outside schedule range 0..={total}")]
    StepOutOfRange { step: u64, total: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Cosine,
    Constant,
}

/// Linear ramp 0 -> base over `warmup` steps, then either a cosine from
/// base to `final_value` or a constant hold at base.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub base: f64,
    pub final_value: f64,
    pub warmup: u64,
    pub total: u64,
}

impl ScheduleSpec {
    pub fn cosine(base: f64, final_value: f64, warmup: u64, total: u64) -> Result<ScheduleSpec, ScheduleError> {
        ScheduleSpec { kind: ScheduleKind::Cosine, base, final_value, warmup, total }.validated()
    }

    pub fn constant(base: f64, warmup: u64, total: u64) -> Result<ScheduleSpec, ScheduleError> {
        ScheduleSpec { kind: ScheduleKind::Constant, base, final_value: base, warmup, total }.validated()
    }

    pub fn validated(self) -> Result<ScheduleSpec, ScheduleError> {
        if self.warmup > self.total {
            return Err(ScheduleError::WarmupTooLong { warmup: self.warmup, total: self.total });
        }
        if !self.base.is_finite() || !self.final_value.is_finite() {
            return Err(ScheduleError::NonFinite);
        }
        Ok(self)
    }

    /// Value at `step`, for 0 <= step <= total. Boundary steps return the
    /// stored endpoints exactly (no trig round-off).
    pub fn value(&self, step: u64) -> Result<f64, ScheduleError> {
        if step > self.total {
            return Err(ScheduleError::StepOutOfRange { step, total: self.total });
        }
        if step < self.warmup {
            return Ok(self.base * step as f64 / self.warmup as f64);
        }
        if step == self.warmup {
            return Ok(self.base);
        }
        match self.kind {
            ScheduleKind::Constant => Ok(self.base),
            ScheduleKind::Cosine => {
                if step == self.total {
                    return Ok(self.final_value);
                }
                let progress = (step - self.warmup) as f64 / (self.total - self.warmup) as f64;
                let w = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
                Ok(self.final_value + (self.base - self.final_value) * w)
            }
        }
    }
}
