use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-epoch learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant { base: f64 },
    /// `base * factor^floor(epoch / period)`.
    Step { base: f64, factor: f64, period: usize },
    /// Linear ramp `base * (epoch + 1) / warmup`, then half-cosine decay to 0
    /// at `epoch == total`.
    WarmupCosine { base: f64, warmup: usize, total: usize },
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        let base = match *self {
            LrSchedule::Constant { base } => base,
            LrSchedule::Step { base, period, .. } => {
                if period == 0 {
                    return Err(Error::Config("step schedule period must be positive".into()));
                }
                base
            }
            LrSchedule::WarmupCosine { base, warmup, total } => {
                if warmup >= total {
                    return Err(Error::Config(format!(
                        "warmup epochs ({warmup}) must be fewer than total epochs ({total})"
                    )));
                }
                base
            }
        };
        if !(base > 0.0) {
            return Err(Error::Config(format!("base learning rate {base} must be positive")));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match *self {
            LrSchedule::Constant { base } => base,
            LrSchedule::Step { base, factor, period } => {
                base * factor.powi((epoch / period.max(1)) as i32)
            }
            LrSchedule::WarmupCosine { base, warmup, total } => {
                if epoch < warmup {
                    base * (epoch + 1) as f64 / warmup as f64
                } else {
                    let span = total.saturating_sub(warmup).max(1) as f64;
                    let progress = ((epoch - warmup) as f64 / span).min(1.0);
                    base * 0.5 * (1.0 + (PI * progress).cos())
                }
            }
        }
    }
}
