use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Learning-rate schedule, evaluated per optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Schedule {
    /// Linear warmup from 0 to `base_lr` over `warmup_steps`, then cosine
    /// decay reaching exactly 0 at step `total_steps - 1`.
    Pretrain {
        base_lr: f64,
        warmup_steps: usize,
        total_steps: usize,
    },
    /// Epoch-based: linear warmup from 0 to `peak_lr` over `warmup_epochs`,
    /// then cosine from `peak_lr` to `final_lr`, reached at the start of the
    /// final epoch and held through it. The epoch position of step `s` is
    /// `s / steps_per_epoch`.
    Finetune {
        peak_lr: f64,
        final_lr: f64,
        warmup_epochs: usize,
        total_epochs: usize,
        steps_per_epoch: usize,
    },
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Schedule::Pretrain {
                base_lr,
                warmup_steps,
                total_steps,
            } => {
                if !(base_lr.is_finite() && base_lr >= 0.0) {
                    return Err(Error::Config(format!("base_lr must be non-negative, got {base_lr}")));
                }
                if total_steps == 0 {
                    return Err(Error::Config("schedule has no steps".into()));
                }
                if warmup_steps >= total_steps {
                    return Err(Error::Config(format!(
                        "warmup of {warmup_steps} steps does not fit in {total_steps} steps"
                    )));
                }
            }
            Schedule::Finetune {
                peak_lr,
                final_lr,
                warmup_epochs,
                total_epochs,
                steps_per_epoch,
            } => {
                if !(peak_lr.is_finite() && final_lr.is_finite() && peak_lr >= 0.0 && final_lr >= 0.0) {
                    return Err(Error::Config("learning rates must be non-negative".into()));
                }
                if total_epochs == 0 || steps_per_epoch == 0 {
                    return Err(Error::Config("schedule has no steps".into()));
                }
                if warmup_epochs > total_epochs {
                    return Err(Error::Config(format!(
                        "warmup_epochs {warmup_epochs} exceeds total_epochs {total_epochs}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        match *self {
            Schedule::Pretrain { total_steps, .. } => total_steps,
            Schedule::Finetune {
                total_epochs,
                steps_per_epoch,
                ..
            } => total_epochs * steps_per_epoch,
        }
    }
}

fn cosine(from: f64, to: f64, progress: f64) -> f64 {
    let p = progress.clamp(0.0, 1.0);
    to + (from - to) * 0.5 * (1.0 + (PI * p).cos())
}

/// Learning rate at optimizer step `step` (0-based). Steps past the end of
/// the schedule get its terminal value.
pub fn lr_at(step: usize, schedule: &Schedule) -> f64 {
    match *schedule {
        Schedule::Pretrain {
            base_lr,
            warmup_steps,
            total_steps,
        } => {
            let last = total_steps.saturating_sub(1);
            if step >= last {
                return 0.0;
            }
            if step < warmup_steps {
                return base_lr * step as f64 / warmup_steps as f64;
            }
            let span = (last - warmup_steps) as f64;
            cosine(base_lr, 0.0, (step - warmup_steps) as f64 / span)
        }
        Schedule::Finetune {
            peak_lr,
            final_lr,
            warmup_epochs,
            total_epochs,
            steps_per_epoch,
        } => {
            let e = step as f64 / steps_per_epoch as f64;
            let last = total_epochs.saturating_sub(1);
            let w = warmup_epochs as f64;
            if e < w {
                return peak_lr * e / w;
            }
            if e >= last as f64 || last <= warmup_epochs {
                return final_lr;
            }
            cosine(peak_lr, final_lr, (e - w) / (last - warmup_epochs) as f64)
        }
    }
}
