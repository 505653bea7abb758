//! Linear warmup followed by cosine decay, evaluated per optimizer step.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleSpec {
    pub start_lr: f64,
    pub peak_lr: f64,
    pub end_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub steps_per_epoch: usize,
}

impl ScheduleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_epochs > self.total_epochs {
            return Err(Error::Config(alloc::format!(
                "warmup_epoch {} exceeds epochs {}",
                self.warmup_epochs, self.total_epochs
            )));
        }
        for (name, v) in [
            ("start_learning_rate", self.start_lr),
            ("learning_rate", self.peak_lr),
            ("end_learning_rate", self.end_lr),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(alloc::format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> usize {
        self.warmup_epochs * self.steps_per_epoch
    }

    pub fn total_steps(&self) -> usize {
        self.total_epochs * self.steps_per_epoch
    }
}

/// Learning rate for `step` (0-based). Steps past the end return `end_lr`.
///
/// Both phases are written as convex combinations so the anchors
/// (`start_lr` at 0, `peak_lr` at the end of warmup, `end_lr` at the last
/// step) come out exactly.
pub fn lr_at_step(sched: &ScheduleSpec, step: usize) -> f64 {
    let warm = sched.warmup_steps();
    let total = sched.total_steps();
    if step >= total && total > warm {
        return sched.end_lr;
    }
    if step < warm {
        let f = step as f64 / warm as f64;
        return sched.start_lr * (1.0 - f) + sched.peak_lr * f;
    }
    if total <= warm {
        return sched.peak_lr;
    }
    let u = (step - warm) as f64 / (total - warm) as f64;
    let w = 0.5 * (1.0 + libm::cos(core::f64::consts::PI * u));
    sched.peak_lr * w + sched.end_lr * (1.0 - w)
}
