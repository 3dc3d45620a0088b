use serde::Serialize;

use crate::error::{Error, Result};

/// Per-epoch linear warmup followed by single-cycle cosine annealing.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_epochs >= self.total_epochs {
            return Err(Error::Optim(format!(
                "warmup_epochs ({}) must be below total_epochs ({})",
                self.warmup_epochs, self.total_epochs
            )));
        }
        if !(self.min_lr >= 0.0 && self.min_lr <= self.base_lr) {
            return Err(Error::Optim(format!(
                "need 0 <= min_lr ({}) <= base_lr ({})",
                self.min_lr, self.base_lr
            )));
        }
        Ok(())
    }

    /// Learning rate of `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        self.validate()?;
        if epoch >= self.total_epochs {
            return Err(Error::Optim(format!(
                "epoch {epoch} outside schedule of {} epochs",
                self.total_epochs
            )));
        }
        if epoch < self.warmup_epochs {
            return Ok(self.base_lr * ((epoch + 1) as f64 / self.warmup_epochs as f64));
        }
        let span = self.total_epochs - self.warmup_epochs - 1;
        // a single cosine epoch is also the final one
        let progress = if span == 0 {
            1.0
        } else {
            (epoch - self.warmup_epochs) as f64 / span as f64
        };
        Ok(self.cosine(progress))
    }

    /// The annealing curve at fractional `progress` in `[0, 1]`.
    ///
    /// Written as a convex combination of `base_lr` and `min_lr`, which is
    /// algebraically `min + (base - min) * (1 + cos(pi p)) / 2` but lands
    /// exactly on both endpoints and the midpoint in floating point.
    pub fn cosine(&self, progress: f64) -> f64 {
        let c = (std::f64::consts::PI * progress).cos();
        self.base_lr * (0.5 * (1.0 + c)) + self.min_lr * (0.5 * (1.0 - c))
    }
}
