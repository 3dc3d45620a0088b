//! AdamW, learning-rate schedule, gradient accumulation, weight averaging
//! and early stopping.

mod adamw;
mod schedule;
mod swa;

pub use adamw::{AdamConfig, AdamW, ParamGroup};
pub use schedule::LrSchedule;
pub use swa::{swa_start_epoch, SwaState};

use crate::error::{Error, Result};

/// Counts micro-batches and says when an optimizer step is due.
#[derive(Clone, Debug)]
pub struct Accumulator {
    steps: usize,
    pending: usize,
}

impl Accumulator {
    pub fn new(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Optim("accumulation_steps must be at least 1".into()));
        }
        Ok(Self { steps, pending: 0 })
    }

    /// Factor applied to each micro-batch loss before backward.
    pub fn loss_scale(&self) -> f64 {
        1.0 / self.steps as f64
    }

    /// Registers one backward pass; true when the optimizer should step.
    pub fn micro_batch_done(&mut self) -> bool {
        self.pending += 1;
        if self.pending == self.steps {
            self.pending = 0;
            true
        } else {
            false
        }
    }

    /// True if gradients from an incomplete group are waiting; resets.
    pub fn flush(&mut self) -> bool {
        std::mem::replace(&mut self.pending, 0) > 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Tracks the best (accuracy, loss) pair; higher accuracy wins, equal
/// accuracy is broken toward lower loss.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(f64, f64)>,
    best_epoch: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            best_epoch: 0,
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best(&self) -> Option<(f64, f64)> {
        self.best
    }

    /// Records the metrics of `epoch`. The returned flag says whether it is
    /// the new best.
    pub fn observe(&mut self, epoch: usize, accuracy: f64, loss: f64) -> Result<(bool, StopDecision)> {
        if !accuracy.is_finite() || !loss.is_finite() {
            return Err(Error::Training(format!(
                "non-finite validation metric at epoch {epoch} (accuracy {accuracy}, loss {loss})"
            )));
        }
        let improved = match self.best {
            None => true,
            Some((acc, l)) => accuracy > acc || (accuracy == acc && loss < l),
        };
        if improved {
            self.best = Some((accuracy, loss));
            self.best_epoch = epoch;
        }
        let stop = if epoch.saturating_sub(self.best_epoch) > self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        };
        Ok((improved, stop))
    }
}
