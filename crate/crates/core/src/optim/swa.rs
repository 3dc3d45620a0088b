use indexmap::IndexMap;
use octdistill_autodiff::Tensor;

use crate::error::{Error, Result};

/// Running arithmetic mean of parameter snapshots, kept in f64.
#[derive(Clone, Debug, Default)]
pub struct SwaState {
    mean: IndexMap<String, (Vec<usize>, Vec<f64>)>,
    count: u64,
}

impl SwaState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    /// `mean <- mean + (w - mean) / (n + 1)`.
    pub fn update(&mut self, params: &IndexMap<String, Tensor>) -> Result<()> {
        if self.count > 0 {
            if params.len() != self.mean.len() {
                return Err(Error::Optim(format!(
                    "snapshot has {} tensors, running mean has {}",
                    params.len(),
                    self.mean.len()
                )));
            }
            for (name, t) in params {
                match self.mean.get(name) {
                    Some((shape, _)) if shape.as_slice() == t.shape() => {}
                    Some((shape, _)) => {
                        return Err(Error::Optim(format!(
                            "snapshot tensor `{name}` has shape {:?}, running mean has {shape:?}",
                            t.shape()
                        )))
                    }
                    None => return Err(Error::Optim(format!("snapshot tensor `{name}` is new"))),
                }
            }
        }
        let n1 = (self.count + 1) as f64;
        for (name, t) in params {
            let entry = self
                .mean
                .entry(name.clone())
                .or_insert_with(|| (t.shape().to_vec(), vec![0.0; t.numel()]));
            for (m, w) in entry.1.iter_mut().zip(t.data()) {
                *m += (*w as f64 - *m) / n1;
            }
        }
        self.count += 1;
        Ok(())
    }

    pub fn mean(&self) -> &IndexMap<String, (Vec<usize>, Vec<f64>)> {
        &self.mean
    }

    /// The averaged parameters, rounded to f32.
    pub fn finalize(&self) -> Result<IndexMap<String, Vec<f32>>> {
        if self.count == 0 {
            return Err(Error::Optim("no snapshots to average".into()));
        }
        Ok(self
            .mean
            .iter()
            .map(|(k, (_, v))| (k.clone(), v.iter().map(|x| *x as f32).collect()))
            .collect())
    }
}

/// First epoch (0-based) that contributes a snapshot.
pub fn swa_start_epoch(max_epochs: usize, start_fraction: f64) -> usize {
    (start_fraction * max_epochs as f64).floor() as usize
}
