use octdistill_autodiff::Tensor;
use serde::Serialize;

use super::metrics::{confusion, metrics_from_confusion, ConfusionMatrix, Metrics};
use crate::augment::{tta_variants, val_pipeline, AugmentationProfile};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;

/// Anything that maps an `[N, 3, S, S]` batch to `[N, K]` logits.
pub trait Classifier {
    fn num_classes(&self) -> usize;
    fn logits(&self, batch: &Tensor) -> Result<Tensor>;
}

impl Classifier for Model {
    fn num_classes(&self) -> usize {
        Model::num_classes(self)
    }

    fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        self.infer(batch)
    }
}

/// Stacks equally shaped tensors along a new leading axis.
pub fn stack(items: &[Tensor]) -> Result<Tensor> {
    let first = items
        .first()
        .ok_or_else(|| Error::Eval("cannot stack an empty list".into()))?;
    let mut shape = vec![items.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(first.numel() * items.len());
    for t in items {
        if t.shape() != first.shape() {
            return Err(Error::Eval(format!(
                "cannot stack shapes {:?} and {:?}",
                first.shape(),
                t.shape()
            )));
        }
        data.extend_from_slice(t.data());
    }
    Ok(Tensor::new(shape, data)?)
}

/// Row-wise mean cross-entropy of logits against labels, in f64.
pub fn mean_cross_entropy(rows: &[Vec<f64>], labels: &[usize]) -> f64 {
    let total: f64 = rows
        .iter()
        .zip(labels)
        .map(|(row, &y)| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lse - row[y]
        })
        .sum();
    total / rows.len().max(1) as f64
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, v)| if *v > best.1 { (i, *v) } else { best })
        .0
}

/// Predictions and metrics over a record subset.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalOutput {
    pub confusion: ConfusionMatrix,
    pub metrics: Metrics,
    pub loss: f64,
    pub predictions: Vec<usize>,
    pub tta: bool,
}

fn finish(rows: Vec<Vec<f64>>, labels: Vec<usize>, k: usize, tta: bool) -> Result<EvalOutput> {
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Eval("model produced non-finite logits".into()));
    }
    let predictions: Vec<usize> = rows.iter().map(|r| argmax(r)).collect();
    let cm = confusion(&predictions, &labels, k)?;
    Ok(EvalOutput {
        metrics: metrics_from_confusion(&cm)?,
        confusion: cm,
        loss: mean_cross_entropy(&rows, &labels),
        predictions,
        tta,
    })
}

fn rows_of(logits: &Tensor, k: usize) -> Vec<Vec<f64>> {
    logits
        .data()
        .chunks(k)
        .map(|r| r.iter().map(|v| *v as f64).collect())
        .collect()
}

/// Single-view evaluation through the validation transform.
pub fn evaluate(
    model: &dyn Classifier,
    dataset: &Dataset,
    indices: &[usize],
    profile: &AugmentationProfile,
    batch_size: usize,
) -> Result<EvalOutput> {
    if indices.is_empty() {
        return Err(Error::Eval("nothing to evaluate".into()));
    }
    let k = model.num_classes();
    let mut rows = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(batch_size.max(1)) {
        let inputs = chunk
            .iter()
            .map(|&i| val_pipeline(&dataset.images[i], profile))
            .collect::<Result<Vec<_>>>()?;
        rows.extend(rows_of(&model.logits(&stack(&inputs)?)?, k));
    }
    let labels = indices.iter().map(|&i| dataset.label(i)).collect();
    finish(rows, labels, k, false)
}

/// Five-view evaluation: per sample the logits of every variant are
/// averaged before the argmax.
pub fn tta_evaluate(
    model: &dyn Classifier,
    dataset: &Dataset,
    indices: &[usize],
    profile: &AugmentationProfile,
) -> Result<EvalOutput> {
    if indices.is_empty() {
        return Err(Error::Eval("nothing to evaluate".into()));
    }
    let k = model.num_classes();
    let mut rows = Vec::with_capacity(indices.len());
    for &i in indices {
        let views = tta_variants(&dataset.images[i], profile)?;
        let logits = rows_of(&model.logits(&stack(&views)?)?, k);
        let n = logits.len() as f64;
        let mean: Vec<f64> = (0..k).map(|c| logits.iter().map(|r| r[c]).sum::<f64>() / n).collect();
        rows.push(mean);
    }
    let labels = indices.iter().map(|&i| dataset.label(i)).collect();
    finish(rows, labels, k, true)
}
