use num_rational::Ratio;
use serde::Serialize;

use crate::error::{Error, Result};

/// K×K counts; rows are true classes, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(k: usize) -> Self {
        Self {
            counts: vec![vec![0; k]; k],
        }
    }

    pub fn k(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn add(&mut self, truth: usize, pred: usize) -> Result<()> {
        let k = self.k();
        if truth >= k || pred >= k {
            return Err(Error::Eval(format!(
                "class pair ({truth}, {pred}) outside a {k}-class confusion matrix"
            )));
        }
        self.counts[truth][pred] += 1;
        Ok(())
    }

    /// Entrywise sum; order of merging never matters.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k() != self.k() {
            return Err(Error::Eval("cannot merge confusion matrices of different size".into()));
        }
        for (a, b) in self.counts.iter_mut().flatten().zip(other.counts.iter().flatten()) {
            *a += b;
        }
        Ok(())
    }
}

pub fn confusion(preds: &[usize], labels: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(Error::Eval(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let mut cm = ConfusionMatrix::zeros(k);
    for (&p, &t) in preds.iter().zip(labels) {
        cm.add(t, p)?;
    }
    Ok(cm)
}

/// Exact fraction `num / den`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Fraction {
    pub num: u128,
    pub den: u128,
}

impl Fraction {
    fn from_ratio(r: Ratio<u128>) -> Self {
        Self {
            num: *r.numer(),
            den: *r.denom(),
        }
    }

    pub fn value(&self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

/// One-vs-rest rates of one class; `None` when the denominator is zero.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassRates {
    pub sensitivity: Option<Fraction>,
    pub specificity: Option<Fraction>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub exact_accuracy: Fraction,
    pub exact_sensitivity: Option<Fraction>,
    pub exact_specificity: Option<Fraction>,
    pub per_class: Vec<ClassRates>,
    /// Classes left out of the sensitivity average (no true samples).
    pub sensitivity_excluded: Vec<usize>,
    /// Classes left out of the specificity average (no negatives).
    pub specificity_excluded: Vec<usize>,
}

fn macro_mean(rates: &[Ratio<u128>]) -> Option<Ratio<u128>> {
    if rates.is_empty() {
        return None;
    }
    let sum = rates.iter().fold(Ratio::from_integer(0), |a, r| a + r);
    Some(sum / Ratio::from_integer(rates.len() as u128))
}

/// Accuracy plus macro-averaged one-vs-rest sensitivity and specificity.
pub fn metrics_from_confusion(cm: &ConfusionMatrix) -> Result<Metrics> {
    let n = cm.total() as u128;
    if n == 0 {
        return Err(Error::Eval("empty confusion matrix".into()));
    }
    let k = cm.k();
    let trace: u128 = (0..k).map(|i| cm.counts[i][i] as u128).sum();
    let mut per_class = Vec::with_capacity(k);
    let (mut sens, mut spec) = (Vec::new(), Vec::new());
    let (mut sens_out, mut spec_out) = (Vec::new(), Vec::new());
    for c in 0..k {
        let tp = cm.counts[c][c] as u128;
        let positives: u128 = cm.counts[c].iter().map(|v| *v as u128).sum();
        let predicted: u128 = (0..k).map(|r| cm.counts[r][c] as u128).sum();
        let fp = predicted - tp;
        let negatives = n - positives;
        let tn = negatives - fp;
        let s = (positives > 0).then(|| Ratio::new(tp, positives));
        let sp = (negatives > 0).then(|| Ratio::new(tn, negatives));
        match s {
            Some(r) => sens.push(r),
            None => sens_out.push(c),
        }
        match sp {
            Some(r) => spec.push(r),
            None => spec_out.push(c),
        }
        per_class.push(ClassRates {
            sensitivity: s.map(Fraction::from_ratio),
            specificity: sp.map(Fraction::from_ratio),
        });
    }
    let exact_accuracy = Fraction::from_ratio(Ratio::new(trace, n));
    let exact_sensitivity = macro_mean(&sens).map(Fraction::from_ratio);
    let exact_specificity = macro_mean(&spec).map(Fraction::from_ratio);
    Ok(Metrics {
        accuracy: exact_accuracy.value(),
        sensitivity: exact_sensitivity.map_or(f64::NAN, |f| f.value()),
        specificity: exact_specificity.map_or(f64::NAN, |f| f.value()),
        exact_accuracy,
        exact_sensitivity,
        exact_specificity,
        per_class,
        sensitivity_excluded: sens_out,
        specificity_excluded: spec_out,
    })
}
