//! Cross-entropy, focal loss and the temperature-scaled distillation loss.

use octdistill_autodiff::{Element, Graph, Var};
use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Alpha {
    Uniform,
    PerClass(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FocalParams {
    pub alpha: Alpha,
    pub gamma: f64,
}

impl FocalParams {
    pub fn alpha_vector(&self, num_classes: usize) -> Result<Vec<f64>> {
        let v = match &self.alpha {
            Alpha::Uniform => vec![1.0; num_classes],
            Alpha::PerClass(v) => v.clone(),
        };
        if v.len() != num_classes {
            return Err(Error::Config(format!(
                "focal alpha has {} entries for {num_classes} classes",
                v.len()
            )));
        }
        if v.iter().any(|a| !(*a >= 0.0)) || !(self.gamma >= 0.0) {
            return Err(Error::Config("focal alpha entries and gamma must be nonnegative".into()));
        }
        Ok(v)
    }
}

/// Inverse class frequency, normalized so the entries average to 1.
/// Classes with no samples get weight 0 before normalization.
pub fn inverse_frequency_alpha(class_counts: &[usize]) -> Result<Vec<f64>> {
    let raw: Vec<f64> = class_counts
        .iter()
        .map(|c| if *c == 0 { 0.0 } else { 1.0 / *c as f64 })
        .collect();
    let mean = raw.iter().sum::<f64>() / raw.len().max(1) as f64;
    if mean == 0.0 {
        return Err(Error::Data("cannot weight classes of an empty training set".into()));
    }
    Ok(raw.iter().map(|r| r / mean).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DistillParams {
    pub temperature: f64,
    pub alpha_soft: f64,
    pub beta_hard: f64,
}

impl Default for DistillParams {
    fn default() -> Self {
        Self {
            temperature: 4.0,
            alpha_soft: 0.7,
            beta_hard: 0.3,
        }
    }
}

impl DistillParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if !(self.alpha_soft >= 0.0 && self.beta_hard >= 0.0) {
            return Err(Error::Config("alpha_soft and beta_hard must be nonnegative".into()));
        }
        Ok(())
    }

    /// `beta * ce + alpha * T^2 * kl`, the single definition of the total.
    pub fn combine(&self, ce: f64, kl: f64) -> f64 {
        self.beta_hard * ce + self.alpha_soft * self.temperature * self.temperature * kl
    }
}

pub fn cross_entropy<F: Element>(g: &mut Graph<F>, logits: Var, labels: &[usize]) -> Result<Var> {
    Ok(g.cross_entropy(logits, labels)?)
}

pub fn focal_loss<F: Element>(g: &mut Graph<F>, logits: Var, labels: &[usize], params: &FocalParams) -> Result<Var> {
    let k = g.shape(logits).get(1).copied().unwrap_or(0);
    let alpha = params.alpha_vector(k)?;
    Ok(g.focal_loss(logits, labels, &alpha, params.gamma)?)
}

/// Loss value together with its 64-bit components.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct KdBreakdown {
    pub ce: f64,
    pub kl: f64,
    pub total: f64,
}

pub struct KdLoss {
    pub loss: Var,
    pub breakdown: KdBreakdown,
}

/// `beta * CE(student, labels) + alpha * T^2 * KL(p_teacher || p_student)`.
/// The teacher logits are read as constants.
pub fn kd_combined_loss<F: Element>(
    g: &mut Graph<F>,
    student_logits: Var,
    teacher_logits: Var,
    labels: &[usize],
    params: &DistillParams,
) -> Result<KdLoss> {
    params.validate()?;
    if g.shape(student_logits) != g.shape(teacher_logits) {
        return Err(Error::Training(format!(
            "student logits {:?} and teacher logits {:?} differ in shape",
            g.shape(student_logits),
            g.shape(teacher_logits)
        )));
    }
    let ce = g.cross_entropy(student_logits, labels)?;
    let kl = g.softened_kl(student_logits, teacher_logits, params.temperature)?;
    let ce_value = g.loss_value_f64(ce).expect("fused loss");
    let kl_value = g.loss_value_f64(kl).expect("fused loss");
    let t2 = params.temperature * params.temperature;
    let hard = g.scale(ce, F::of(params.beta_hard))?;
    let soft = g.scale(kl, F::of(params.alpha_soft * t2))?;
    let loss = g.add(hard, soft)?;
    Ok(KdLoss {
        loss,
        breakdown: KdBreakdown {
            ce: ce_value,
            kl: kl_value,
            total: params.combine(ce_value, kl_value),
        },
    })
}
