use std::path::PathBuf;

use serde::Serialize;

use crate::augment::AugmentationProfile;
use crate::error::{Error, Result};
use crate::losses::{Alpha, DistillParams, FocalParams};
use crate::model::Architecture;
use crate::optim::{AdamConfig, LrSchedule};

/// How focal-loss class weights are obtained.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaSpec {
    Uniform,
    /// Inverse class frequency of the training split, mean 1.
    InverseFrequency,
    Explicit(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LossChoice {
    Focal { alpha: AlphaSpec, gamma: f64 },
    CrossEntropy,
}

impl LossChoice {
    pub fn name(&self) -> &'static str {
        match self {
            LossChoice::Focal { .. } => "focal",
            LossChoice::CrossEntropy => "ce",
        }
    }

    /// Focal parameters with class weights resolved against training class
    /// counts; `None` for cross-entropy.
    pub fn resolve(&self, class_counts: &[usize]) -> Result<Option<FocalParams>> {
        Ok(match self {
            LossChoice::CrossEntropy => None,
            LossChoice::Focal { alpha, gamma } => {
                let alpha = match alpha {
                    AlphaSpec::Uniform => Alpha::Uniform,
                    AlphaSpec::InverseFrequency => Alpha::PerClass(crate::losses::inverse_frequency_alpha(class_counts)?),
                    AlphaSpec::Explicit(v) => Alpha::PerClass(v.clone()),
                };
                let params = FocalParams { alpha, gamma: *gamma };
                params.alpha_vector(class_counts.len())?;
                Some(params)
            }
        })
    }
}

/// Every setting of one supervised training run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainRunConfig {
    pub model: Architecture,
    pub profile_name: String,
    pub augment: AugmentationProfile,
    /// When false, training inputs go through the validation transform.
    pub heavy_augmentation: bool,
    pub loss: LossChoice,
    /// Learning rate of the head (or of every parameter when unified).
    pub base_lr: f64,
    /// Backbone learning rate; `None` means one unified group.
    pub backbone_lr: Option<f64>,
    pub weight_decay: f64,
    pub min_lr: f64,
    pub warmup_epochs: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub accumulation_steps: usize,
    pub swa: bool,
    pub swa_start_fraction: f64,
    pub eval_batch_size: usize,
    pub adam: AdamConfig,
    pub tta: bool,
    pub seed: u64,
}

impl TrainRunConfig {
    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base_lr: self.base_lr,
            min_lr: self.min_lr,
            warmup_epochs: self.warmup_epochs,
            total_epochs: self.max_epochs,
        }
    }

    /// Backbone learning rate relative to the base rate.
    pub fn backbone_ratio(&self) -> Option<f64> {
        self.backbone_lr.map(|b| b / self.base_lr)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.schedule().validate()?;
        self.augment.validate()?;
        if !(self.base_lr > 0.0) {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if let Some(b) = self.backbone_lr {
            if !(b > 0.0) {
                return bad(format!("backbone_lr must be positive, got {b}"));
            }
        }
        if self.batch_size == 0 || self.accumulation_steps == 0 || self.eval_batch_size == 0 {
            return bad("batch sizes and accumulation steps must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.swa_start_fraction) {
            return bad(format!("swa_start_fraction {} outside [0, 1]", self.swa_start_fraction));
        }
        if self.model.input_size() != self.augment.crop_size {
            return bad(format!(
                "model input size {} differs from augmentation crop size {}",
                self.model.input_size(),
                self.augment.crop_size
            ));
        }
        if let LossChoice::Focal { gamma, .. } = &self.loss {
            if !(*gamma >= 0.0) {
                return bad(format!("focal gamma must be nonnegative, got {gamma}"));
            }
        }
        Ok(())
    }
}

/// Student training plus distillation weights and the teacher source.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DistillRunConfig {
    pub student: TrainRunConfig,
    pub distill: DistillParams,
    pub teacher_checkpoint: Option<PathBuf>,
}
