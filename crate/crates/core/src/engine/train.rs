use std::path::Path;

use indexmap::IndexMap;
use octdistill_autodiff::{AutodiffError, Graph};
use serde::Serialize;

use super::config::{DistillRunConfig, LossChoice, TrainRunConfig};
use super::eval::{evaluate, stack, tta_evaluate, EvalOutput};
use crate::augment::{train_pipeline, val_pipeline};
use crate::data::{batch_order, Dataset, SplitPlan};
use crate::error::{Error, Result};
use crate::losses::{cross_entropy, focal_loss, kd_combined_loss, DistillParams};
use crate::model::{save_checkpoint, Mode, Model};
use crate::optim::{swa_start_epoch, Accumulator, AdamW, EarlyStopping, ParamGroup, StopDecision, SwaState};
use crate::seed::{self, Stream};

/// Metrics of one epoch.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub group_lrs: Vec<(String, f64)>,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub val_sensitivity: f64,
    pub val_specificity: f64,
    pub improved: bool,
    pub swa_snapshot: bool,
}

/// Distillation loss components of one micro-batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub ce: f64,
    pub kl: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Primary {
    Raw,
    Swa,
}

/// Everything a finished run reports, apart from wall-clock time.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainReport {
    pub role: String,
    pub split_hash: String,
    pub loss: String,
    pub focal_alpha: Option<Vec<f64>>,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub history: Vec<EpochRecord>,
    pub steps: Vec<StepLog>,
    pub raw_val: EvalOutput,
    pub swa_snapshots: u64,
    pub swa_val: Option<EvalOutput>,
    pub primary: Primary,
    pub test: Option<EvalOutput>,
    pub teacher_hash_before: Option<String>,
    pub teacher_hash_after: Option<String>,
    pub parameter_count: usize,
}

impl TrainReport {
    /// Validation metrics of the primary checkpoint.
    pub fn primary_val(&self) -> &EvalOutput {
        match (&self.primary, &self.swa_val) {
            (Primary::Swa, Some(v)) => v,
            _ => &self.raw_val,
        }
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub best: Model,
    pub swa: Option<Model>,
    pub report: TrainReport,
}

impl TrainOutcome {
    pub fn primary(&self) -> &Model {
        match (&self.report.primary, &self.swa) {
            (Primary::Swa, Some(m)) => m,
            _ => &self.best,
        }
    }
}

/// Optional side channels of a run.
#[derive(Default)]
pub struct RunHooks<'a> {
    /// Where `last_good.ckpt` goes if training diverges.
    pub out_dir: Option<&'a Path>,
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochRecord)>,
}

fn snapshot(model: &Model) -> IndexMap<String, Vec<f32>> {
    model.params().iter().map(|(k, t)| (k.clone(), t.data().to_vec())).collect()
}

fn with_values(model: &Model, values: &IndexMap<String, Vec<f32>>) -> Result<Model> {
    let mut m = model.clone();
    m.load_values(values)?;
    m.zero_grads();
    m.set_mode(Mode::Eval);
    Ok(m)
}

fn class_counts(dataset: &Dataset, indices: &[usize]) -> Vec<usize> {
    let mut counts = vec![0; dataset.manifest.num_classes()];
    for &i in indices {
        counts[dataset.label(i)] += 1;
    }
    counts
}

/// Splits numeric blow-ups from other errors.
fn finite<T>(r: Result<T>) -> Result<std::result::Result<T, String>> {
    match r {
        Ok(v) => Ok(Ok(v)),
        Err(Error::Autodiff(e @ AutodiffError::NonFinite { .. })) => Ok(Err(e.to_string())),
        Err(e) => Err(e),
    }
}

/// One AdamW update; non-finite gradients or weights count as divergence.
fn optimizer_step(optimizer: &mut AdamW, model: &mut Model, lr: f64) -> std::result::Result<(), String> {
    let bad_grad = model
        .params()
        .iter()
        .find(|(_, t)| t.grad().is_some_and(|g| g.iter().any(|v| !v.is_finite())));
    if let Some((name, _)) = bad_grad {
        return Err(format!("non-finite gradient in `{name}`"));
    }
    optimizer.step(model.params_mut(), lr).map_err(|e| e.to_string())?;
    model.zero_grads();
    match model.params().iter().find(|(_, t)| !t.all_finite()) {
        Some((name, _)) => Err(format!("non-finite weights in `{name}`")),
        None => Ok(()),
    }
}

/// Writes the last epoch-end weights to `last_good.ckpt` (when an output
/// directory is known) and returns the abort error.
fn diverged<T>(
    model: &Model,
    last_good: &IndexMap<String, Vec<f32>>,
    out_dir: Option<&Path>,
    epoch: usize,
    step: usize,
    reason: &str,
) -> Result<T> {
    let mut saved = String::new();
    if let Some(dir) = out_dir {
        let path = dir.join("last_good.ckpt");
        save_checkpoint(&with_values(model, last_good)?, &path)?;
        saved = format!("; last good checkpoint written to {}", path.display());
    }
    Err(Error::Training(format!(
        "training diverged at epoch {epoch}, step {step}: {reason}{saved}"
    )))
}

struct Teacher<'a> {
    model: &'a Model,
    params: DistillParams,
}

fn run(
    role: &str,
    cfg: &TrainRunConfig,
    dataset: &Dataset,
    split: &SplitPlan,
    teacher: Option<Teacher<'_>>,
    hooks: RunHooks<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if split.train.is_empty() || split.val.is_empty() {
        return Err(Error::Training("training and validation splits must be nonempty".into()));
    }
    let k = dataset.manifest.num_classes();
    if cfg.model.num_classes() != k {
        return Err(Error::Training(format!(
            "model predicts {} classes, dataset has {k}",
            cfg.model.num_classes()
        )));
    }
    let mut model = Model::build(cfg.model.clone(), cfg.seed)?;
    let parameter_count = model.params().values().map(|t| t.numel()).sum();
    let focal = cfg.loss.resolve(&class_counts(dataset, &split.train))?;
    let groups = ParamGroup::head_backbone(model.params().keys(), Model::is_head, cfg.backbone_ratio(), cfg.weight_decay);
    let mut optimizer = AdamW::new(groups, model.params().keys(), cfg.adam)?;
    let schedule = cfg.schedule();
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut swa = SwaState::new();
    let swa_start = swa_start_epoch(cfg.max_epochs, cfg.swa_start_fraction);
    let teacher_hash_before = teacher.as_ref().map(|t| t.model.param_hash());

    let mut history = Vec::new();
    let mut steps = Vec::new();
    let mut best_values = snapshot(&model);
    let mut last_good = best_values.clone();
    let mut stopped_early = false;
    let mut on_epoch = hooks.on_epoch;

    for epoch in 0..cfg.max_epochs {
        let lr = schedule.lr_at(epoch)?;
        model.set_mode(Mode::Train);
        model.zero_grads();
        let mut accumulator = Accumulator::new(cfg.accumulation_steps)?;
        let batches = batch_order(&split.train, cfg.batch_size, true, cfg.seed, epoch as u64)?;
        let mut loss_sum = 0.0;
        for (step, batch) in batches.iter().enumerate() {
            let inputs = batch
                .iter()
                .map(|&i| {
                    let image = &dataset.images[i];
                    if cfg.heavy_augmentation {
                        train_pipeline(image, &cfg.augment, seed::sample_seed(cfg.seed, epoch as u64, i as u64))
                    } else {
                        val_pipeline(image, &cfg.augment)
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let input = stack(&inputs)?;
            let labels: Vec<usize> = batch.iter().map(|&i| dataset.label(i)).collect();

            let mut g = Graph::<f32>::new();
            let bound = model.bind(&mut g, true);
            let x = g.constant(input.clone());
            let mut dropout_rng = seed::rng(cfg.seed, Stream::Dropout, &[epoch as u64, step as u64]);
            let logits = finite(model.forward(&mut g, &bound, x, &mut dropout_rng));
            let vars = bound.vars().to_vec();
            let logits = match logits? {
                Ok(l) => l,
                Err(reason) => return diverged(&model, &last_good, hooks.out_dir, epoch, step, &reason),
            };
            let (loss, value) = match &teacher {
                Some(t) => {
                    let soft = g.constant(t.model.infer(&input)?);
                    let kd = kd_combined_loss(&mut g, logits, soft, &labels, &t.params)?;
                    steps.push(StepLog {
                        epoch,
                        step,
                        ce: kd.breakdown.ce,
                        kl: kd.breakdown.kl,
                        total: kd.breakdown.total,
                    });
                    (kd.loss, kd.breakdown.total)
                }
                None => {
                    let loss = match &focal {
                        Some(params) => focal_loss(&mut g, logits, &labels, params)?,
                        None => cross_entropy(&mut g, logits, &labels)?,
                    };
                    (loss, g.loss_value_f64(loss).expect("fused loss"))
                }
            };
            if !value.is_finite() {
                return diverged(&model, &last_good, hooks.out_dir, epoch, step, "non-finite loss");
            }
            loss_sum += value * batch.len() as f64;
            let scaled = g.scale(loss, accumulator.loss_scale() as f32)?;
            let grads = match finite(g.backward(scaled).map_err(Error::from))? {
                Ok(grads) => grads,
                Err(reason) => return diverged(&model, &last_good, hooks.out_dir, epoch, step, &reason),
            };
            model.accumulate_grads(&grads, &vars)?;
            if accumulator.micro_batch_done() {
                if let Err(reason) = optimizer_step(&mut optimizer, &mut model, lr) {
                    return diverged(&model, &last_good, hooks.out_dir, epoch, step, &reason);
                }
            }
        }
        if accumulator.flush() {
            if let Err(reason) = optimizer_step(&mut optimizer, &mut model, lr) {
                return diverged(&model, &last_good, hooks.out_dir, epoch, batches.len(), &reason);
            }
        }
        model.set_mode(Mode::Eval);
        let val = evaluate(&model, dataset, &split.val, &cfg.augment, cfg.eval_batch_size)?;
        let (improved, decision) = stopper.observe(epoch, val.metrics.accuracy, val.loss)?;
        if improved {
            best_values = snapshot(&model);
        }
        let take_swa = cfg.swa && epoch >= swa_start;
        if take_swa {
            swa.update(model.params())?;
        }
        last_good = snapshot(&model);
        let record = EpochRecord {
            epoch,
            lr,
            group_lrs: optimizer
                .groups()
                .iter()
                .map(|g| (g.name.clone(), lr * g.lr_scale))
                .collect(),
            train_loss: loss_sum / split.train.len() as f64,
            val_loss: val.loss,
            val_accuracy: val.metrics.accuracy,
            val_sensitivity: val.metrics.sensitivity,
            val_specificity: val.metrics.specificity,
            improved,
            swa_snapshot: take_swa,
        };
        if let Some(cb) = on_epoch.as_mut() {
            cb(&record);
        }
        history.push(record);
        if decision == StopDecision::Stop {
            stopped_early = true;
            break;
        }
    }

    let best = with_values(&model, &best_values)?;
    let raw_val = evaluate(&best, dataset, &split.val, &cfg.augment, cfg.eval_batch_size)?;
    let (swa_model, swa_val) = if swa.count() > 0 {
        let m = with_values(&model, &swa.finalize()?)?;
        let v = evaluate(&m, dataset, &split.val, &cfg.augment, cfg.eval_batch_size)?;
        (Some(m), Some(v))
    } else {
        (None, None)
    };
    let primary = match &swa_val {
        Some(v) if v.metrics.accuracy > raw_val.metrics.accuracy => Primary::Swa,
        _ => Primary::Raw,
    };
    let chosen = match primary {
        Primary::Swa => swa_model.as_ref().expect("swa model exists"),
        Primary::Raw => &best,
    };
    let test = if split.test.is_empty() {
        None
    } else if cfg.tta {
        Some(tta_evaluate(chosen, dataset, &split.test, &cfg.augment)?)
    } else {
        Some(evaluate(chosen, dataset, &split.test, &cfg.augment, cfg.eval_batch_size)?)
    };
    let teacher_hash_after = teacher.as_ref().map(|t| t.model.param_hash());
    if teacher_hash_before != teacher_hash_after {
        return Err(Error::Training("teacher parameters changed during distillation".into()));
    }
    let report = TrainReport {
        role: role.to_string(),
        split_hash: split.hash(),
        loss: if teacher.is_some() { "kd".into() } else { cfg.loss.name().into() },
        focal_alpha: focal.map(|f| f.alpha_vector(k)).transpose()?,
        epochs_run: history.len(),
        best_epoch: stopper.best_epoch(),
        stopped_early,
        history,
        steps,
        raw_val,
        swa_snapshots: swa.count(),
        swa_val,
        primary,
        test,
        teacher_hash_before,
        teacher_hash_after,
        parameter_count,
    };
    Ok(TrainOutcome {
        best,
        swa: swa_model,
        report,
    })
}

/// Supervised training (focal or cross-entropy) of `cfg.model`.
pub fn train_teacher(cfg: &TrainRunConfig, dataset: &Dataset, split: &SplitPlan, hooks: RunHooks<'_>) -> Result<TrainOutcome> {
    run("teacher", cfg, dataset, split, None, hooks)
}

/// Plain supervised student training without a teacher.
pub fn train_student_supervised(
    cfg: &TrainRunConfig,
    dataset: &Dataset,
    split: &SplitPlan,
    hooks: RunHooks<'_>,
) -> Result<TrainOutcome> {
    run("student", cfg, dataset, split, None, hooks)
}

/// Student training against a frozen teacher evaluated on the same
/// augmented batch.
pub fn distill_student(
    cfg: &DistillRunConfig,
    teacher: &Model,
    dataset: &Dataset,
    split: &SplitPlan,
    hooks: RunHooks<'_>,
) -> Result<TrainOutcome> {
    cfg.distill.validate()?;
    if teacher.num_classes() != cfg.student.model.num_classes() {
        return Err(Error::Training(format!(
            "teacher predicts {} classes, student {}",
            teacher.num_classes(),
            cfg.student.model.num_classes()
        )));
    }
    if teacher.arch().input_size() != cfg.student.augment.crop_size {
        return Err(Error::Training(format!(
            "teacher input size {} differs from student crop size {}",
            teacher.arch().input_size(),
            cfg.student.augment.crop_size
        )));
    }
    if cfg.student.loss != LossChoice::CrossEntropy {
        return Err(Error::Config("the distillation hard-label term is cross-entropy; set loss.kind = ce".into()));
    }
    let frozen = Teacher {
        model: teacher,
        params: cfg.distill,
    };
    run("student", &cfg.student, dataset, split, Some(frozen), hooks)
}
