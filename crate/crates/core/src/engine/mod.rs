//! Training, distillation, evaluation, cross-validation and ablation.

mod config;
mod cv;
mod eval;
mod metrics;
mod report;
mod train;

pub use config::{AlphaSpec, DistillRunConfig, LossChoice, TrainRunConfig};
pub use cv::{
    cross_validate, format_mean_std, mean_std, run_ablation, AblationReport, AblationRow, CvReport, FoldEntry, Scores, SummaryRow,
    Toggle,
};
pub use eval::{evaluate, mean_cross_entropy, stack, tta_evaluate, Classifier, EvalOutput};
pub use metrics::{confusion, metrics_from_confusion, ClassRates, ConfusionMatrix, Fraction, Metrics};
pub use report::{write_run, write_timing, RunReport, PRIMARY_CHECKPOINT, RAW_CHECKPOINT, SWA_CHECKPOINT};
pub use train::{
    distill_student, train_student_supervised, train_teacher, EpochRecord, Primary, RunHooks, StepLog, TrainOutcome, TrainReport,
};
