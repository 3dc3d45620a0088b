use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use super::config::{DistillRunConfig, LossChoice, TrainRunConfig};
use super::eval::EvalOutput;
use super::train::{distill_student, train_student_supervised, train_teacher, RunHooks, TrainOutcome};
use crate::data::{patient_kfold, Dataset, SplitPlan};
use crate::error::{Error, Result};
use crate::io::write_atomic;

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `"M ± S"` with two decimals.
pub fn format_mean_std(mean: f64, std: f64) -> String {
    format!("{mean:.2} ± {std:.2}")
}

/// Headline metrics of one evaluation, in percent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Scores {
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

impl Scores {
    pub fn of(e: &EvalOutput) -> Self {
        Self {
            accuracy: 100.0 * e.metrics.accuracy,
            sensitivity: 100.0 * e.metrics.sensitivity,
            specificity: 100.0 * e.metrics.specificity,
        }
    }
}

fn final_eval(o: &TrainOutcome) -> &EvalOutput {
    o.report.test.as_ref().unwrap_or_else(|| o.report.primary_val())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FoldEntry {
    pub fold: usize,
    pub split_hash: String,
    pub train_records: usize,
    pub held_out_records: usize,
    pub teacher: Scores,
    pub student: Option<Scores>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub role: String,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub formatted: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CvReport {
    pub k: usize,
    pub seed: u64,
    pub complete: bool,
    pub folds: Vec<FoldEntry>,
    pub summary: Vec<SummaryRow>,
    pub error: Option<String>,
}

impl CvReport {
    fn summarize(&mut self) {
        self.summary.clear();
        if self.folds.is_empty() {
            return;
        }
        let mut roles: Vec<(&str, Vec<Scores>)> = vec![("teacher", self.folds.iter().map(|f| f.teacher).collect())];
        let students: Vec<Scores> = self.folds.iter().filter_map(|f| f.student).collect();
        if students.len() == self.folds.len() {
            roles.push(("student", students));
        }
        for (role, scores) in roles {
            type Pick = fn(&Scores) -> f64;
            let metrics: [(&str, Pick); 3] = [
                ("accuracy", |s| s.accuracy),
                ("sensitivity", |s| s.sensitivity),
                ("specificity", |s| s.specificity),
            ];
            for (metric, pick) in metrics {
                let values: Vec<f64> = scores.iter().map(pick).collect();
                let (mean, std) = mean_std(&values);
                self.summary.push(SummaryRow {
                    role: role.into(),
                    metric: metric.into(),
                    mean,
                    std,
                    formatted: format_mean_std(mean, std),
                });
            }
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "[cross_validation]");
        let _ = writeln!(out, "k = {}", self.k);
        let _ = writeln!(out, "seed = {}", self.seed);
        let _ = writeln!(out, "complete = {}", self.complete);
        if let Some(e) = &self.error {
            let _ = writeln!(out, "error = {e}");
        }
        out.push('\n');
        let _ = writeln!(out, "[folds]");
        let _ = writeln!(
            out,
            "{:>4} {:>6} {:>6} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}",
            "fold", "train", "held", "t_acc", "t_sens", "t_spec", "s_acc", "s_sens", "s_spec"
        );
        for f in &self.folds {
            let s = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.2}"));
            let _ = writeln!(
                out,
                "{:>4} {:>6} {:>6} {:>8.2} {:>8.2} {:>8.2} {:>8} {:>8} {:>8}",
                f.fold,
                f.train_records,
                f.held_out_records,
                f.teacher.accuracy,
                f.teacher.sensitivity,
                f.teacher.specificity,
                s(f.student.map(|x| x.accuracy)),
                s(f.student.map(|x| x.sensitivity)),
                s(f.student.map(|x| x.specificity)),
            );
        }
        out.push('\n');
        let _ = writeln!(out, "[summary] (percent, mean ± population std)");
        for r in &self.summary {
            let _ = writeln!(out, "{} {} = {}", r.role, r.metric, r.formatted);
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join("cv_report.txt"), self.to_text().as_bytes())?;
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        write_atomic(&dir.join("cv_report.json"), json.as_bytes())
    }
}

/// Patient-disjoint k-fold evaluation of the teacher, and of a distilled
/// student when `student` is given. The report is rewritten to `out_dir`
/// after every fold, so a failing fold leaves the finished ones on disk.
pub fn cross_validate(
    teacher_cfg: &TrainRunConfig,
    student: Option<&DistillRunConfig>,
    dataset: &Dataset,
    k: usize,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<CvReport> {
    let plan = patient_kfold(&dataset.manifest, k, seed)?;
    let mut report = CvReport {
        k,
        seed,
        complete: false,
        folds: Vec::new(),
        summary: Vec::new(),
        error: None,
    };
    for fold in 0..k {
        match run_fold(teacher_cfg, student, dataset, &plan.fold_split(&dataset.manifest, fold), fold) {
            Ok(entry) => report.folds.push(entry),
            Err(e) => {
                report.error = Some(format!("fold {fold}: {e}"));
                report.summarize();
                if let Some(dir) = out_dir {
                    report.write(dir)?;
                }
                return Err(Error::Training(format!("cross-validation fold {fold} failed: {e}")));
            }
        }
        report.summarize();
        if let Some(dir) = out_dir {
            report.write(dir)?;
        }
    }
    report.complete = true;
    if let Some(dir) = out_dir {
        report.write(dir)?;
    }
    Ok(report)
}

fn run_fold(
    teacher_cfg: &TrainRunConfig,
    student: Option<&DistillRunConfig>,
    dataset: &Dataset,
    split: &SplitPlan,
    fold: usize,
) -> Result<FoldEntry> {
    let teacher = train_teacher(teacher_cfg, dataset, split, RunHooks::default())?;
    let student_scores = match student {
        Some(cfg) => {
            let s = distill_student(cfg, teacher.primary(), dataset, split, RunHooks::default())?;
            Some(Scores::of(final_eval(&s)))
        }
        None => None,
    };
    Ok(FoldEntry {
        fold,
        split_hash: split.hash(),
        train_records: split.train.len(),
        held_out_records: split.test.len(),
        teacher: Scores::of(final_eval(&teacher)),
        student: student_scores,
    })
}

/// One ingredient to switch off.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Toggle {
    NoHeavyAug,
    NoSwa,
    NoFocal,
    NoKd,
}

impl Toggle {
    pub fn name(self) -> &'static str {
        match self {
            Toggle::NoHeavyAug => "no_heavy_aug",
            Toggle::NoSwa => "no_swa",
            Toggle::NoFocal => "no_focal",
            Toggle::NoKd => "no_kd",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "no_heavy_aug" => Toggle::NoHeavyAug,
            "no_swa" => Toggle::NoSwa,
            "no_focal" => Toggle::NoFocal,
            "no_kd" => Toggle::NoKd,
            other => {
                return Err(Error::Config(format!(
                    "unknown ablation toggle {other:?} (expected no_heavy_aug, no_swa, no_focal or no_kd)"
                )))
            }
        })
    }

    /// The teacher configuration with this ingredient removed.
    pub fn apply(self, cfg: &TrainRunConfig) -> TrainRunConfig {
        let mut c = cfg.clone();
        match self {
            Toggle::NoHeavyAug => c.heavy_augmentation = false,
            Toggle::NoSwa => c.swa = false,
            Toggle::NoFocal => c.loss = LossChoice::CrossEntropy,
            Toggle::NoKd => {}
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub name: String,
    pub role: String,
    pub split_hash: String,
    pub seed: u64,
    pub epochs_run: usize,
    pub val: Scores,
    pub test: Option<Scores>,
}

impl AblationRow {
    fn of(name: &str, seed: u64, o: &TrainOutcome) -> Self {
        Self {
            name: name.into(),
            role: o.report.role.clone(),
            split_hash: o.report.split_hash.clone(),
            seed,
            epochs_run: o.report.epochs_run,
            val: Scores::of(o.report.primary_val()),
            test: o.report.test.as_ref().map(Scores::of),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    /// True when every row ran on the same split.
    pub fn splits_identical(&self) -> bool {
        self.rows.windows(2).all(|w| w[0].split_hash == w[1].split_hash)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "[ablation] (percent)");
        let _ = writeln!(out, "splits_identical = {}", self.splits_identical());
        let _ = writeln!(
            out,
            "{:<14} {:<8} {:>6} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}  split_hash",
            "row", "role", "epochs", "val_acc", "val_sens", "val_spec", "test_acc", "test_sen", "test_spe"
        );
        for r in &self.rows {
            let t = |f: fn(&Scores) -> f64| r.test.as_ref().map_or("-".to_string(), |s| format!("{:.2}", f(s)));
            let _ = writeln!(
                out,
                "{:<14} {:<8} {:>6} {:>8.2} {:>8.2} {:>8.2} {:>8} {:>8} {:>8}  {}",
                r.name,
                r.role,
                r.epochs_run,
                r.val.accuracy,
                r.val.sensitivity,
                r.val.specificity,
                t(|s| s.accuracy),
                t(|s| s.sensitivity),
                t(|s| s.specificity),
                r.split_hash
            );
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join("ablation.txt"), self.to_text().as_bytes())?;
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        write_atomic(&dir.join("ablation.json"), json.as_bytes())
    }
}

/// Trains the full teacher and one variant per teacher toggle on the same
/// split and seed. `no_kd` compares a distilled student with the same
/// student trained on hard labels alone and needs `student`.
pub fn run_ablation(
    teacher_cfg: &TrainRunConfig,
    toggles: &[Toggle],
    student: Option<&DistillRunConfig>,
    dataset: &Dataset,
    split: &SplitPlan,
) -> Result<AblationReport> {
    let mut rows = Vec::new();
    let full = train_teacher(teacher_cfg, dataset, split, RunHooks::default())?;
    rows.push(AblationRow::of("full", teacher_cfg.seed, &full));
    for &t in toggles.iter().filter(|t| **t != Toggle::NoKd) {
        let cfg = t.apply(teacher_cfg);
        let o = train_teacher(&cfg, dataset, split, RunHooks::default())?;
        rows.push(AblationRow::of(t.name(), cfg.seed, &o));
    }
    if toggles.contains(&Toggle::NoKd) {
        let cfg = student.ok_or_else(|| Error::Config("the no_kd toggle needs a student configuration".into()))?;
        let kd = distill_student(cfg, full.primary(), dataset, split, RunHooks::default())?;
        rows.push(AblationRow::of("student_kd", cfg.student.seed, &kd));
        let plain = train_student_supervised(&cfg.student, dataset, split, RunHooks::default())?;
        rows.push(AblationRow::of("no_kd", cfg.student.seed, &plain));
    }
    let report = AblationReport { rows };
    if !report.splits_identical() {
        return Err(Error::Training("ablation rows ran on different splits".into()));
    }
    Ok(report)
}
