//! Command-line front end: one process runs one command.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use indexmap::IndexMap;
use octdistill_core::config::{load_config, parse_override, Assignment, Origin, RunConfig, RunKind};
use octdistill_core::data::{
    load_manifest, patient_kfold, patient_stratified_split, synth_generate, Dataset, DatasetManifest, SplitFractions, SplitPlan,
};
use octdistill_core::engine::{
    cross_validate, distill_student, evaluate, run_ablation, train_teacher, tta_evaluate, write_run, write_timing, EvalOutput,
    RunHooks, Toggle, TrainOutcome,
};
use octdistill_core::io::{file_sha256, write_atomic};
use octdistill_core::model::load_checkpoint;
use octdistill_core::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "octdistill", about = "Teacher training and knowledge distillation for retinal OCT classification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic labelled scan set with a manifest.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Scans per class, comma separated.
        #[arg(long, default_value = "200,200,200", value_delimiter = ',')]
        scans: Vec<usize>,
        /// Patients per class, comma separated.
        #[arg(long, default_value = "20,20,20", value_delimiter = ',')]
        patients: Vec<usize>,
        #[arg(long, default_value_t = 32)]
        size: usize,
    },
    /// Patient-level stratified train/val/test split.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 0.2)]
        test_fraction: f64,
        /// Validation share of the non-test remainder.
        #[arg(long, default_value_t = 0.2)]
        val_fraction: f64,
    },
    /// Patient-level stratified k-fold assignment.
    Kfold {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Train the teacher network.
    TrainTeacher(RunArgs),
    /// Train the student against a frozen teacher checkpoint.
    DistillStudent(RunArgs),
    /// Evaluate a checkpoint on the test split.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Average logits over five deterministic views.
        #[arg(long)]
        tta: bool,
    },
    /// Patient-disjoint k-fold cross-validation.
    CrossValidate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 5)]
        k: usize,
        /// Also distill a student per fold.
        #[arg(long)]
        student_config: Option<PathBuf>,
    },
    /// Train the teacher with single ingredients removed.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value = "no_heavy_aug,no_swa,no_focal", value_delimiter = ',')]
        toggles: Vec<String>,
        /// Student configuration, needed by the `no_kd` toggle.
        #[arg(long)]
        student_config: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// `section.key=value`, applied after the file; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

impl RunArgs {
    fn overrides(&self) -> Result<Vec<Assignment>> {
        let mut out = self.set.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>>>()?;
        if let Some(seed) = self.seed {
            out.push(Assignment {
                key: "run.seed".into(),
                value: seed.to_string(),
                origin: Origin::Flag("--seed".into()),
            });
        }
        Ok(out)
    }

    fn load(&self, path: &Path) -> Result<RunConfig> {
        load_config(path, &self.overrides()?)
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn required<'a>(v: &'a Option<PathBuf>, key: &str) -> Result<&'a PathBuf> {
    v.as_ref()
        .ok_or_else(|| Error::Config(format!("missing required key `{key}`")))
}

/// Loads the dataset and the split named by the configuration, or derives
/// a stratified split from the run seed and stores it in `out`.
fn load_data(cfg: &RunConfig, out: &Path) -> Result<(Dataset, SplitPlan, IndexMap<String, String>)> {
    let manifest_path = required(&cfg.data_manifest, "data.manifest")?;
    let manifest = load_manifest(manifest_path)?;
    let split = match &cfg.data_split {
        Some(p) => SplitPlan::from_json(&manifest, &read_text(p)?)?,
        None => {
            let s = patient_stratified_split(&manifest, SplitFractions::default(), cfg.train.seed)?;
            write_atomic(&out.join("split.json"), s.to_json().as_bytes())?;
            s
        }
    };
    let provenance = IndexMap::from([
        ("manifest".to_string(), manifest_path.display().to_string()),
        ("manifest_sha256".to_string(), file_sha256(manifest_path)?),
    ]);
    Ok((Dataset::load(manifest)?, split, provenance))
}

fn finish_run(out: &Path, command: &str, outcome: &TrainOutcome, cfg: &RunConfig, provenance: IndexMap<String, String>, start: Instant) -> Result<()> {
    write_run(out, command, outcome, &cfg.echo(), provenance)?;
    write_timing(out, start.elapsed().as_secs_f64())?;
    let r = &outcome.report;
    let v = r.primary_val();
    println!(
        "{command}: {} epochs, best epoch {}, primary {:?}, val accuracy {:.4}",
        r.epochs_run, r.best_epoch, r.primary, v.metrics.accuracy
    );
    if let Some(t) = &r.test {
        println!("{command}: test accuracy {:.4} (tta {})", t.metrics.accuracy, t.tta);
    }
    println!("{command}: outputs in {}", out.display());
    Ok(())
}

fn print_epoch(r: &octdistill_core::engine::EpochRecord) {
    println!(
        "epoch {:>3}  lr {:.3e}  train {:.4}  val loss {:.4}  val acc {:.4}{}",
        r.epoch,
        r.lr,
        r.train_loss,
        r.val_loss,
        r.val_accuracy,
        if r.improved { "  *" } else { "" }
    );
}

fn train_teacher_cmd(args: &RunArgs) -> Result<()> {
    let start = Instant::now();
    let cfg = args.load(&args.config)?;
    if cfg.kind != RunKind::Teacher {
        return Err(Error::Config("train-teacher needs `run.kind = teacher`".into()));
    }
    create_dir(&args.out)?;
    let (dataset, split, provenance) = load_data(&cfg, &args.out)?;
    let mut cb = print_epoch;
    let hooks = RunHooks {
        out_dir: Some(&args.out),
        on_epoch: Some(&mut cb),
    };
    let outcome = train_teacher(&cfg.train, &dataset, &split, hooks)?;
    finish_run(&args.out, "train-teacher", &outcome, &cfg, provenance, start)
}

fn distill_cmd(args: &RunArgs) -> Result<()> {
    let start = Instant::now();
    let cfg = args.load(&args.config)?;
    let distill = cfg.distill_config()?;
    let teacher_path = required(&cfg.teacher_checkpoint, "distill.teacher_checkpoint")?;
    let teacher = load_checkpoint(teacher_path)?;
    create_dir(&args.out)?;
    let (dataset, split, mut provenance) = load_data(&cfg, &args.out)?;
    provenance.insert("teacher_checkpoint".into(), teacher_path.display().to_string());
    provenance.insert("teacher_checkpoint_sha256".into(), file_sha256(teacher_path)?);
    let mut cb = print_epoch;
    let hooks = RunHooks {
        out_dir: Some(&args.out),
        on_epoch: Some(&mut cb),
    };
    let outcome = distill_student(&distill, &teacher, &dataset, &split, hooks)?;
    finish_run(&args.out, "distill-student", &outcome, &cfg, provenance, start)
}

fn eval_text(e: &EvalOutput, checkpoint: &str, sha: &str) -> String {
    let m = &e.metrics;
    let mut s = format!(
        "[evaluation]\ncheckpoint = {checkpoint}\ncheckpoint_sha256 = {sha}\ntta = {}\nsamples = {}\naccuracy = {:.2}\nsensitivity = {:.2}\nspecificity = {:.2}\nloss = {:.6}\nconfusion (rows true, cols predicted):\n",
        e.tta,
        e.predictions.len(),
        100.0 * m.accuracy,
        100.0 * m.sensitivity,
        100.0 * m.specificity,
        e.loss
    );
    for row in &e.confusion.counts {
        s.push_str(&row.iter().map(|c| format!("{c:>6}")).collect::<String>());
        s.push('\n');
    }
    s
}

fn evaluate_cmd(args: &RunArgs, checkpoint: &Path, tta: bool) -> Result<()> {
    let cfg = args.load(&args.config)?;
    create_dir(&args.out)?;
    let model = load_checkpoint(checkpoint)?;
    let (dataset, split, _) = load_data(&cfg, &args.out)?;
    let indices = if split.test.is_empty() { &split.val } else { &split.test };
    let profile = &cfg.train.augment;
    if model.arch().input_size() != profile.crop_size {
        return Err(Error::Config(format!(
            "checkpoint expects {}-pixel inputs, augment.crop_size is {}",
            model.arch().input_size(),
            profile.crop_size
        )));
    }
    let out = if tta {
        tta_evaluate(&model, &dataset, indices, profile)?
    } else {
        evaluate(&model, &dataset, indices, profile, cfg.train.eval_batch_size)?
    };
    let sha = file_sha256(checkpoint)?;
    let text = eval_text(&out, &checkpoint.display().to_string(), &sha);
    write_atomic(&args.out.join("eval.txt"), text.as_bytes())?;
    let json = serde_json::to_string_pretty(&out).map_err(|e| Error::Format(e.to_string()))?;
    write_atomic(&args.out.join("eval.json"), json.as_bytes())?;
    print!("{text}");
    Ok(())
}

fn student_cfg(args: &RunArgs, path: &Option<PathBuf>) -> Result<Option<octdistill_core::engine::DistillRunConfig>> {
    path.as_ref().map(|p| args.load(p)?.distill_config()).transpose()
}

fn teacher_cfg(args: &RunArgs) -> Result<RunConfig> {
    let cfg = args.load(&args.config)?;
    if cfg.kind != RunKind::Teacher {
        return Err(Error::Config("expected a teacher configuration (`run.kind = teacher`)".into()));
    }
    Ok(cfg)
}

fn manifest_of(cfg: &RunConfig) -> Result<DatasetManifest> {
    load_manifest(required(&cfg.data_manifest, "data.manifest")?)
}

fn cross_validate_cmd(args: &RunArgs, k: usize, student: &Option<PathBuf>) -> Result<()> {
    let start = Instant::now();
    let cfg = teacher_cfg(args)?;
    let student = student_cfg(args, student)?;
    create_dir(&args.out)?;
    let dataset = Dataset::load(manifest_of(&cfg)?)?;
    write_atomic(&args.out.join("config.cfg"), cfg.echo().as_bytes())?;
    let report = cross_validate(&cfg.train, student.as_ref(), &dataset, k, cfg.train.seed, Some(&args.out))?;
    write_timing(&args.out, start.elapsed().as_secs_f64())?;
    print!("{}", report.to_text());
    Ok(())
}

fn ablate_cmd(args: &RunArgs, toggles: &[String], student: &Option<PathBuf>) -> Result<()> {
    let start = Instant::now();
    let cfg = teacher_cfg(args)?;
    let toggles = toggles.iter().map(|t| Toggle::parse(t.trim())).collect::<Result<Vec<_>>>()?;
    let student = student_cfg(args, student)?;
    create_dir(&args.out)?;
    let (dataset, split, _) = load_data(&cfg, &args.out)?;
    write_atomic(&args.out.join("config.cfg"), cfg.echo().as_bytes())?;
    let report = run_ablation(&cfg.train, &toggles, student.as_ref(), &dataset, &split)?;
    report.write(&args.out)?;
    write_timing(&args.out, start.elapsed().as_secs_f64())?;
    print!("{}", report.to_text());
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthData {
            out,
            seed,
            scans,
            patients,
            size,
        } => {
            let m = synth_generate(&out, &scans, &patients, size, seed)?;
            println!(
                "synth-data: {} scans of {} patients in {} classes written to {}",
                m.records.len(),
                m.patients().len(),
                m.num_classes(),
                out.display()
            );
            Ok(())
        }
        Command::Split {
            manifest,
            out,
            seed,
            test_fraction,
            val_fraction,
        } => {
            let m = load_manifest(&manifest)?;
            let fractions = SplitFractions {
                test: test_fraction,
                val_of_remainder: val_fraction,
            };
            let s = patient_stratified_split(&m, fractions, seed)?;
            create_dir(&out)?;
            write_atomic(&out.join("split.json"), s.to_json().as_bytes())?;
            println!(
                "split: {}/{}/{} patients, {}/{}/{} scans, hash {}",
                s.train_patients.len(),
                s.val_patients.len(),
                s.test_patients.len(),
                s.train.len(),
                s.val.len(),
                s.test.len(),
                s.hash()
            );
            Ok(())
        }
        Command::Kfold { manifest, out, k, seed } => {
            let m = load_manifest(&manifest)?;
            let plan = patient_kfold(&m, k, seed)?;
            create_dir(&out)?;
            write_atomic(&out.join("folds.json"), plan.to_json().as_bytes())?;
            for (i, f) in plan.folds.iter().enumerate() {
                println!("fold {i}: {} patients", f.len());
            }
            Ok(())
        }
        Command::TrainTeacher(args) => train_teacher_cmd(&args),
        Command::DistillStudent(args) => distill_cmd(&args),
        Command::Evaluate { run, checkpoint, tta } => evaluate_cmd(&run, &checkpoint, tta),
        Command::CrossValidate { run, k, student_config } => cross_validate_cmd(&run, k, &student_config),
        Command::Ablate {
            run,
            toggles,
            student_config,
        } => ablate_cmd(&run, &toggles, &student_config),
    }
}

/// Runs the command line and maps errors to `error[category]: message`
/// with exit code 1.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {}", e.category(), e);
            1
        }
    }
}
