//! Flat `section.key = value` run configuration with command-line
//! overrides and a re-parsable resolved echo.

use std::fmt;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;

use crate::augment::AugmentationProfile;
use crate::engine::{AlphaSpec, DistillRunConfig, LossChoice, TrainRunConfig};
use crate::error::{Error, Result};
use crate::losses::DistillParams;
use crate::model::{Architecture, StudentConfig, TeacherConfig};
use crate::optim::AdamConfig;

/// Where a configuration value came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Origin {
    File { path: String, line: usize },
    /// A command-line flag such as `--set` or `--seed`.
    Flag(String),
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::File { path, line } => write!(f, "{path}:{line}"),
            Origin::Flag(flag) => write!(f, "{flag}"),
        }
    }
}

/// One `key = value` pair with its origin.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub key: String,
    pub value: String,
    pub origin: Origin,
}

/// Parses configuration text. `#` starts a comment; blank lines are skipped;
/// a key may appear only once per text.
pub fn parse_config_text(text: &str, source: &str) -> Result<Vec<Assignment>> {
    let mut out: Vec<Assignment> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let origin = Origin::File {
            path: source.to_string(),
            line: i + 1,
        };
        let (key, value) = split_pair(line).map_err(|m| Error::Config(format!("{origin}: {m}")))?;
        if let Some(prev) = out.iter().find(|a| a.key == key) {
            return Err(Error::Config(format!("{origin}: `{key}` already set at {}", prev.origin)));
        }
        out.push(Assignment { key, value, origin });
    }
    Ok(out)
}

fn split_pair(s: &str) -> std::result::Result<(String, String), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected `section.key = value`, got `{s}`"))?;
    let (k, v) = (k.trim(), v.trim());
    let well_formed = k.split_once('.').is_some_and(|(a, b)| !a.is_empty() && !b.is_empty() && !b.contains('.'));
    if !well_formed {
        return Err(format!("key `{k}` is not of the form `section.key`"));
    }
    Ok((k.to_string(), v.to_string()))
}

/// Parses a `--set key=value` override.
pub fn parse_override(s: &str) -> Result<Assignment> {
    let (key, value) = split_pair(s).map_err(|m| Error::Config(format!("--set {s}: {m}")))?;
    Ok(Assignment {
        key,
        value,
        origin: Origin::Flag("--set".into()),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunKind {
    Teacher,
    Student,
}

impl RunKind {
    pub fn name(self) -> &'static str {
        match self {
            RunKind::Teacher => "teacher",
            RunKind::Student => "student",
        }
    }
}

/// A fully resolved run configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub kind: RunKind,
    pub train: TrainRunConfig,
    pub distill: DistillParams,
    pub teacher_checkpoint: Option<PathBuf>,
    pub data_manifest: Option<PathBuf>,
    pub data_split: Option<PathBuf>,
    /// Origin of every key set explicitly.
    pub provenance: IndexMap<String, Origin>,
}

fn type_error(key: &str, expected: &str, value: &str) -> Error {
    Error::Config(format!("`{key}` expects {expected}, got `{value}`"))
}

fn num<T: std::str::FromStr>(key: &str, value: &str, expected: &str) -> Result<T> {
    value.parse().map_err(|_| type_error(key, expected, value))
}

fn float(key: &str, value: &str) -> Result<f64> {
    let v: f64 = num(key, value, "a number")?;
    if !v.is_finite() {
        return Err(type_error(key, "a finite number", value));
    }
    Ok(v)
}

fn boolean(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(type_error(key, "true or false", value)),
    }
}

fn float_list(key: &str, value: &str) -> Result<Vec<f64>> {
    value.split(',').map(|p| float(key, p.trim())).collect()
}

fn fmt_floats(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(", ")
}

fn profile_named(name: &str) -> Result<AugmentationProfile> {
    match name {
        "teacher" => Ok(AugmentationProfile::teacher()),
        "student" => Ok(AugmentationProfile::student()),
        "minimal" => Ok(AugmentationProfile::minimal()),
        other => Err(type_error("augment.profile", "teacher, student or minimal", other)),
    }
}

fn defaults(kind: RunKind) -> RunConfig {
    let train = match kind {
        RunKind::Teacher => TrainRunConfig {
            model: Architecture::Teacher(TeacherConfig::default()),
            profile_name: "teacher".into(),
            augment: AugmentationProfile::teacher(),
            heavy_augmentation: true,
            loss: LossChoice::Focal {
                alpha: AlphaSpec::InverseFrequency,
                gamma: 2.0,
            },
            base_lr: 1e-4,
            backbone_lr: Some(2e-5),
            weight_decay: 0.05,
            min_lr: 1e-7,
            warmup_epochs: 10,
            max_epochs: 150,
            patience: 25,
            batch_size: 4,
            accumulation_steps: 4,
            swa: true,
            swa_start_fraction: 0.75,
            eval_batch_size: 64,
            adam: AdamConfig::default(),
            tta: true,
            seed: 42,
        },
        RunKind::Student => TrainRunConfig {
            model: Architecture::Student(StudentConfig::default()),
            profile_name: "student".into(),
            augment: AugmentationProfile::student(),
            heavy_augmentation: true,
            loss: LossChoice::CrossEntropy,
            base_lr: 1e-3,
            backbone_lr: None,
            weight_decay: 0.01,
            min_lr: 1e-6,
            warmup_epochs: 5,
            max_epochs: 100,
            patience: 20,
            batch_size: 8,
            accumulation_steps: 2,
            swa: false,
            swa_start_fraction: 0.75,
            eval_batch_size: 64,
            adam: AdamConfig::default(),
            tta: true,
            seed: 42,
        },
    };
    RunConfig {
        kind,
        train,
        distill: DistillParams::default(),
        teacher_checkpoint: None,
        data_manifest: None,
        data_split: None,
        provenance: IndexMap::new(),
    }
}

/// Loss settings are kept apart until the end so `loss.kind`, `loss.gamma`
/// and `loss.alpha` may come in any order.
struct LossParts {
    focal: bool,
    gamma: f64,
    alpha: AlphaSpec,
}

fn alpha_text(a: &AlphaSpec) -> String {
    match a {
        AlphaSpec::Uniform => "uniform".into(),
        AlphaSpec::InverseFrequency => "inverse_frequency".into(),
        AlphaSpec::Explicit(v) => fmt_floats(v),
    }
}

fn model_fields(arch: &Architecture) -> IndexMap<String, String> {
    arch.to_text()
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .filter(|(k, _)| k != "kind")
        .collect()
}

/// Resolves assignments (later ones win) on top of the defaults of
/// `run.kind`.
pub fn resolve(assignments: &[Assignment]) -> Result<RunConfig> {
    let mut latest: IndexMap<String, &Assignment> = IndexMap::new();
    for a in assignments {
        latest.shift_remove(&a.key);
        latest.insert(a.key.clone(), a);
    }
    let kind = match latest.get("run.kind").map(|a| a.value.as_str()) {
        None => return Err(Error::Config("missing required key `run.kind`".into())),
        Some("teacher") => RunKind::Teacher,
        Some("student") => RunKind::Student,
        Some(other) => return Err(type_error("run.kind", "teacher or student", other)),
    };
    let mut cfg = defaults(kind);
    if let Some(a) = latest.get("augment.profile") {
        cfg.train.augment = profile_named(&a.value)?;
        cfg.train.profile_name = a.value.clone();
    }
    let (focal, gamma, alpha) = match &cfg.train.loss {
        LossChoice::Focal { alpha, gamma } => (true, *gamma, alpha.clone()),
        LossChoice::CrossEntropy => (false, 2.0, AlphaSpec::InverseFrequency),
    };
    let mut loss = LossParts { focal, gamma, alpha };
    let mut model = model_fields(&cfg.train.model);
    let mut model_touched = false;

    for (key, a) in &latest {
        let v = a.value.as_str();
        let t = &mut cfg.train;
        let p = &mut t.augment;
        let (section, name) = key.split_once('.').expect("validated key");
        match (section, name) {
            ("run", "kind") | ("augment", "profile") => {}
            ("run", "seed") => t.seed = num(key, v, "an unsigned integer")?,
            ("model", field) => {
                if !model.contains_key(field) {
                    return Err(Error::Config(format!(
                        "unknown key `{key}` for a {} model",
                        kind.name()
                    )));
                }
                model.insert(field.to_string(), v.to_string());
                model_touched = true;
            }
            ("augment", "heavy") => t.heavy_augmentation = boolean(key, v)?,
            ("augment", "resize_large") => p.resize_large = num(key, v, "an unsigned integer")?,
            ("augment", "crop_size") => p.crop_size = num(key, v, "an unsigned integer")?,
            ("augment", "randaugment_n") => p.randaugment_n = num(key, v, "an unsigned integer")?,
            ("augment", "randaugment_m") => p.randaugment_m = num(key, v, "an integer in 0..=10")?,
            ("augment", "rotation_deg") => p.rotation_deg = float(key, v)?,
            ("augment", "shear_deg") => p.shear_deg = float(key, v)?,
            ("augment", "scale_min") => p.scale_range.0 = float(key, v)?,
            ("augment", "scale_max") => p.scale_range.1 = float(key, v)?,
            ("augment", "brightness") => p.brightness = float(key, v)?,
            ("augment", "contrast") => p.contrast = float(key, v)?,
            ("augment", "saturation") => p.saturation = float(key, v)?,
            ("augment", "hue") => p.hue = float(key, v)?,
            ("augment", "p_hflip") => p.p_hflip = float(key, v)?,
            ("augment", "p_vflip") => p.p_vflip = float(key, v)?,
            ("augment", "p_blur") => p.p_blur = float(key, v)?,
            ("augment", "p_posterize") => p.p_posterize = float(key, v)?,
            ("augment", "p_erase") => p.p_erase = float(key, v)?,
            ("augment", "erase_scale_min") => p.erase_scale.0 = float(key, v)?,
            ("augment", "erase_scale_max") => p.erase_scale.1 = float(key, v)?,
            ("augment", "posterize_bits") => p.posterize_bits = num(key, v, "an integer in 1..=8")?,
            ("augment", "blur_kernel") => p.blur_kernel = num(key, v, "an odd unsigned integer")?,
            ("augment", "blur_sigma") => p.blur_sigma = float(key, v)?,
            ("augment", "tta_rotation_deg") => p.tta_rotation_deg = float(key, v)?,
            ("loss", "kind") => {
                loss.focal = match v {
                    "focal" => true,
                    "ce" => false,
                    _ => return Err(type_error(key, "focal or ce", v)),
                }
            }
            ("loss", "gamma") => loss.gamma = float(key, v)?,
            ("loss", "alpha") => {
                loss.alpha = match v {
                    "uniform" => AlphaSpec::Uniform,
                    "inverse_frequency" => AlphaSpec::InverseFrequency,
                    _ => AlphaSpec::Explicit(float_list(key, v).map_err(|_| {
                        type_error(key, "uniform, inverse_frequency or a comma-separated number list", v)
                    })?),
                }
            }
            ("optim", "base_lr") => t.base_lr = float(key, v)?,
            ("optim", "backbone_lr") => t.backbone_lr = if v == "none" { None } else { Some(float(key, v)?) },
            ("optim", "weight_decay") => t.weight_decay = float(key, v)?,
            ("optim", "min_lr") => t.min_lr = float(key, v)?,
            ("optim", "warmup_epochs") => t.warmup_epochs = num(key, v, "an unsigned integer")?,
            ("optim", "beta1") => t.adam.beta1 = float(key, v)?,
            ("optim", "beta2") => t.adam.beta2 = float(key, v)?,
            ("optim", "eps") => t.adam.eps = float(key, v)?,
            ("train", "max_epochs") => t.max_epochs = num(key, v, "an unsigned integer")?,
            ("train", "patience") => t.patience = num(key, v, "an unsigned integer")?,
            ("train", "batch_size") => t.batch_size = num(key, v, "an unsigned integer")?,
            ("train", "accumulation_steps") => t.accumulation_steps = num(key, v, "an unsigned integer")?,
            ("train", "swa") => t.swa = boolean(key, v)?,
            ("train", "swa_start_fraction") => t.swa_start_fraction = float(key, v)?,
            ("train", "eval_batch_size") => t.eval_batch_size = num(key, v, "an unsigned integer")?,
            ("eval", "tta") => t.tta = boolean(key, v)?,
            ("distill", field) if kind == RunKind::Teacher => {
                return Err(Error::Config(format!(
                    "`distill.{field}` only applies to student runs"
                )))
            }
            ("distill", "temperature") => cfg.distill.temperature = float(key, v)?,
            ("distill", "alpha_soft") => cfg.distill.alpha_soft = float(key, v)?,
            ("distill", "beta_hard") => cfg.distill.beta_hard = float(key, v)?,
            ("distill", "teacher_checkpoint") => cfg.teacher_checkpoint = Some(PathBuf::from(v)),
            ("data", "manifest") => cfg.data_manifest = Some(PathBuf::from(v)),
            ("data", "split") => cfg.data_split = Some(PathBuf::from(v)),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        cfg.provenance.insert(key.clone(), a.origin.clone());
    }

    if model_touched {
        let mut text = format!("kind = {}\n", kind.name());
        for (k, v) in &model {
            text.push_str(&format!("{k} = {v}\n"));
        }
        cfg.train.model = Architecture::from_text(&text).map_err(|e| Error::Config(format!("model section: {e}")))?;
    }
    cfg.train.loss = if loss.focal {
        LossChoice::Focal {
            alpha: loss.alpha,
            gamma: loss.gamma,
        }
    } else {
        LossChoice::CrossEntropy
    };
    cfg.train.validate()?;
    cfg.distill.validate()?;
    Ok(cfg)
}

/// Reads `path`, then applies `overrides` in order and resolves.
pub fn load_config(path: &Path, overrides: &[Assignment]) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut assignments = parse_config_text(&text, &path.display().to_string())?;
    assignments.extend_from_slice(overrides);
    resolve(&assignments)
}

impl RunConfig {
    /// Every resolved key in canonical order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let t = &self.train;
        let p = &t.augment;
        let mut e: Vec<(String, String)> = Vec::new();
        let mut put = |k: &str, v: String| e.push((k.to_string(), v));
        put("run.kind", self.kind.name().into());
        put("run.seed", t.seed.to_string());
        for (k, v) in model_fields(&t.model) {
            put(&format!("model.{k}"), v);
        }
        put("augment.profile", t.profile_name.clone());
        put("augment.heavy", t.heavy_augmentation.to_string());
        put("augment.resize_large", p.resize_large.to_string());
        put("augment.crop_size", p.crop_size.to_string());
        put("augment.randaugment_n", p.randaugment_n.to_string());
        put("augment.randaugment_m", p.randaugment_m.to_string());
        put("augment.rotation_deg", p.rotation_deg.to_string());
        put("augment.shear_deg", p.shear_deg.to_string());
        put("augment.scale_min", p.scale_range.0.to_string());
        put("augment.scale_max", p.scale_range.1.to_string());
        put("augment.brightness", p.brightness.to_string());
        put("augment.contrast", p.contrast.to_string());
        put("augment.saturation", p.saturation.to_string());
        put("augment.hue", p.hue.to_string());
        put("augment.p_hflip", p.p_hflip.to_string());
        put("augment.p_vflip", p.p_vflip.to_string());
        put("augment.p_blur", p.p_blur.to_string());
        put("augment.p_posterize", p.p_posterize.to_string());
        put("augment.p_erase", p.p_erase.to_string());
        put("augment.erase_scale_min", p.erase_scale.0.to_string());
        put("augment.erase_scale_max", p.erase_scale.1.to_string());
        put("augment.posterize_bits", p.posterize_bits.to_string());
        put("augment.blur_kernel", p.blur_kernel.to_string());
        put("augment.blur_sigma", p.blur_sigma.to_string());
        put("augment.tta_rotation_deg", p.tta_rotation_deg.to_string());
        match &t.loss {
            LossChoice::Focal { alpha, gamma } => {
                put("loss.kind", "focal".into());
                put("loss.gamma", gamma.to_string());
                put("loss.alpha", alpha_text(alpha));
            }
            LossChoice::CrossEntropy => put("loss.kind", "ce".into()),
        }
        put("optim.base_lr", t.base_lr.to_string());
        put("optim.backbone_lr", t.backbone_lr.map_or("none".into(), |b| b.to_string()));
        put("optim.weight_decay", t.weight_decay.to_string());
        put("optim.min_lr", t.min_lr.to_string());
        put("optim.warmup_epochs", t.warmup_epochs.to_string());
        put("optim.beta1", t.adam.beta1.to_string());
        put("optim.beta2", t.adam.beta2.to_string());
        put("optim.eps", t.adam.eps.to_string());
        put("train.max_epochs", t.max_epochs.to_string());
        put("train.patience", t.patience.to_string());
        put("train.batch_size", t.batch_size.to_string());
        put("train.accumulation_steps", t.accumulation_steps.to_string());
        put("train.swa", t.swa.to_string());
        put("train.swa_start_fraction", t.swa_start_fraction.to_string());
        put("train.eval_batch_size", t.eval_batch_size.to_string());
        put("eval.tta", t.tta.to_string());
        if self.kind == RunKind::Student {
            put("distill.temperature", self.distill.temperature.to_string());
            put("distill.alpha_soft", self.distill.alpha_soft.to_string());
            put("distill.beta_hard", self.distill.beta_hard.to_string());
            if let Some(c) = &self.teacher_checkpoint {
                put("distill.teacher_checkpoint", c.display().to_string());
            }
        }
        if let Some(m) = &self.data_manifest {
            put("data.manifest", m.display().to_string());
        }
        if let Some(s) = &self.data_split {
            put("data.split", s.display().to_string());
        }
        e
    }

    /// The resolved configuration as parsable text; keys not taken from
    /// their defaults carry their origin as a trailing comment.
    pub fn echo(&self) -> String {
        let mut out = String::from("# resolved configuration\n");
        for (k, v) in self.entries() {
            match self.provenance.get(&k) {
                Some(o) => out.push_str(&format!("{k} = {v}  # {o}\n")),
                None => out.push_str(&format!("{k} = {v}\n")),
            }
        }
        out
    }

    pub fn distill_config(&self) -> Result<DistillRunConfig> {
        if self.kind != RunKind::Student {
            return Err(Error::Config("distillation needs `run.kind = student`".into()));
        }
        Ok(DistillRunConfig {
            student: self.train.clone(),
            distill: self.distill,
            teacher_checkpoint: self.teacher_checkpoint.clone(),
        })
    }
}
