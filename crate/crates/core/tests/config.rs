use std::path::PathBuf;

use octdistill_core::config::{load_config, parse_config_text, parse_override, resolve, Origin, RunConfig, RunKind};
use octdistill_core::engine::{AlphaSpec, LossChoice};
use octdistill_core::model::Architecture;
use octdistill_core::Error;

fn preset(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../presets").join(name)
}

fn load(name: &str, overrides: &[&str]) -> RunConfig {
    let o: Vec<_> = overrides.iter().map(|s| parse_override(s).unwrap()).collect();
    load_config(&preset(name), &o).unwrap()
}

fn from_text(text: &str) -> Result<RunConfig, Error> {
    resolve(&parse_config_text(text, "test.cfg")?)
}

fn config_message(r: Result<RunConfig, Error>) -> String {
    match r {
        Err(Error::Config(m)) => m,
        other => panic!("expected a config error, got {other:?}"),
    }
}

#[test]
fn teacher_preset_resolves_to_full_scale_settings() {
    let c = load("teacher.cfg", &[]);
    let t = &c.train;
    assert_eq!(c.kind, RunKind::Teacher);
    assert_eq!(t.base_lr, 1e-4);
    assert_eq!(t.backbone_lr, Some(2e-5));
    assert_eq!(t.weight_decay, 0.05);
    assert_eq!(t.warmup_epochs, 10);
    assert_eq!(t.min_lr, 1e-7);
    assert_eq!(t.max_epochs, 150);
    assert_eq!(t.patience, 25);
    assert_eq!(t.batch_size, 4);
    assert_eq!(t.accumulation_steps, 4);
    assert_eq!((t.augment.randaugment_n, t.augment.randaugment_m), (2, 9));
    assert_eq!(t.augment.rotation_deg, 20.0);
    assert!(t.swa && t.heavy_augmentation);
    assert_eq!(
        t.loss,
        LossChoice::Focal {
            alpha: AlphaSpec::InverseFrequency,
            gamma: 2.0
        }
    );
    assert!(matches!(t.model, Architecture::Teacher(_)));
}

#[test]
fn student_preset_resolves_to_full_scale_settings() {
    let c = load("student.cfg", &[]);
    let t = &c.train;
    assert_eq!(c.kind, RunKind::Student);
    assert_eq!(t.base_lr, 1e-3);
    assert_eq!(t.backbone_lr, None);
    assert_eq!(t.weight_decay, 0.01);
    assert_eq!(t.warmup_epochs, 5);
    assert_eq!(t.min_lr, 1e-6);
    assert_eq!(t.max_epochs, 100);
    assert_eq!(t.patience, 20);
    assert_eq!(t.batch_size, 8);
    assert_eq!(t.accumulation_steps, 2);
    assert_eq!(t.augment.randaugment_m, 7);
    assert_eq!(t.augment.rotation_deg, 15.0);
    assert_eq!(t.loss, LossChoice::CrossEntropy);
    assert!(!t.swa);
    assert_eq!((c.distill.temperature, c.distill.alpha_soft, c.distill.beta_hard), (4.0, 0.7, 0.3));
    assert!(matches!(t.model, Architecture::Student(_)));
}

#[test]
fn desk_presets_resolve() {
    let t = load("desk-teacher.cfg", &[]);
    let s = load("desk-student.cfg", &[]);
    assert_eq!(t.train.max_epochs, 30);
    assert_eq!(s.train.max_epochs, 30);
    assert_eq!(t.train.augment.crop_size, s.train.augment.crop_size);
    assert!(s.distill_config().is_ok());
    assert!(t.distill_config().is_err());
}

#[test]
fn override_wins_and_is_echoed_with_provenance() {
    for name in ["teacher.cfg", "student.cfg", "desk-teacher.cfg", "desk-student.cfg"] {
        let c = load(name, &["optim.base_lr=0.01"]);
        assert_eq!(c.train.base_lr, 0.01);
        assert_eq!(c.provenance["optim.base_lr"], Origin::Flag("--set".into()));
        assert!(c.echo().contains("optim.base_lr = 0.01  # --set\n"), "{name}");
    }
}

#[test]
fn file_values_record_their_line() {
    let c = from_text("# comment\nrun.kind = teacher\n\ntrain.patience = 7 # inline\n").unwrap();
    assert_eq!(c.train.patience, 7);
    assert_eq!(
        c.provenance["train.patience"],
        Origin::File {
            path: "test.cfg".into(),
            line: 4
        }
    );
}

#[test]
fn echo_reparses_to_the_same_configuration() {
    for name in ["teacher.cfg", "student.cfg", "desk-teacher.cfg", "desk-student.cfg"] {
        let c = load(
            name,
            &["optim.base_lr=0.0123", "data.manifest=d/manifest.txt", "loss.alpha=0.5, 1, 1.5"],
        );
        let back = from_text(&c.echo()).unwrap();
        assert_eq!(back.train, c.train, "{name}");
        assert_eq!(back.distill, c.distill);
        assert_eq!(back.data_manifest, c.data_manifest);
        assert_eq!(back.echo().lines().filter(|l| !l.starts_with('#')).count(), c.entries().len());
        assert_eq!(back.entries(), c.entries());
    }
}

#[test]
fn missing_run_kind_is_an_error() {
    let m = config_message(from_text("train.patience = 3\n"));
    assert!(m.contains("run.kind"), "{m}");
}

#[test]
fn unknown_key_is_named() {
    let m = config_message(from_text("run.kind = teacher\noptim.learning_rate = 0.1\n"));
    assert!(m.contains("optim.learning_rate"), "{m}");
    let m = config_message(from_text("run.kind = student\nmodel.stage_depths = 1,1\n"));
    assert!(m.contains("model.stage_depths"), "{m}");
    let m = config_message(from_text("run.kind = teacher\ndistill.temperature = 2\n"));
    assert!(m.contains("distill.temperature"), "{m}");
}

#[test]
fn type_errors_name_key_and_expected_type() {
    let m = config_message(from_text("run.kind = teacher\ntrain.batch_size = four\n"));
    assert!(m.contains("train.batch_size") && m.contains("unsigned integer"), "{m}");
    let m = config_message(from_text("run.kind = teacher\ntrain.swa = yes\n"));
    assert!(m.contains("train.swa") && m.contains("true or false"), "{m}");
    let m = config_message(from_text("run.kind = teacher\noptim.base_lr = fast\n"));
    assert!(m.contains("optim.base_lr") && m.contains("number"), "{m}");
    let m = config_message(from_text("run.kind = teacher\nloss.kind = hinge\n"));
    assert!(m.contains("loss.kind"), "{m}");
    let m = config_message(from_text("run.kind = mentor\n"));
    assert!(m.contains("run.kind"), "{m}");
}

#[test]
fn malformed_lines_and_duplicates_are_rejected() {
    assert!(config_message(from_text("run.kind teacher\n")).contains("test.cfg:1"));
    assert!(config_message(from_text("kind = teacher\n")).contains("section.key"));
    assert!(config_message(from_text("run.kind = teacher\nrun.kind = student\n")).contains("already set"));
    assert!(parse_override("optim.base_lr").is_err());
}

#[test]
fn later_overrides_win() {
    let c = load("teacher.cfg", &["train.patience=3", "train.patience=4"]);
    assert_eq!(c.train.patience, 4);
}

#[test]
fn model_fields_can_be_overridden() {
    let c = from_text("run.kind = teacher\nmodel.stage_depths = 1,1\nmodel.stage_widths = 8,16\n").unwrap();
    match &c.train.model {
        Architecture::Teacher(t) => assert_eq!(t.stage_widths, vec![8, 16]),
        _ => panic!("teacher expected"),
    }
    assert!(from_text("run.kind = teacher\nmodel.stage_depths = one\n").is_err());
}

#[test]
fn resolved_settings_are_validated() {
    assert!(from_text("run.kind = teacher\noptim.warmup_epochs = 200\n").is_err());
    assert!(from_text("run.kind = teacher\naugment.crop_size = 28\n").is_err());
    assert!(from_text("run.kind = student\ndistill.temperature = 0\n").is_err());
}
