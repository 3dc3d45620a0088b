use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

fn preset(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../presets")
        .join(name)
        .display()
        .to_string()
}

fn octdistill(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_octdistill"))
        .current_dir(cwd)
        .args(args)
        .output()
        .expect("spawn octdistill")
}

fn ok(cwd: &Path, args: &[&str]) -> String {
    let out = octdistill(cwd, args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.insert(path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    files
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn synth(cwd: &Path, out: &str, scans: &str, patients: &str) {
    ok(cwd, &["synth-data", "--out", out, "--scans", scans, "--patients", patients, "--seed", "5"]);
}

const TINY_TEACHER: [&str; 10] = [
    "--set",
    "model.stage_depths=1,1",
    "--set",
    "model.stage_widths=8,16",
    "--set",
    "train.max_epochs=2",
    "--set",
    "optim.warmup_epochs=1",
    "--set",
    "data.manifest=data/manifest.txt",
];

const TINY_STUDENT: [&str; 10] = [
    "--set",
    "model.block_counts=1,1",
    "--set",
    "model.widths=8,12",
    "--set",
    "train.max_epochs=2",
    "--set",
    "optim.warmup_epochs=1",
    "--set",
    "data.manifest=data/manifest.txt",
];

#[test]
fn synth_data_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "a", "6,6,6", "3,3,3");
    synth(dir.path(), "b", "6,6,6", "3,3,3");
    let (a, b) = (tree(&dir.path().join("a")), tree(&dir.path().join("b")));
    assert_eq!(a.len(), 19);
    assert_eq!(a, b);
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(octdistill(dir.path(), &["no-such-command"]).status.code(), Some(2));
    assert_eq!(octdistill(dir.path(), &["train-teacher"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_name_their_category() {
    let dir = tempfile::tempdir().unwrap();
    let teacher = preset("desk-teacher.cfg");
    let cases: [(&[&str], &str); 4] = [
        (
            &["train-teacher", "--config", &teacher, "--out", "r", "--set", "optim.bogus=1"],
            "error[config]",
        ),
        (
            &["train-teacher", "--config", &teacher, "--out", "r", "--set", "train.batch_size=x"],
            "train.batch_size",
        ),
        (&["train-teacher", "--config", &teacher, "--out", "r"], "data.manifest"),
        (
            &["split", "--manifest", "missing/manifest.txt", "--out", "s"],
            "missing/manifest.txt",
        ),
    ];
    for (args, needle) in cases {
        let out = octdistill(dir.path(), args);
        assert_eq!(out.status.code(), Some(1), "{args:?}");
        let stderr = String::from_utf8_lossy(&out.stderr);
        assert!(stderr.starts_with("error["), "{stderr}");
        assert!(stderr.contains(needle), "{stderr}");
    }
    let student = preset("desk-student.cfg");
    let out = octdistill(dir.path(), &["train-teacher", "--config", &student, "--out", "r"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("run.kind = teacher"));
}

#[test]
fn split_and_kfold_files_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "data", "15,15,15", "5,5,5");
    ok(d, &["split", "--manifest", "data/manifest.txt", "--out", "s1", "--seed", "3"]);
    ok(d, &["split", "--manifest", "data/manifest.txt", "--out", "s2", "--seed", "3"]);
    assert_eq!(tree(&d.join("s1")), tree(&d.join("s2")));
    let stdout = ok(d, &["kfold", "--manifest", "data/manifest.txt", "--out", "f", "--k", "5"]);
    assert_eq!(stdout.lines().filter(|l| l.starts_with("fold ")).count(), 5);
    let folds = json(&d.join("f/folds.json"));
    assert!(folds.to_string().len() > 2);
}

#[test]
fn distillation_records_the_teacher_checkpoint_hash() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "data", "12,12,12", "4,4,4");
    let teacher_cfg = preset("desk-teacher.cfg");
    let student_cfg = preset("desk-student.cfg");

    let mut args = vec!["train-teacher", "--config", &teacher_cfg, "--out", "teacher"];
    args.extend(TINY_TEACHER);
    let stdout = ok(d, &args);
    assert!(stdout.contains("epoch   1"), "{stdout}");
    for f in ["model.ckpt", "raw.ckpt", "swa.ckpt", "report.txt", "report.json", "config.cfg", "split.json", "timing.txt"] {
        assert!(d.join("teacher").join(f).exists(), "{f}");
    }
    let echo = std::fs::read_to_string(d.join("teacher/config.cfg")).unwrap();
    assert!(echo.contains("train.max_epochs = 2  # --set"), "{echo}");

    let mut args = vec![
        "distill-student",
        "--config",
        &student_cfg,
        "--out",
        "student",
        "--set",
        "distill.teacher_checkpoint=teacher/model.ckpt",
        "--set",
        "data.split=teacher/split.json",
    ];
    args.extend(TINY_STUDENT);
    ok(d, &args);

    let teacher_bytes = std::fs::read(d.join("teacher/model.ckpt")).unwrap();
    let sha = hex::encode(Sha256::digest(&teacher_bytes));
    let report = json(&d.join("student/report.json"));
    assert_eq!(report["provenance"]["teacher_checkpoint_sha256"], sha.as_str());
    assert_eq!(report["provenance"]["teacher_checkpoint"], "teacher/model.ckpt");
    assert_eq!(report["run"]["teacher_hash_before"], report["run"]["teacher_hash_after"]);
    let teacher_report = json(&d.join("teacher/report.json"));
    assert_eq!(report["run"]["split_hash"], teacher_report["run"]["split_hash"]);
    assert!(std::fs::read_to_string(d.join("student/report.txt"))
        .unwrap()
        .contains(&format!("teacher_checkpoint_sha256 = {sha}")));

    let mut args = vec![
        "evaluate",
        "--config",
        &teacher_cfg,
        "--out",
        "eval",
        "--checkpoint",
        "teacher/model.ckpt",
        "--tta",
        "--set",
        "data.split=teacher/split.json",
    ];
    args.extend(TINY_TEACHER);
    let stdout = ok(d, &args);
    assert!(stdout.contains("tta = true"), "{stdout}");
    assert!(std::fs::read_to_string(d.join("eval/eval.txt")).unwrap().contains(&sha));

    let mut args = vec![
        "distill-student",
        "--config",
        &student_cfg,
        "--out",
        "bad",
        "--set",
        "distill.teacher_checkpoint=teacher/missing.ckpt",
    ];
    args.extend(TINY_STUDENT);
    let out = octdistill(d, &args);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.ckpt"));
}

#[test]
fn cross_validation_reports_every_fold() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "data", "10,10,10", "5,5,5");
    let teacher_cfg = preset("desk-teacher.cfg");
    let mut args = vec!["cross-validate", "--config", &teacher_cfg, "--out", "cv", "--k", "5"];
    args.extend(TINY_TEACHER);
    let stdout = ok(d, &args);
    let report = json(&d.join("cv/cv_report.json"));
    assert_eq!(report["complete"], true);
    assert_eq!(report["folds"].as_array().unwrap().len(), 5);
    let hashes: std::collections::BTreeSet<String> = report["folds"]
        .as_array()
        .unwrap()
        .iter()
        .map(|f| f["split_hash"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(hashes.len(), 5);
    assert!(stdout.contains('±'), "{stdout}");
}

#[test]
fn ablation_rejects_unknown_toggles_and_needs_a_student_for_no_kd() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "data", "12,12,12", "4,4,4");
    let teacher_cfg = preset("desk-teacher.cfg");
    let mut args = vec!["ablate", "--config", &teacher_cfg, "--out", "ab", "--toggles", "no_dropout"];
    args.extend(TINY_TEACHER);
    let out = octdistill(d, &args);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_dropout"));

    let mut args = vec!["ablate", "--config", &teacher_cfg, "--out", "ab", "--toggles", "no_kd"];
    args.extend(TINY_TEACHER);
    let out = octdistill(d, &args);
    assert_eq!(out.status.code(), Some(1));
}
