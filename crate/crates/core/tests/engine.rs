use std::cell::RefCell;

use octdistill_autodiff::Tensor;
use octdistill_core::augment::AugmentationProfile;
use octdistill_core::data::{patient_stratified_split, synth_generate, Dataset, SplitFractions, SplitPlan};
use octdistill_core::engine::{
    confusion, cross_validate, distill_student, evaluate, format_mean_std, mean_std, metrics_from_confusion, run_ablation, stack,
    train_student_supervised, train_teacher, tta_evaluate, write_run, AlphaSpec, Classifier, ConfusionMatrix, DistillRunConfig,
    LossChoice, Primary, RunHooks, Toggle, TrainRunConfig,
};
use octdistill_core::losses::DistillParams;
use octdistill_core::model::{Architecture, Model, StudentConfig, TeacherConfig};
use octdistill_core::optim::AdamConfig;
use octdistill_core::{Error, Result};
use octdistill_testkit::oracles::one_vs_rest;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

fn cm(rows: &[&[u64]]) -> ConfusionMatrix {
    ConfusionMatrix {
        counts: rows.iter().map(|r| r.to_vec()).collect(),
    }
}

#[test]
fn confusion_counts_by_hand() {
    let m = confusion(&[0, 1, 1], &[0, 1, 2], 3).unwrap();
    assert_eq!(m.counts, vec![vec![1, 0, 0], vec![0, 1, 0], vec![0, 1, 0]]);
    assert_eq!(m.total(), 3);

    let perfect = confusion(&[2, 0, 1, 1], &[2, 0, 1, 1], 3).unwrap();
    for (i, row) in perfect.counts.iter().enumerate() {
        for (j, c) in row.iter().enumerate() {
            assert_eq!(*c > 0, i == j);
        }
    }
    assert_eq!(perfect.total(), 4);
}

#[test]
fn confusion_rejects_bad_input() {
    assert!(matches!(confusion(&[0, 3], &[0, 1], 3), Err(Error::Eval(_))));
    assert!(matches!(confusion(&[0], &[0, 1], 3), Err(Error::Eval(_))));
}

#[test]
fn confusion_merge_is_entrywise_sum() {
    let mut a = confusion(&[0, 1], &[0, 0], 2).unwrap();
    let b = confusion(&[1, 1], &[1, 0], 2).unwrap();
    a.merge(&b).unwrap();
    assert_eq!(a.counts, vec![vec![1, 2], vec![0, 1]]);
    assert!(a.merge(&ConfusionMatrix::zeros(3)).is_err());
}

#[test]
fn perfect_matrix_scores_one() {
    let m = metrics_from_confusion(&cm(&[&[4, 0, 0], &[0, 2, 0], &[0, 0, 7]])).unwrap();
    assert_eq!((m.accuracy, m.sensitivity, m.specificity), (1.0, 1.0, 1.0));
}

#[test]
fn worked_matrix_matches_oracle_exactly() {
    let rows: &[&[u64]] = &[&[5, 1, 0], &[2, 6, 0], &[0, 1, 5]];
    let m = metrics_from_confusion(&cm(rows)).unwrap();
    let o = one_vs_rest(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>());
    assert_eq!((m.exact_accuracy.num as i128, m.exact_accuracy.den as i128), (o.accuracy.num, o.accuracy.den));
    let s = m.exact_sensitivity.unwrap();
    let os = o.sensitivity.unwrap();
    assert_eq!((s.num as i128, s.den as i128), (os.num, os.den));
    let p = m.exact_specificity.unwrap();
    let op = o.specificity.unwrap();
    assert_eq!((p.num as i128, p.den as i128), (op.num, op.den));
    assert_eq!((m.exact_accuracy.num, m.exact_accuracy.den), (4, 5));
}

#[test]
fn single_class_predictions_on_balanced_labels() {
    let m = metrics_from_confusion(&cm(&[&[0, 3, 0], &[0, 3, 0], &[0, 3, 0]])).unwrap();
    assert_eq!((m.exact_accuracy.num, m.exact_accuracy.den), (1, 3));
    let spec: Vec<f64> = m.per_class.iter().map(|c| c.specificity.unwrap().value()).collect();
    assert_eq!(spec, vec![1.0, 0.0, 1.0]);
}

#[test]
fn absent_class_is_excluded_and_flagged() {
    let m = metrics_from_confusion(&cm(&[&[3, 1, 0], &[0, 4, 0], &[0, 0, 0]])).unwrap();
    assert_eq!(m.sensitivity_excluded, vec![2]);
    assert!(m.per_class[2].sensitivity.is_none());
    assert_eq!(m.exact_sensitivity.unwrap().value(), (0.75 + 1.0) / 2.0);
    assert!(m.specificity_excluded.is_empty());

    let only_one = metrics_from_confusion(&cm(&[&[2, 0], &[0, 0]])).unwrap();
    assert_eq!(only_one.specificity_excluded, vec![0]);
}

#[test]
fn empty_matrix_is_an_error() {
    assert!(matches!(metrics_from_confusion(&ConfusionMatrix::zeros(3)), Err(Error::Eval(_))));
}

#[test]
fn metrics_agree_with_brute_force_oracle_on_random_matrices() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..1000 {
        let k = rng.gen_range(2..=5);
        let mut rows: Vec<Vec<u64>> = (0..k)
            .map(|_| (0..k).map(|_| if rng.gen_bool(0.2) { 0 } else { rng.gen_range(0..20) }).collect())
            .collect();
        if rows.iter().flatten().all(|c| *c == 0) {
            rows[0][0] = 1;
        }
        let m = metrics_from_confusion(&ConfusionMatrix { counts: rows.clone() }).unwrap();
        let o = one_vs_rest(&rows);
        let pair = |f: octdistill_core::engine::Fraction| (f.num as i128, f.den as i128);
        assert_eq!(pair(m.exact_accuracy), (o.accuracy.num, o.accuracy.den));
        assert_eq!(m.exact_sensitivity.map(pair), o.sensitivity.map(|r| (r.num, r.den)));
        assert_eq!(m.exact_specificity.map(pair), o.specificity.map(|r| (r.num, r.den)));
    }
}

#[test]
fn mean_std_uses_population_deviation() {
    let (m, s) = mean_std(&[90.0, 92.0, 94.0, 96.0]);
    assert_eq!(m, 93.0);
    assert!((s - 5.0f64.sqrt()).abs() < 1e-12);
    assert_eq!(mean_std(&[91.5; 5]).1, 0.0);
    assert_eq!(format_mean_std(92.6, 2.3), "92.60 ± 2.30");
    assert_eq!(format_mean_std(91.5, 0.0), "91.50 ± 0.00");
}

fn tiny_data(dir: &TempDir) -> (Dataset, SplitPlan) {
    let m = synth_generate(dir.path(), &[12, 12, 12], &[4, 4, 4], 32, 7).unwrap();
    let split = patient_stratified_split(&m, SplitFractions::default(), 7).unwrap();
    (Dataset::load(m).unwrap(), split)
}

fn tiny_teacher() -> Architecture {
    Architecture::Teacher(TeacherConfig {
        stage_depths: vec![1, 1],
        stage_widths: vec![8, 16],
        ..TeacherConfig::default()
    })
}

fn tiny_student() -> Architecture {
    Architecture::Student(StudentConfig {
        block_counts: vec![1, 1],
        widths: vec![8, 12],
        ..StudentConfig::default()
    })
}

fn teacher_cfg() -> TrainRunConfig {
    TrainRunConfig {
        model: tiny_teacher(),
        profile_name: "teacher".into(),
        augment: AugmentationProfile {
            resize_large: 36,
            ..AugmentationProfile::teacher()
        },
        heavy_augmentation: true,
        loss: LossChoice::Focal {
            alpha: AlphaSpec::InverseFrequency,
            gamma: 2.0,
        },
        base_lr: 3e-3,
        backbone_lr: Some(6e-4),
        weight_decay: 0.05,
        min_lr: 3e-6,
        warmup_epochs: 1,
        max_epochs: 3,
        patience: 10,
        batch_size: 4,
        accumulation_steps: 2,
        swa: true,
        swa_start_fraction: 0.5,
        eval_batch_size: 16,
        adam: AdamConfig::default(),
        tta: true,
        seed: 3,
    }
}

fn student_cfg() -> DistillRunConfig {
    DistillRunConfig {
        student: TrainRunConfig {
            model: tiny_student(),
            profile_name: "student".into(),
            augment: AugmentationProfile::student(),
            loss: LossChoice::CrossEntropy,
            backbone_lr: None,
            swa: false,
            max_epochs: 2,
            batch_size: 6,
            ..teacher_cfg()
        },
        distill: DistillParams::default(),
        teacher_checkpoint: None,
    }
}

struct Constant {
    row: Vec<f32>,
    calls: RefCell<Vec<usize>>,
}

impl Classifier for Constant {
    fn num_classes(&self) -> usize {
        self.row.len()
    }

    fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        let n = batch.shape()[0];
        self.calls.borrow_mut().push(n);
        Ok(Tensor::new(vec![n, self.row.len()], self.row.repeat(n))?)
    }
}

#[test]
fn tta_runs_five_views_per_sample_and_matches_single_view_for_constant_logits() {
    let dir = TempDir::new().unwrap();
    let (ds, split) = tiny_data(&dir);
    let profile = AugmentationProfile::teacher();
    let model = Constant {
        row: vec![0.1, 2.0, -1.0],
        calls: RefCell::new(Vec::new()),
    };
    let tta = tta_evaluate(&model, &ds, &split.test, &profile).unwrap();
    let calls = model.calls.borrow().clone();
    assert_eq!(calls.len(), split.test.len());
    assert!(calls.iter().all(|n| *n == 5));
    let single = evaluate(&model, &ds, &split.test, &profile, 4).unwrap();
    assert_eq!(tta.metrics, single.metrics);
    assert_eq!(tta.predictions, single.predictions);
    assert!(tta.tta && !single.tta);
    let again = tta_evaluate(&model, &ds, &split.test, &profile).unwrap();
    assert_eq!(again, tta);
}

#[test]
fn evaluation_rejects_empty_subsets() {
    let dir = TempDir::new().unwrap();
    let (ds, _) = tiny_data(&dir);
    let model = Model::build(tiny_teacher(), 1).unwrap();
    assert!(evaluate(&model, &ds, &[], &AugmentationProfile::teacher(), 4).is_err());
    assert!(tta_evaluate(&model, &ds, &[], &AugmentationProfile::teacher()).is_err());
    assert!(stack(&[]).is_err());
}

#[test]
fn evaluation_is_invariant_to_batch_size() {
    let dir = TempDir::new().unwrap();
    let (ds, split) = tiny_data(&dir);
    let profile = AugmentationProfile::teacher();
    for arch in [tiny_teacher(), tiny_student()] {
        let model = Model::build(arch, 11).unwrap();
        let one = evaluate(&model, &ds, &split.val, &profile, 1).unwrap();
        let eight = evaluate(&model, &ds, &split.val, &profile, 8).unwrap();
        assert_eq!(one.predictions, eight.predictions);
        assert!((one.loss - eight.loss).abs() < 1e-5);

        let inputs: Vec<Tensor> = split.val[..8]
            .iter()
            .map(|&i| octdistill_core::augment::val_pipeline(&ds.images[i], &profile).unwrap())
            .collect();
        let batched = model.infer(&stack(&inputs).unwrap()).unwrap();
        for (i, x) in inputs.iter().enumerate() {
            let single = model.infer(&stack(std::slice::from_ref(x)).unwrap()).unwrap();
            for (c, v) in single.data().iter().enumerate() {
                assert!((v - batched.data()[i * 3 + c]).abs() < 1e-5);
            }
        }
    }
}

#[test]
fn teacher_run_reports_schedule_groups_and_swa() {
    let dir = TempDir::new().unwrap();
    let (ds, split) = tiny_data(&dir);
    let cfg = teacher_cfg();
    let mut seen = Vec::new();
    let mut cb = |r: &octdistill_core::engine::EpochRecord| seen.push(r.epoch);
    let out = train_teacher(
        &cfg,
        &ds,
        &split,
        RunHooks {
            out_dir: None,
            on_epoch: Some(&mut cb),
        },
    )
    .unwrap();
    let r = &out.report;
    assert_eq!(seen, vec![0, 1, 2]);
    assert_eq!(r.history.len(), 3);
    let schedule = cfg.schedule();
    for e in &r.history {
        assert_eq!(e.lr, schedule.lr_at(e.epoch).unwrap());
        assert_eq!(e.group_lrs[0], ("head".to_string(), e.lr));
        assert_eq!(e.group_lrs[1].0, "backbone");
        assert!((e.group_lrs[1].1 - e.lr * 0.2).abs() < 1e-18);
    }
    assert_eq!(r.swa_snapshots, 2);
    assert!(r.swa_val.is_some() && out.swa.is_some());
    match r.primary {
        Primary::Swa => assert!(r.swa_val.as_ref().unwrap().metrics.accuracy > r.raw_val.metrics.accuracy),
        Primary::Raw => assert!(r.swa_val.as_ref().unwrap().metrics.accuracy <= r.raw_val.metrics.accuracy),
    }
    assert!(r.test.as_ref().unwrap().tta);
    assert_eq!(r.loss, "focal");
    assert_eq!(r.focal_alpha.as_ref().unwrap().len(), 3);
    assert!(r.steps.is_empty());
    assert_eq!(r.split_hash, split.hash());
}

#[test]
fn training_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let (ds, split) = tiny_data(&dir);
    let mut cfg = teacher_cfg();
    cfg.max_epochs = 2;
    let a = train_teacher(&cfg, &ds, &split, RunHooks::default()).unwrap();
    let b = train_teacher(&cfg, &ds, &split, RunHooks::default()).unwrap();
    assert_eq!(a.report, b.report);
    assert_eq!(a.best.param_hash(), b.best.param_hash());
    let out_a = TempDir::new().unwrap();
    let out_b = TempDir::new().unwrap();
    write_run(out_a.path(), "t", &a, "run.kind = teacher\n", Default::default()).unwrap();
    write_run(out_b.path(), "t", &b, "run.kind = teacher\n", Default::default()).unwrap();
    for f in ["report.txt", "report.json", "raw.ckpt", "swa.ckpt", "model.ckpt", "config.cfg"] {
        assert_eq!(
            std::fs::read(out_a.path().join(f)).unwrap(),
            std::fs::read(out_b.path().join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn distillation_keeps_teacher_frozen_and_logs_exact_decomposition() {
    let dir = TempDir::new().unwrap();
    let (ds, split) = tiny_data(&dir);
    let teacher = Model::build(tiny_teacher(), 5).unwrap();
    let before = teacher.param_hash();
    let cfg = student_cfg();
    let out = distill_student(&cfg, &teacher, &ds, &split, RunHooks::default()).unwrap();
    assert_eq!(teacher.param_hash(), before);
    let r = &out.report;
    assert_eq!(r.teacher_hash_before.as_deref(), Some(before.as_str()));
    assert_eq!(r.teacher_hash_after, r.teacher_hash_before);
    assert_eq!(r.loss, "kd");
    let per_epoch = split.train.len().div_ceil(cfg.student.batch_size);
    assert_eq!(r.steps.len(), per_epoch * cfg.student.max_epochs);
    for s in &r.steps {
        assert_eq!(s.total, 0.3 * s.ce + 0.7 * 16.0 * s.kl);
        assert!(s.kl >= 0.0 && s.ce > 0.0);
    }
}

#[test]
fn distillation_rejects_mismatched_or_invalid_setups() {
    let dir = TempDir::new().unwrap();
    let (ds, split) = tiny_data(&dir);
    let four = Model::build(
        Architecture::Teacher(TeacherConfig {
            num_classes: 4,
            stage_depths: vec![1],
            stage_widths: vec![8],
            ..TeacherConfig::default()
        }),
        1,
    )
    .unwrap();
    let err = distill_student(&student_cfg(), &four, &ds, &split, RunHooks::default()).unwrap_err();
    assert!(matches!(err, Error::Training(ref m) if m.contains("classes")));

    let teacher = Model::build(tiny_teacher(), 1).unwrap();
    let mut focal = student_cfg();
    focal.student.loss = LossChoice::Focal {
        alpha: AlphaSpec::Uniform,
        gamma: 2.0,
    };
    assert!(matches!(
        distill_student(&focal, &teacher, &ds, &split, RunHooks::default()),
        Err(Error::Config(_))
    ));
    let mut bad_t = student_cfg();
    bad_t.distill.temperature = 0.0;
    assert!(distill_student(&bad_t, &teacher, &ds, &split, RunHooks::default()).is_err());
}

#[test]
fn empty_splits_are_rejected() {
    let dir = TempDir::new().unwrap();
    let (ds, mut split) = tiny_data(&dir);
    split.val.clear();
    assert!(matches!(
        train_teacher(&teacher_cfg(), &ds, &split, RunHooks::default()),
        Err(Error::Training(_))
    ));
}

#[test]
fn divergence_aborts_and_saves_last_good_checkpoint() {
    let dir = TempDir::new().unwrap();
    let (ds, split) = tiny_data(&dir);
    let mut cfg = teacher_cfg();
    cfg.base_lr = 1e36;
    cfg.backbone_lr = Some(1e36);
    cfg.warmup_epochs = 0;
    cfg.max_epochs = 4;
    let out = TempDir::new().unwrap();
    let err = train_teacher(
        &cfg,
        &ds,
        &split,
        RunHooks {
            out_dir: Some(out.path()),
            on_epoch: None,
        },
    )
    .unwrap_err();
    assert!(matches!(err, Error::Training(ref m) if m.contains("non-finite")), "{err}");
    let saved = octdistill_core::model::load_checkpoint(&out.path().join("last_good.ckpt")).unwrap();
    assert!(saved.params().values().all(|t| t.all_finite()));
}

#[test]
fn cross_validation_reports_one_row_per_fold() {
    let dir = TempDir::new().unwrap();
    let (ds, _) = tiny_data(&dir);
    let mut cfg = teacher_cfg();
    cfg.max_epochs = 1;
    cfg.warmup_epochs = 0;
    cfg.tta = false;
    let out = TempDir::new().unwrap();
    let report = cross_validate(&cfg, None, &ds, 3, 9, Some(out.path())).unwrap();
    assert_eq!(report.folds.len(), 3);
    assert!(report.complete);
    let hashes: std::collections::HashSet<_> = report.folds.iter().map(|f| f.split_hash.clone()).collect();
    assert_eq!(hashes.len(), 3);
    assert_eq!(report.summary.len(), 3);
    assert!(report.summary.iter().all(|r| r.formatted.contains(" ± ")));
    assert!(out.path().join("cv_report.txt").exists());
    assert!(cross_validate(&cfg, None, &ds, 1, 9, None).is_err());
}

#[test]
fn ablation_toggles_change_one_setting_each() {
    let base = teacher_cfg();
    let aug = Toggle::NoHeavyAug.apply(&base);
    assert!(!aug.heavy_augmentation);
    assert_eq!(TrainRunConfig { heavy_augmentation: true, ..aug }, base);
    let swa = Toggle::NoSwa.apply(&base);
    assert_eq!(TrainRunConfig { swa: true, ..swa }, base);
    let focal = Toggle::NoFocal.apply(&base);
    assert_eq!(focal.loss, LossChoice::CrossEntropy);
    assert_eq!(
        TrainRunConfig {
            loss: base.loss.clone(),
            ..focal
        },
        base
    );
    assert!(Toggle::parse("no_swa").is_ok());
    assert!(matches!(Toggle::parse("no_dropout"), Err(Error::Config(_))));
}

#[test]
fn ablation_rows_share_the_split() {
    let dir = TempDir::new().unwrap();
    let (ds, split) = tiny_data(&dir);
    let mut cfg = teacher_cfg();
    cfg.max_epochs = 1;
    cfg.warmup_epochs = 0;
    let report = run_ablation(&cfg, &[Toggle::NoHeavyAug, Toggle::NoSwa, Toggle::NoFocal], None, &ds, &split).unwrap();
    let names: Vec<&str> = report.rows.iter().map(|r| r.name.as_str()).collect();
    assert_eq!(names, vec!["full", "no_heavy_aug", "no_swa", "no_focal"]);
    assert!(report.splits_identical());
    assert!(report.to_text().contains("splits_identical = true"));
    assert!(run_ablation(&cfg, &[Toggle::NoKd], None, &ds, &split).is_err());
}

#[test]
fn supervised_student_uses_plain_cross_entropy() {
    let dir = TempDir::new().unwrap();
    let (ds, split) = tiny_data(&dir);
    let mut cfg = student_cfg().student;
    cfg.max_epochs = 1;
    cfg.warmup_epochs = 0;
    let out = train_student_supervised(&cfg, &ds, &split, RunHooks::default()).unwrap();
    assert_eq!(out.report.loss, "ce");
    assert!(out.report.teacher_hash_before.is_none());
    assert!(out.report.steps.is_empty());
}
