use std::collections::{BTreeSet, HashMap};

use octdistill_core::augment::ImageBuffer;
use octdistill_core::data::{
    batch_iterator, batch_order, decode_image, encode_pgm, load_manifest, mean_intensity, neh_shaped_metadata,
    patient_kfold, patient_stratified_split, separability_signal, synth_generate, synth_metadata, Dataset,
    DatasetManifest, SplitFractions, SplitPlan, NEH_PATIENTS,
};
use octdistill_core::Error;
use proptest::prelude::*;

fn manifest_error_line(text: &str) -> (usize, String) {
    match DatasetManifest::parse(text, "") {
        Err(Error::Manifest { line, reason }) => (line, reason),
        other => panic!("expected a manifest error, got {other:?}"),
    }
}

#[test]
fn parses_well_formed_manifest() {
    let text = "classes:normal,drusen,cnv\na.pgm,normal,p1\nb.pgm,cnv,p2\n\nc.pgm,drusen,p1\n";
    let m = DatasetManifest::parse(text, "/data").unwrap();
    assert_eq!(m.records.len(), 3);
    assert_eq!(m.records.iter().map(|r| r.label).collect::<Vec<_>>(), [0, 2, 1]);
    assert_eq!(m.patients(), ["p1", "p2"]);
    assert_eq!(m.resolve(&m.records[0]), std::path::Path::new("/data/a.pgm"));
    assert_eq!(DatasetManifest::parse(&m.to_text(), "/data").unwrap(), m);
}

#[test]
fn manifest_errors_carry_line_numbers() {
    let (line, reason) = manifest_error_line("classes:a,b\nx.pgm,a,p1\nx.pgm,b,p2\n");
    assert_eq!(line, 3);
    assert!(reason.contains("x.pgm"), "{reason}");
    let (line, reason) = manifest_error_line("classes:a,b\nx.pgm,a,p1\ny.pgm,c,p2\n");
    assert_eq!(line, 3);
    assert!(reason.contains("unknown class `c`"));
    let (line, _) = manifest_error_line("classes:a\nx.pgm,a\n");
    assert_eq!(line, 2);
    let (line, _) = manifest_error_line("classes:a\nx.pgm,a,\n");
    assert_eq!(line, 2);
    let (line, _) = manifest_error_line("normal,drusen\n");
    assert_eq!(line, 1);
}

#[test]
fn empty_manifest_has_no_records() {
    for text in ["", "\n\n", "classes:a,b\n"] {
        let err = DatasetManifest::parse(text, "").unwrap_err();
        assert!(err.to_string().contains("no records"), "{err}");
    }
}

#[test]
fn missing_manifest_is_an_io_error() {
    let err = load_manifest(std::path::Path::new("/nonexistent/manifest.txt")).unwrap_err();
    assert_eq!(err.category(), "io");
}

#[test]
fn pgm_round_trip() {
    let data: Vec<u8> = (0..35).map(|i| (i * 7) as u8).collect();
    let img = ImageBuffer::new(7, 5, 1, data).unwrap();
    let bytes = encode_pgm(&img).unwrap();
    assert!(bytes.starts_with(b"P5"));
    assert_eq!(decode_image(&bytes, "x.pgm".as_ref()).unwrap(), img);
    let rgb = ImageBuffer::filled(2, 2, 3, 9).unwrap();
    assert!(encode_pgm(&rgb).is_err());
    let err = decode_image(b"P5 garbage", "bad.pgm".as_ref()).unwrap_err();
    assert!(err.to_string().contains("bad.pgm"));
}

fn assert_disjoint_cover(m: &DatasetManifest, plan: &SplitPlan) {
    let sets = [&plan.train_patients, &plan.val_patients, &plan.test_patients];
    for i in 0..3 {
        for j in i + 1..3 {
            assert!(sets[i].is_disjoint(sets[j]));
        }
    }
    let all: BTreeSet<String> = m.patients().into_iter().collect();
    let union: BTreeSet<String> = sets.iter().flat_map(|s| s.iter().cloned()).collect();
    assert_eq!(all, union);
    assert_eq!(plan.train.len() + plan.val.len() + plan.test.len(), m.records.len());
}

fn patients_of_class(m: &DatasetManifest, set: &BTreeSet<String>, class: usize) -> usize {
    let ids: BTreeSet<&str> = m
        .records
        .iter()
        .filter(|r| r.label == class && set.contains(&r.patient_id))
        .map(|r| r.patient_id.as_str())
        .collect();
    ids.len()
}

#[test]
fn stratified_split_matches_targets_on_cohort_shape() {
    let m = neh_shaped_metadata(7);
    assert_eq!(m.patients().len(), 441);
    for seed in 0..20 {
        let plan = patient_stratified_split(&m, SplitFractions::default(), seed).unwrap();
        assert_disjoint_cover(&m, &plan);
        for (class, &count) in NEH_PATIENTS.iter().enumerate() {
            let test = patients_of_class(&m, &plan.test_patients, class) as f64;
            assert!((test - (0.2 * count as f64).round()).abs() <= 1.0, "class {class}: {test}");
            let val = patients_of_class(&m, &plan.val_patients, class) as f64;
            assert!((val - (0.16 * count as f64).round()).abs() <= 1.0);
        }
        let n = m.records.len() as f64;
        assert!((plan.test.len() as f64 / n - 0.2).abs() <= 0.05);
        assert!((plan.val.len() as f64 / n - 0.16).abs() <= 0.05);
        assert!((plan.train.len() as f64 / n - 0.64).abs() <= 0.05);
    }
}

#[test]
fn split_is_deterministic_and_round_trips() {
    let m = neh_shaped_metadata(1);
    let a = patient_stratified_split(&m, SplitFractions::default(), 9).unwrap();
    let b = patient_stratified_split(&m, SplitFractions::default(), 9).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.hash(), b.hash());
    let c = patient_stratified_split(&m, SplitFractions::default(), 10).unwrap();
    assert_ne!(a.hash(), c.hash());
    assert_eq!(SplitPlan::from_json(&m, &a.to_json()).unwrap(), a);
}

#[test]
fn split_needs_three_patients_per_class() {
    let m = synth_metadata(&[10, 10], &[3, 2], 0).unwrap();
    let err = patient_stratified_split(&m, SplitFractions::default(), 0).unwrap_err();
    assert!(err.to_string().contains("drusen"), "{err}");
    let m = synth_metadata(&[3, 3], &[3, 3], 0).unwrap();
    let plan = patient_stratified_split(&m, SplitFractions::default(), 0).unwrap();
    assert_eq!(plan.test_patients.len(), 2);
    assert_eq!(plan.val_patients.len(), 2);
}

#[test]
fn split_file_with_overlap_is_rejected() {
    let m = synth_metadata(&[6, 6], &[3, 3], 0).unwrap();
    let json = r#"{"train":["normal-p000","normal-p001","drusen-p000"],"val":["normal-p002","drusen-p001"],"test":["drusen-p002","normal-p000"]}"#;
    assert!(SplitPlan::from_json(&m, json).is_err());
    let json = r#"{"train":["normal-p000"],"val":["normal-p002"],"test":["drusen-p002"]}"#;
    assert!(SplitPlan::from_json(&m, json).is_err());
}

#[test]
fn kfold_partitions_patients_evenly() {
    let m = neh_shaped_metadata(3);
    let plan = patient_kfold(&m, 5, 11).unwrap();
    assert_eq!(plan.k(), 5);
    let mut seen: HashMap<String, usize> = HashMap::new();
    for fold in &plan.folds {
        for p in fold {
            *seen.entry(p.clone()).or_default() += 1;
        }
    }
    assert_eq!(seen.len(), 441);
    assert!(seen.values().all(|c| *c == 1));
    for class in 0..3 {
        let per: Vec<usize> = plan.folds.iter().map(|f| patients_of_class(&m, f, class)).collect();
        assert!(per.iter().max().unwrap() - per.iter().min().unwrap() <= 1, "{per:?}");
    }
    for i in 0..5 {
        let (train, held) = plan.fold_records(&m, i);
        assert_eq!(train.len() + held.len(), m.records.len());
        let split = plan.fold_split(&m, i);
        assert!(split.train_patients.is_disjoint(&split.test_patients));
    }
    assert_eq!(plan, patient_kfold(&m, 5, 11).unwrap());
}

#[test]
fn kfold_errors() {
    let m = synth_metadata(&[10, 10], &[4, 5], 0).unwrap();
    assert!(patient_kfold(&m, 1, 0).is_err());
    assert!(patient_kfold(&m, 5, 0).is_err());
    assert!(patient_kfold(&m, 4, 0).is_ok());
}

#[test]
fn batches_keep_the_partial_tail() {
    let idx: Vec<usize> = (0..10).collect();
    let b = batch_order(&idx, 4, false, 0, 0).unwrap();
    assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), [4, 4, 2]);
    assert_eq!(b.concat(), idx);
    let s1 = batch_order(&idx, 4, true, 5, 2).unwrap();
    assert_eq!(s1, batch_order(&idx, 4, true, 5, 2).unwrap());
    assert_ne!(s1, batch_order(&idx, 4, true, 5, 3).unwrap());
    let mut sorted = s1.concat();
    sorted.sort();
    assert_eq!(sorted, idx);
    assert!(batch_order(&idx, 0, false, 0, 0).is_err());
}

#[test]
fn synthetic_dataset_contract() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth_generate(dir.path(), &[200, 200, 200], &[20, 20, 20], 32, 42).unwrap();
    assert_eq!(m.records.len(), 600);
    assert_eq!(m.patients().len(), 60);
    let loaded = load_manifest(&dir.path().join("manifest.txt")).unwrap();
    assert_eq!(loaded.records, m.records);

    let again = tempfile::tempdir().unwrap();
    synth_generate(again.path(), &[200, 200, 200], &[20, 20, 20], 32, 42).unwrap();
    for r in m.records.iter().step_by(37) {
        let a = std::fs::read(dir.path().join(&r.image_path)).unwrap();
        let b = std::fs::read(again.path().join(&r.image_path)).unwrap();
        assert_eq!(a, b);
    }
    assert_eq!(
        std::fs::read(dir.path().join("manifest.txt")).unwrap(),
        std::fs::read(again.path().join("manifest.txt")).unwrap()
    );

    let ds = Dataset::load(loaded).unwrap();
    let labels: Vec<usize> = (0..ds.len()).map(|i| ds.label(i)).collect();
    let mut means = [0.0; 3];
    for (img, &l) in ds.images.iter().zip(&labels) {
        assert_eq!((img.width(), img.height(), img.channels()), (32, 32, 1));
        means[l] += mean_intensity(img) / 200.0;
    }
    assert!(means[0] < means[1] && means[1] < means[2], "{means:?}");

    let split = patient_stratified_split(&ds.manifest, SplitFractions::default(), 42).unwrap();
    let signal = separability_signal(&ds.images, &labels, &split.train, &split.val);
    assert!(signal >= 0.95, "separability {signal}");

    let batches: Vec<_> = batch_iterator(&ds, &split.val, 8, false, 0, 0).unwrap().collect();
    assert_eq!(batches.iter().map(|b| b.labels.len()).sum::<usize>(), split.val.len());
    assert_eq!(batches[0].indices, split.val[..8]);
    assert_eq!(batches[0].patients[0], ds.manifest.records[split.val[0]].patient_id);
}

#[test]
fn unreadable_image_names_its_path() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth_generate(dir.path(), &[2, 2], &[1, 1], 16, 0).unwrap();
    std::fs::remove_file(dir.path().join(&m.records[1].image_path)).unwrap();
    let err = Dataset::load(m.clone()).unwrap_err();
    assert!(err.to_string().contains(&m.records[1].image_path), "{err}");
}

#[test]
fn generator_rejects_bad_counts() {
    let dir = tempfile::tempdir().unwrap();
    assert!(synth_generate(dir.path(), &[5, 5], &[6, 2], 32, 0).is_err());
    assert!(synth_generate(dir.path(), &[5, 5], &[0, 2], 32, 0).is_err());
    assert!(synth_generate(dir.path(), &[5, 5], &[2], 32, 0).is_err());
    assert!(synth_generate(dir.path(), &[5, 5], &[2, 2], 4, 0).is_err());
}

#[test]
fn generator_supports_a_fourth_class() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth_generate(dir.path(), &[4, 4, 4, 4], &[2, 2, 2, 2], 16, 3).unwrap();
    assert_eq!(m.class_names.last().map(String::as_str), Some("dme"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn cohort_splits_and_folds_never_leak(seed in any::<u64>()) {
        let m = neh_shaped_metadata(seed);
        let plan = patient_stratified_split(&m, SplitFractions::default(), seed).unwrap();
        prop_assert!(plan.train_patients.is_disjoint(&plan.val_patients));
        prop_assert!(plan.train_patients.is_disjoint(&plan.test_patients));
        prop_assert!(plan.val_patients.is_disjoint(&plan.test_patients));
        let folds = patient_kfold(&m, 5, seed).unwrap();
        for i in 0..5 {
            for j in i + 1..5 {
                prop_assert!(folds.folds[i].is_disjoint(&folds.folds[j]));
            }
        }
    }
}
