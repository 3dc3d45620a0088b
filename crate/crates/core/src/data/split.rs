use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::manifest::DatasetManifest;
use crate::error::{Error, Result};
use crate::io::sha256_hex;
use crate::seed::{self, Stream};

/// Patients grouped by stratum (the label of each patient's first record),
/// in class order then first-appearance order.
fn patients_by_class(manifest: &DatasetManifest) -> Vec<Vec<String>> {
    let mut class_of: HashMap<&str, usize> = HashMap::new();
    let mut groups = vec![Vec::new(); manifest.num_classes()];
    for r in &manifest.records {
        if !class_of.contains_key(r.patient_id.as_str()) {
            class_of.insert(&r.patient_id, r.label);
            groups[r.label].push(r.patient_id.clone());
        }
    }
    groups
}

fn indices_of(manifest: &DatasetManifest, patients: &BTreeSet<String>) -> Vec<usize> {
    manifest
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| patients.contains(&r.patient_id))
        .map(|(i, _)| i)
        .collect()
}

/// Patient-level train/validation/test assignment with the derived record
/// indices (in manifest order).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitPlan {
    pub train_patients: BTreeSet<String>,
    pub val_patients: BTreeSet<String>,
    pub test_patients: BTreeSet<String>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct SplitFile {
    train: Vec<String>,
    val: Vec<String>,
    test: Vec<String>,
}

impl SplitPlan {
    /// Builds a plan from patient sets, checking they are disjoint and cover
    /// every patient of the manifest.
    pub fn from_patients(
        manifest: &DatasetManifest,
        train: BTreeSet<String>,
        val: BTreeSet<String>,
        test: BTreeSet<String>,
    ) -> Result<Self> {
        for (a, b, sa, sb) in [
            (&train, &val, "train", "val"),
            (&train, &test, "train", "test"),
            (&val, &test, "val", "test"),
        ] {
            if let Some(p) = a.intersection(b).next() {
                return Err(Error::Data(format!("patient `{p}` is in both {sa} and {sb}")));
            }
        }
        for p in manifest.patients() {
            if !(train.contains(&p) || val.contains(&p) || test.contains(&p)) {
                return Err(Error::Data(format!("patient `{p}` is not assigned to any split")));
            }
        }
        let known: BTreeSet<String> = manifest.patients().into_iter().collect();
        if let Some(p) = train.iter().chain(&val).chain(&test).find(|p| !known.contains(*p)) {
            return Err(Error::Data(format!("split names unknown patient `{p}`")));
        }
        Ok(Self {
            train: indices_of(manifest, &train),
            val: indices_of(manifest, &val),
            test: indices_of(manifest, &test),
            train_patients: train,
            val_patients: val,
            test_patients: test,
        })
    }

    pub fn to_json(&self) -> String {
        let file = SplitFile {
            train: self.train_patients.iter().cloned().collect(),
            val: self.val_patients.iter().cloned().collect(),
            test: self.test_patients.iter().cloned().collect(),
        };
        serde_json::to_string_pretty(&file).expect("string lists serialize") + "\n"
    }

    pub fn from_json(manifest: &DatasetManifest, text: &str) -> Result<Self> {
        let file: SplitFile =
            serde_json::from_str(text).map_err(|e| Error::Data(format!("malformed split file: {e}")))?;
        let set = |v: Vec<String>| v.into_iter().collect::<BTreeSet<_>>();
        Self::from_patients(manifest, set(file.train), set(file.val), set(file.test))
    }

    /// SHA-256 of the canonical patient assignment.
    pub fn hash(&self) -> String {
        sha256_hex(self.to_json().as_bytes())
    }
}

/// Fractions of patients per split: test first, then validation as a
/// fraction of the remainder.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitFractions {
    pub test: f64,
    pub val_of_remainder: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            test: 0.2,
            val_of_remainder: 0.2,
        }
    }
}

/// Per class: shuffle patients, put one in each of test/val/train, then
/// hand each remaining patient to the split furthest below its target count.
pub fn patient_stratified_split(
    manifest: &DatasetManifest,
    fractions: SplitFractions,
    seed: u64,
) -> Result<SplitPlan> {
    let SplitFractions { test, val_of_remainder } = fractions;
    if !(test > 0.0 && test < 1.0 && val_of_remainder > 0.0 && val_of_remainder < 1.0) {
        return Err(Error::Data(format!(
            "split fractions must lie in (0, 1), got test {test} and val {val_of_remainder}"
        )));
    }
    // order: test, val, train
    let targets = [test, (1.0 - test) * val_of_remainder, (1.0 - test) * (1.0 - val_of_remainder)];
    let mut sets: [BTreeSet<String>; 3] = Default::default();
    for (class, mut patients) in patients_by_class(manifest).into_iter().enumerate() {
        if patients.len() < 3 {
            return Err(Error::Data(format!(
                "class `{}` has {} patient(s); at least 3 are needed to populate every split",
                manifest.class_names[class],
                patients.len()
            )));
        }
        patients.shuffle(&mut seed::rng(seed, Stream::Split, &[class as u64]));
        let mut counts = [0usize; 3];
        for (n, patient) in patients.into_iter().enumerate() {
            let slot = if n < 3 {
                n
            } else {
                let total = (n + 1) as f64;
                let deficit = |s: usize| targets[s] * total - counts[s] as f64;
                (0..3).fold(0, |best, s| if deficit(s) > deficit(best) { s } else { best })
            };
            counts[slot] += 1;
            sets[slot].insert(patient);
        }
    }
    let [test_set, val_set, train_set] = sets;
    SplitPlan::from_patients(manifest, train_set, val_set, test_set)
}

/// `k` class-stratified patient partitions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldPlan {
    pub folds: Vec<BTreeSet<String>>,
}

impl FoldPlan {
    pub fn k(&self) -> usize {
        self.folds.len()
    }

    /// Record indices for fold `i`: (training, held-out).
    pub fn fold_records(&self, manifest: &DatasetManifest, i: usize) -> (Vec<usize>, Vec<usize>) {
        let held = &self.folds[i];
        let (mut train, mut held_out) = (Vec::new(), Vec::new());
        for (idx, r) in manifest.records.iter().enumerate() {
            if held.contains(&r.patient_id) {
                held_out.push(idx);
            } else {
                train.push(idx);
            }
        }
        (train, held_out)
    }

    /// Fold `i` as a split plan whose validation and test sets are both the
    /// held-out fold.
    pub fn fold_split(&self, manifest: &DatasetManifest, i: usize) -> SplitPlan {
        let held = self.folds[i].clone();
        let train: BTreeSet<String> = self
            .folds
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .flat_map(|(_, f)| f.iter().cloned())
            .collect();
        let (train_idx, held_idx) = self.fold_records(manifest, i);
        SplitPlan {
            train_patients: train,
            val_patients: held.clone(),
            test_patients: held,
            train: train_idx,
            val: held_idx.clone(),
            test: held_idx,
        }
    }

    pub fn to_json(&self) -> String {
        let folds: Vec<Vec<&String>> = self.folds.iter().map(|f| f.iter().collect()).collect();
        serde_json::to_string_pretty(&folds).expect("string lists serialize") + "\n"
    }
}

/// Per class: shuffle patients and deal them round-robin, continuing the
/// rotation across classes so fold sizes stay balanced overall.
pub fn patient_kfold(manifest: &DatasetManifest, k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::Data(format!("k-fold needs k >= 2, got {k}")));
    }
    let mut folds = vec![BTreeSet::new(); k];
    let mut next = 0;
    for (class, mut patients) in patients_by_class(manifest).into_iter().enumerate() {
        if patients.len() < k {
            return Err(Error::Data(format!(
                "class `{}` has {} patient(s), fewer than k = {k}",
                manifest.class_names[class],
                patients.len()
            )));
        }
        patients.shuffle(&mut seed::rng(seed, Stream::Split, &[1_000 + class as u64]));
        for p in patients {
            folds[next].insert(p);
            next = (next + 1) % k;
        }
    }
    Ok(FoldPlan { folds })
}
