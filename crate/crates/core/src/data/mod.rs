//! Manifests, image files, patient-level splitting, synthetic data and
//! batching.

mod manifest;
mod pgm;
mod split;
mod synth;

pub use manifest::{load_manifest, DatasetManifest, SampleRecord};
pub use pgm::{decode_image, encode_pgm, read_image};
pub use split::{patient_kfold, patient_stratified_split, FoldPlan, SplitFractions, SplitPlan};
pub use synth::{
    neh_shaped_metadata, mean_intensity, render_scan, scan_features, separability_signal, synth_generate, synth_metadata, CLASS_NAMES,
    NEH_PATIENTS, NEH_SCANS,
};

use rand::seq::SliceRandom;

use crate::augment::ImageBuffer;
use crate::error::{Error, Result};
use crate::seed::{self, Stream};

/// A manifest with every image decoded into memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub images: Vec<ImageBuffer>,
}

impl Dataset {
    /// Reads every image; the first unreadable file aborts with its path.
    pub fn load(manifest: DatasetManifest) -> Result<Self> {
        let images = manifest
            .records
            .iter()
            .map(|r| read_image(&manifest.resolve(r)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { manifest, images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn label(&self, i: usize) -> usize {
        self.manifest.records[i].label
    }
}

/// Splits `indices` into batches of `batch_size`, keeping the last partial
/// batch. With `shuffle`, the order is a pure function of `(seed, epoch)`.
pub fn batch_order(
    indices: &[usize],
    batch_size: usize,
    shuffle: bool,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Data("batch size must be at least 1".into()));
    }
    let mut order = indices.to_vec();
    if shuffle {
        order.shuffle(&mut seed::rng(seed, Stream::Shuffle, &[epoch]));
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// One micro-batch of decoded records.
#[derive(Clone, Debug)]
pub struct Batch<'a> {
    pub indices: Vec<usize>,
    pub images: Vec<&'a ImageBuffer>,
    pub labels: Vec<usize>,
    pub patients: Vec<&'a str>,
}

/// Micro-batches over `subset` of an in-memory dataset.
pub fn batch_iterator<'a>(
    dataset: &'a Dataset,
    subset: &[usize],
    batch_size: usize,
    shuffle: bool,
    seed: u64,
    epoch: u64,
) -> Result<impl Iterator<Item = Batch<'a>> + 'a> {
    if let Some(bad) = subset.iter().find(|i| **i >= dataset.len()) {
        return Err(Error::Data(format!("record index {bad} outside dataset of {}", dataset.len())));
    }
    let order = batch_order(subset, batch_size, shuffle, seed, epoch)?;
    Ok(order.into_iter().map(move |indices| Batch {
        images: indices.iter().map(|&i| &dataset.images[i]).collect(),
        labels: indices.iter().map(|&i| dataset.label(i)).collect(),
        patients: indices
            .iter()
            .map(|&i| dataset.manifest.records[i].patient_id.as_str())
            .collect(),
        indices,
    }))
}
