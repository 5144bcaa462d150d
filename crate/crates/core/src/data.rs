//! Dataset ingestion: IDX-format files, normalization, seeded subsetting and
//! synthetic fixtures.
//!
//! Datasets are immutable after construction; every transformation returns a
//! new value, so analysis tasks can read one dataset concurrently.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::linalg::Matrix;
use crate::rng::{self, tag};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("bad IDX magic in {path}: expected {expected}, found {found}")]
    BadMagic { path: String, expected: u32, found: u32 },
    #[error("image/label count mismatch: {images} images vs {labels} labels")]
    DimensionMismatch { images: usize, labels: usize },
    #[error("truncated IDX file {path}: need {needed} bytes, have {have}")]
    Truncated { path: String, needed: usize, have: usize },
    #[error("degenerate value range: min == max == {0}")]
    DegenerateRange(f64),
    #[error("subset of {requested} rows exceeds dataset size {available}")]
    TooLarge { requested: usize, available: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// How `subset` picks rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubsetStrategy {
    /// Even per-class quotas, remainder round-robin by class index.
    Stratified,
    /// Plain uniform sampling without replacement.
    Uniform,
}

/// A sample matrix (one row per sample) with integer class labels.
///
/// `value_range` records the (min, max) of the raw data before
/// normalization so normalized values can be rescaled back exactly.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    samples: Matrix,
    labels: Vec<usize>,
    value_range: (f64, f64),
    num_classes: usize,
    normalized: bool,
}

impl LabeledDataset {
    pub fn new(samples: Matrix, labels: Vec<usize>, num_classes: usize) -> Self {
        assert_eq!(samples.rows(), labels.len(), "row/label count mismatch");
        assert!(labels.iter().all(|&l| l < num_classes), "label out of range");
        let value_range = observed_range(&samples);
        LabeledDataset { samples, labels, value_range, num_classes, normalized: false }
    }

    pub fn len(&self) -> usize {
        self.samples.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.samples.cols()
    }

    pub fn samples(&self) -> &Matrix {
        &self.samples
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn value_range(&self) -> (f64, f64) {
        self.value_range
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Min/max over the current sample values (post-normalization if
    /// `normalize` ran). Basin perturbations work in these units.
    pub fn sample_bounds(&self) -> (f64, f64) {
        observed_range(&self.samples)
    }

    pub fn class_indices(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }

    /// Rows `indices` gathered into a dense matrix with their labels.
    pub fn gather(&self, indices: &[usize]) -> (Matrix, Vec<usize>) {
        let mut m = Matrix::zeros(indices.len(), self.dim());
        for (r, &i) in indices.iter().enumerate() {
            m.row_mut(r).copy_from_slice(self.samples.row(i));
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (m, labels)
    }

    /// Affine map of all entries onto [0, 1] using the recorded raw range.
    pub fn normalize(&self) -> Result<LabeledDataset, DataError> {
        let (lo, hi) = self.value_range;
        if hi <= lo {
            return Err(DataError::DegenerateRange(lo));
        }
        let scale = hi - lo;
        let samples = self.samples.map(|v| (v - lo) / scale);
        Ok(LabeledDataset {
            samples,
            labels: self.labels.clone(),
            value_range: self.value_range,
            num_classes: self.num_classes,
            normalized: true,
        })
    }

    /// Undo `normalize` using the recorded raw range.
    pub fn inverse_rescale(&self) -> LabeledDataset {
        let (lo, hi) = self.value_range;
        let scale = hi - lo;
        let samples = self.samples.map(|v| lo + v * scale);
        LabeledDataset {
            samples,
            labels: self.labels.clone(),
            value_range: self.value_range,
            num_classes: self.num_classes,
            normalized: false,
        }
    }

    /// `n` rows chosen without replacement, deterministic per seed. Selected
    /// indices are emitted in ascending order.
    pub fn subset(&self, n: usize, seed: u64, strategy: SubsetStrategy) -> Result<LabeledDataset, DataError> {
        if n > self.len() {
            return Err(DataError::TooLarge { requested: n, available: self.len() });
        }
        let mut rng = rng::stream(seed, &[tag::SUBSET]);
        let mut chosen: Vec<usize> = match strategy {
            SubsetStrategy::Uniform => {
                let mut all: Vec<usize> = (0..self.len()).collect();
                all.shuffle(&mut rng);
                all.truncate(n);
                all
            }
            SubsetStrategy::Stratified => {
                let c = self.num_classes;
                let base = n / c;
                let rem = n % c;
                let mut picked = Vec::with_capacity(n);
                let mut leftovers = Vec::new();
                for k in 0..c {
                    let mut idx = self.class_indices(k);
                    idx.shuffle(&mut rng);
                    let quota = base + usize::from(k < rem);
                    let take = quota.min(idx.len());
                    picked.extend_from_slice(&idx[..take]);
                    leftovers.extend_from_slice(&idx[take..]);
                }
                // Classes smaller than their quota leave a deficit; fill it
                // from the remaining pool.
                if picked.len() < n {
                    leftovers.shuffle(&mut rng);
                    picked.extend_from_slice(&leftovers[..n - picked.len()]);
                }
                picked
            }
        };
        chosen.sort_unstable();
        let (samples, labels) = self.gather(&chosen);
        Ok(LabeledDataset {
            samples,
            labels,
            value_range: self.value_range,
            num_classes: self.num_classes,
            normalized: self.normalized,
        })
    }
}

fn observed_range(m: &Matrix) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in m.data() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo > hi {
        (0.0, 0.0)
    } else {
        (lo, hi)
    }
}

const IMAGE_MAGIC: u32 = 2051;
const LABEL_MAGIC: u32 = 2049;

fn read_be_u32(bytes: &[u8], offset: usize, path: &str) -> Result<u32, DataError> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(DataError::Truncated { path: path.to_string(), needed: end, have: bytes.len() });
    }
    Ok(u32::from_be_bytes([bytes[offset], bytes[offset + 1], bytes[offset + 2], bytes[offset + 3]]))
}

/// Parse an IDX image/label file pair into a dataset.
///
/// Header layout: big-endian u32 magic (2051 for images, 2049 for labels)
/// followed by one u32 size per dimension, then raw unsigned bytes. Image
/// rows are flattened row-major; pixel bytes are widened to f64 in [0, 255].
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset, DataError> {
    let img_name = images_path.display().to_string();
    let lab_name = labels_path.display().to_string();
    let img = fs::read(images_path)?;
    let lab = fs::read(labels_path)?;

    let img_magic = read_be_u32(&img, 0, &img_name)?;
    if img_magic != IMAGE_MAGIC {
        return Err(DataError::BadMagic { path: img_name, expected: IMAGE_MAGIC, found: img_magic });
    }
    let n_images = read_be_u32(&img, 4, &img_name)? as usize;
    let rows = read_be_u32(&img, 8, &img_name)? as usize;
    let cols = read_be_u32(&img, 12, &img_name)? as usize;
    let dim = rows * cols;
    let img_needed = 16 + n_images * dim;
    if img.len() < img_needed {
        return Err(DataError::Truncated { path: img_name, needed: img_needed, have: img.len() });
    }

    let lab_magic = read_be_u32(&lab, 0, &lab_name)?;
    if lab_magic != LABEL_MAGIC {
        return Err(DataError::BadMagic { path: lab_name, expected: LABEL_MAGIC, found: lab_magic });
    }
    let n_labels = read_be_u32(&lab, 4, &lab_name)? as usize;
    if n_labels != n_images {
        return Err(DataError::DimensionMismatch { images: n_images, labels: n_labels });
    }
    let lab_needed = 8 + n_labels;
    if lab.len() < lab_needed {
        return Err(DataError::Truncated { path: lab_name, needed: lab_needed, have: lab.len() });
    }

    let data: Vec<f64> = img[16..16 + n_images * dim].iter().map(|&b| b as f64).collect();
    let samples = Matrix::from_vec(n_images, dim, data);
    let labels: Vec<usize> = lab[8..8 + n_labels].iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    Ok(LabeledDataset::new_with_range(samples, labels, num_classes))
}

impl LabeledDataset {
    fn new_with_range(samples: Matrix, labels: Vec<usize>, num_classes: usize) -> Self {
        let value_range = observed_range(&samples);
        LabeledDataset { samples, labels, value_range, num_classes, normalized: false }
    }
}

/// A deterministic, provably separable fixture: class `k` is a Gaussian blob
/// of spread `spread` around the one-hot basis vector `e_k`.
pub fn synthetic_blobs(num_classes: usize, dim: usize, per_class: usize, spread: f64, seed: u64) -> LabeledDataset {
    assert!(num_classes >= 2, "need at least two classes");
    assert!(dim >= num_classes, "dim must be at least num_classes");
    let mut rng = rng::stream(seed, &[tag::SYNTH]);
    let normal = StandardNormal;
    let rows = num_classes * per_class;
    let mut data = Vec::with_capacity(rows * dim);
    let mut labels = Vec::with_capacity(rows);
    for k in 0..num_classes {
        for _ in 0..per_class {
            for j in 0..dim {
                let center = if j == k { 1.0 } else { 0.0 };
                let eps: f64 = normal.sample(&mut rng);
                data.push(center + spread * eps);
            }
            labels.push(k);
        }
    }
    LabeledDataset::new_with_range(Matrix::from_vec(rows, dim, data), labels, num_classes)
}
