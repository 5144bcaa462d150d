//! Attraction basins in sample space and weight space.
//!
//! Sample space: normalize samples to [0, 1] by their observed bounds, add
//! i.i.d. Gaussian noise of a given standard deviation, rescale back, and
//! measure how much accuracy against the *original* labels survives. Weight
//! space: standardize each layer's weights to zero mean / unit variance, add
//! Gaussian noise, invert the standardization, and evaluate. The basin size
//! is the first noise amplitude at which the accuracy curve crosses 50%
//! (linearly interpolated), optionally refined by bisection.
//!
//! Every noise draw is keyed by (seed, amplitude index, trial, sample id),
//! so trials parallelize freely, repeated runs match bitwise, and the
//! all-samples curve equals the sample-weighted mean of per-sample curves
//! with shared draws exactly.

use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::data::LabeledDataset;
use crate::linalg::Matrix;
use crate::net::{BnMode, Network};
use crate::parallel;
use crate::rng::{self, tag};
use crate::train;

#[derive(Debug, Error)]
pub enum BasinError {
    #[error("layer {layer} has zero weight variance; cannot standardize")]
    DegenerateLayer { layer: usize },
    #[error("amplitude grid must be strictly increasing and non-empty")]
    BadGrid,
    #[error("curve needs at least 2 amplitudes, got {0}")]
    CurveTooShort(usize),
    #[error("sample index {index} out of range {len}")]
    SampleOutOfRange { index: usize, len: usize },
    #[error(transparent)]
    Net(#[from] crate::net::NetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BasinSpace {
    Sample,
    Weight,
}

impl BasinSpace {
    pub fn name(self) -> &'static str {
        match self {
            BasinSpace::Sample => "sample",
            BasinSpace::Weight => "weight",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BasinScope {
    All,
    Class(usize),
    Sample(usize),
}

impl BasinScope {
    pub fn label(&self) -> String {
        match self {
            BasinScope::All => "all".to_string(),
            BasinScope::Class(k) => format!("class{k}"),
            BasinScope::Sample(i) => format!("sample{i}"),
        }
    }
}

/// Accuracy-versus-noise-amplitude samples for one scope.
#[derive(Debug, Clone)]
pub struct BasinCurve {
    pub space: BasinSpace,
    pub scope: BasinScope,
    pub amplitudes: Vec<f64>,
    pub accuracies: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BasinFlag {
    /// The curve crossed the threshold; `size` holds the interpolated
    /// crossing amplitude.
    Crossed,
    /// Accuracy never fell below the threshold on the probed grid.
    NotReached,
    /// Accuracy was already at or below the threshold at the first grid
    /// point.
    BelowAtZero,
}

/// The interpolated 50%-crossing amplitude (or why there is none).
#[derive(Debug, Clone, Copy)]
pub struct BasinSize {
    pub size: Option<f64>,
    pub bracket: Option<(f64, f64)>,
    pub flag: BasinFlag,
}

/// Defaults for curve construction.
pub const DEFAULT_TRIALS: usize = 20;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// A log-spaced amplitude grid.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    assert!(lo > 0.0 && hi > lo && n >= 2, "bad log grid");
    let (llo, lhi) = (lo.ln(), hi.ln());
    (0..n).map(|i| (llo + (lhi - llo) * i as f64 / (n - 1) as f64).exp()).collect()
}

fn perturbed_rows(
    ds: &LabeledDataset,
    indices: &[usize],
    amplitude: f64,
    seed: u64,
    amp_idx: u64,
    trial: u64,
    clip: bool,
) -> Matrix {
    let (lo, hi) = ds.sample_bounds();
    let scale = if hi > lo { hi - lo } else { 1.0 };
    let dim = ds.dim();
    let mut out = Matrix::zeros(indices.len(), dim);
    let rows: Vec<Vec<f64>> = parallel::map_indexed(indices.len(), |r| {
        let i = indices[r];
        let mut rng = rng::stream(seed, &[tag::SAMPLE_NOISE, amp_idx, trial, i as u64]);
        let normal = StandardNormal;
        ds.samples()
            .row(i)
            .iter()
            .map(|&x| {
                let mut u = (x - lo) / scale;
                let eps: f64 = normal.sample(&mut rng);
                u += amplitude * eps;
                if clip {
                    u = u.clamp(0.0, 1.0);
                }
                lo + u * scale
            })
            .collect()
    });
    for (r, row) in rows.into_iter().enumerate() {
        out.row_mut(r).copy_from_slice(&row);
    }
    out
}

fn correct_count_on_rows(
    net: &Network,
    ds: &LabeledDataset,
    indices: &[usize],
    samples: &Matrix,
    mode: BnMode,
) -> usize {
    let labels: Vec<usize> = indices.iter().map(|&i| ds.labels()[i]).collect();
    train::count_correct(net, samples, &labels, mode)
}

/// Mean accuracy over `trials` Gaussian perturbations of the selected rows
/// at one amplitude. Amplitudes are in units of the normalized [0, 1] data
/// range; predictions are scored against the original labels.
#[allow(clippy::too_many_arguments)]
fn sample_noise_accuracy_scoped(
    net: &Network,
    ds: &LabeledDataset,
    indices: &[usize],
    amplitude: f64,
    trials: usize,
    seed: u64,
    amp_idx: u64,
    mode: BnMode,
    clip: bool,
) -> f64 {
    if indices.is_empty() || trials == 0 {
        return 0.0;
    }
    let counts: Vec<usize> = (0..trials)
        .map(|t| {
            let noisy = perturbed_rows(ds, indices, amplitude, seed, amp_idx, t as u64, clip);
            correct_count_on_rows(net, ds, indices, &noisy, mode)
        })
        .collect();
    let total: usize = counts.iter().sum();
    total as f64 / (trials * indices.len()) as f64
}

/// Mean accuracy under Gaussian input noise over the whole dataset.
pub fn sample_noise_accuracy(
    net: &Network,
    ds: &LabeledDataset,
    amplitude: f64,
    trials: usize,
    seed: u64,
    mode: BnMode,
) -> f64 {
    let indices: Vec<usize> = (0..ds.len()).collect();
    sample_noise_accuracy_scoped(net, ds, &indices, amplitude, trials, seed, 0, mode, false)
}

/// Perturb each layer's weights in standardized coordinates: standardize to
/// zero mean / unit variance, add Gaussian(0, amplitude^2) noise, invert.
/// The original network is untouched.
pub fn perturb_weights(
    net: &Network,
    amplitude: f64,
    seed: u64,
    amp_idx: u64,
    trial: u64,
) -> Result<Network, BasinError> {
    let mut out = net.clone();
    for l in 2..=net.num_layers() {
        let w = out.weight_mut(l);
        let n = w.data().len() as f64;
        let first = w.data()[0];
        if w.data().iter().all(|&v| v == first) {
            return Err(BasinError::DegenerateLayer { layer: l });
        }
        let mean: f64 = w.data().iter().sum::<f64>() / n;
        let var: f64 = w.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        let mut rng = rng::stream(seed, &[tag::WEIGHT_NOISE, amp_idx, trial, l as u64]);
        let normal = StandardNormal;
        for v in w.data_mut().iter_mut() {
            let mut z = (*v - mean) / std;
            let eps: f64 = normal.sample(&mut rng);
            z += amplitude * eps;
            *v = z * std + mean;
        }
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn weight_noise_accuracy_scoped(
    net: &Network,
    ds: &LabeledDataset,
    indices: &[usize],
    amplitude: f64,
    trials: usize,
    seed: u64,
    amp_idx: u64,
    mode: BnMode,
) -> Result<f64, BasinError> {
    if indices.is_empty() || trials == 0 {
        return Ok(0.0);
    }
    let (samples, labels) = ds.gather(indices);
    let counts: Result<Vec<usize>, BasinError> = (0..trials)
        .map(|t| {
            let noisy = perturb_weights(net, amplitude, seed, amp_idx, t as u64)?;
            Ok(train::count_correct(&noisy, &samples, &labels, mode))
        })
        .collect();
    let total: usize = counts?.iter().sum();
    Ok(total as f64 / (trials * indices.len()) as f64)
}

/// Mean accuracy under standardized Gaussian weight noise over the dataset.
pub fn weight_noise_accuracy(
    net: &Network,
    ds: &LabeledDataset,
    amplitude: f64,
    trials: usize,
    seed: u64,
    mode: BnMode,
) -> Result<f64, BasinError> {
    let indices: Vec<usize> = (0..ds.len()).collect();
    weight_noise_accuracy_scoped(net, ds, &indices, amplitude, trials, seed, 0, mode)
}

fn resolve_scope(ds: &LabeledDataset, scope: BasinScope) -> Result<Vec<usize>, BasinError> {
    match scope {
        BasinScope::All => Ok((0..ds.len()).collect()),
        BasinScope::Class(k) => Ok(ds.class_indices(k)),
        BasinScope::Sample(i) => {
            if i >= ds.len() {
                return Err(BasinError::SampleOutOfRange { index: i, len: ds.len() });
            }
            Ok(vec![i])
        }
    }
}

/// Accuracy-vs-amplitude curve for one space and scope over an increasing
/// amplitude grid.
#[allow(clippy::too_many_arguments)]
pub fn basin_curve(
    net: &Network,
    ds: &LabeledDataset,
    space: BasinSpace,
    scope: BasinScope,
    grid: &[f64],
    trials: usize,
    seed: u64,
    mode: BnMode,
) -> Result<BasinCurve, BasinError> {
    if grid.is_empty() || grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(BasinError::BadGrid);
    }
    let indices = resolve_scope(ds, scope)?;
    let mut accuracies = Vec::with_capacity(grid.len());
    for (a, &amplitude) in grid.iter().enumerate() {
        let acc = match space {
            BasinSpace::Sample => sample_noise_accuracy_scoped(
                net, ds, &indices, amplitude, trials, seed, a as u64, mode, false,
            ),
            BasinSpace::Weight => weight_noise_accuracy_scoped(
                net, ds, &indices, amplitude, trials, seed, a as u64, mode,
            )?,
        };
        accuracies.push(acc);
    }
    Ok(BasinCurve { space, scope, amplitudes: grid.to_vec(), accuracies, trials, seed })
}

/// First downward crossing of `threshold`, located by linear interpolation
/// between the bracketing grid points.
pub fn basin_size(curve: &BasinCurve, threshold: f64) -> Result<BasinSize, BasinError> {
    let n = curve.amplitudes.len();
    if n < 2 {
        return Err(BasinError::CurveTooShort(n));
    }
    if curve.accuracies[0] <= threshold {
        return Ok(BasinSize { size: None, bracket: None, flag: BasinFlag::BelowAtZero });
    }
    for i in 0..n - 1 {
        let (a0, a1) = (curve.amplitudes[i], curve.amplitudes[i + 1]);
        let (y0, y1) = (curve.accuracies[i], curve.accuracies[i + 1]);
        if y0 > threshold && y1 <= threshold {
            let t = (y0 - threshold) / (y0 - y1);
            let size = a0 + t * (a1 - a0);
            return Ok(BasinSize { size: Some(size), bracket: Some((a0, a1)), flag: BasinFlag::Crossed });
        }
    }
    Ok(BasinSize { size: None, bracket: None, flag: BasinFlag::NotReached })
}

/// Refine a crossing bracket by bisection with fresh trials at each probe
/// until the bracket is narrower than `tol`.
#[allow(clippy::too_many_arguments)]
pub fn refine_basin_size(
    net: &Network,
    ds: &LabeledDataset,
    space: BasinSpace,
    scope: BasinScope,
    bracket: (f64, f64),
    trials: usize,
    seed: u64,
    mode: BnMode,
    threshold: f64,
    tol: f64,
) -> Result<f64, BasinError> {
    let indices = resolve_scope(ds, scope)?;
    let (mut lo, mut hi) = bracket;
    let mut guard = 0;
    while hi - lo > tol && guard < 64 {
        let mid = 0.5 * (lo + hi);
        // Key the probe stream by the amplitude bits so refinement draws are
        // fresh but reproducible.
        let amp_key = mid.to_bits().rotate_left(17) ^ tag::REFINE;
        let acc = match space {
            BasinSpace::Sample => sample_noise_accuracy_scoped(
                net, ds, &indices, mid, trials, seed, amp_key, mode, false,
            ),
            BasinSpace::Weight => {
                weight_noise_accuracy_scoped(net, ds, &indices, mid, trials, seed, amp_key, mode)?
            }
        };
        if acc > threshold {
            lo = mid;
        } else {
            hi = mid;
        }
        guard += 1;
    }
    Ok(0.5 * (lo + hi))
}

/// Convenience: curve + size in one call with the default threshold.
#[allow(clippy::too_many_arguments)]
pub fn measure_basin(
    net: &Network,
    ds: &LabeledDataset,
    space: BasinSpace,
    scope: BasinScope,
    grid: &[f64],
    trials: usize,
    seed: u64,
    mode: BnMode,
) -> Result<(BasinCurve, BasinSize), BasinError> {
    let curve = basin_curve(net, ds, space, scope, grid, trials, seed, mode)?;
    let size = basin_size(&curve, DEFAULT_THRESHOLD)?;
    Ok((curve, size))
}
