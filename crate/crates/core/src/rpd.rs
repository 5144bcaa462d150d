//! Rank probability distributions.
//!
//! For each neuron of a hidden layer, the local fields of all P samples form
//! a projection sequence. Multiplying by the sign of the neuron's composed
//! connection to an output class and ranking the class's samples inside the
//! descending order of that sequence gives per-(class, neuron) rank sets;
//! histogramming the normalized ranks over all classes and neurons of the
//! layer yields the layer's rank probability distribution (RPD). A flat RPD
//! means isotropic weight vectors; mass piled at high ranks means the layer
//! aligns weight vectors to push its classes to the top, the signature of
//! order-preserving behavior. The least-squares slope of the histogram (its
//! "steepness") condenses this into one number per layer.

use thiserror::Error;

use crate::data::LabeledDataset;
use crate::linalg::Matrix;
use crate::lmap::{self, BnFold};
use crate::net::{BnMode, Network};
use crate::parallel;

#[derive(Debug, Error)]
pub enum RpdError {
    #[error("no samples of class {0} present")]
    EmptyClass(usize),
    #[error("input sequence contains duplicate values; ordering is undefined")]
    DuplicateInputs,
    #[error("sequence lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("layer {layer} is not a hidden layer (2..={max})")]
    NotHidden { layer: usize, max: usize },
    #[error(transparent)]
    Lmap(#[from] lmap::LmapError),
    #[error(transparent)]
    Net(#[from] crate::net::NetError),
}

/// What a histogram covers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RpdScope {
    pub layer: usize,
    pub class: Option<usize>,
    pub neuron: Option<usize>,
}

/// Normalized-rank histogram with density scaled to mean 1, so a flat
/// distribution is the constant 1 regardless of P or bin count.
#[derive(Debug, Clone)]
pub struct RpdHistogram {
    pub bins: usize,
    pub counts: Vec<u64>,
    pub density: Vec<f64>,
    pub total: u64,
    pub scope: RpdScope,
}

impl RpdHistogram {
    pub fn from_counts(counts: Vec<u64>, scope: RpdScope) -> Self {
        let bins = counts.len();
        let total: u64 = counts.iter().sum();
        let density = if total == 0 {
            vec![0.0; bins]
        } else {
            counts.iter().map(|&c| c as f64 * bins as f64 / total as f64).collect()
        };
        RpdHistogram { bins, counts, density, total, scope }
    }

    pub fn bin_centers(&self) -> Vec<f64> {
        (0..self.bins).map(|j| (j as f64 + 0.5) / self.bins as f64).collect()
    }

    /// Integral of |density difference| over [0, 1].
    pub fn l1_distance(&self, other: &RpdHistogram) -> f64 {
        assert_eq!(self.bins, other.bins, "bin counts differ");
        self.density
            .iter()
            .zip(&other.density)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / self.bins as f64
    }
}

/// Least-squares fit of density against normalized rank. Mass piled at high
/// ranks (low `r`) gives a negative slope; `steepness` reports |slope|.
#[derive(Debug, Clone, Copy)]
pub struct RpdGradient {
    pub slope: f64,
    pub residual: f64,
}

impl RpdGradient {
    pub fn steepness(&self) -> f64 {
        self.slope.abs()
    }
}

/// The signed projection sequence of one neuron: column `neuron` of the
/// local-field matrix, multiplied by `sign`.
pub fn signed_projection(fields: &Matrix, neuron: usize, sign: i8) -> Vec<f64> {
    let s = sign as f64;
    (0..fields.rows()).map(|i| fields.get(i, neuron) * s).collect()
}

/// Descending ranks (1 = largest) with ties broken by sample index.
pub fn rank_descending(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        values[b].partial_cmp(&values[a]).unwrap().then_with(|| a.cmp(&b))
    });
    let mut ranks = vec![0usize; values.len()];
    for (pos, &idx) in order.iter().enumerate() {
        ranks[idx] = pos + 1;
    }
    ranks
}

/// Ranks (descending, stable ties) of the class-`class` samples within the
/// whole sequence.
pub fn class_ranks(values: &[f64], labels: &[usize], class: usize) -> Result<Vec<usize>, RpdError> {
    if values.len() != labels.len() {
        return Err(RpdError::LengthMismatch(values.len(), labels.len()));
    }
    let ranks = rank_descending(values);
    let out: Vec<usize> = (0..values.len()).filter(|&i| labels[i] == class).map(|i| ranks[i]).collect();
    if out.is_empty() {
        return Err(RpdError::EmptyClass(class));
    }
    Ok(out)
}

/// True iff `output` preserves the descending order of `input` exactly.
pub fn is_order_preserving(input: &[f64], output: &[f64]) -> Result<bool, RpdError> {
    if input.len() != output.len() {
        return Err(RpdError::LengthMismatch(input.len(), output.len()));
    }
    let mut seen = input.to_vec();
    seen.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if seen.windows(2).any(|w| w[0] == w[1]) {
        return Err(RpdError::DuplicateInputs);
    }
    let argsort = |v: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[b].partial_cmp(&v[a]).unwrap().then_with(|| a.cmp(&b)));
        idx
    };
    Ok(argsort(input) == argsort(output))
}

fn normalized_rank(rank: usize, p: usize) -> f64 {
    if p <= 1 {
        0.0
    } else {
        (rank - 1) as f64 / (p - 1) as f64
    }
}

fn bin_of(r: f64, bins: usize) -> usize {
    ((r * bins as f64) as usize).min(bins - 1)
}

/// Histogram of normalized class ranks accumulated over neurons and classes
/// directly from a local-field matrix and a sign matrix (`signs[class][neuron]`).
///
/// Neurons whose sign entry is zero contribute nothing for that class.
pub fn rpd_from_fields(
    fields: &Matrix,
    signs: &[Vec<i8>],
    labels: &[usize],
    scope: RpdScope,
    bins: usize,
) -> RpdHistogram {
    assert!(bins >= 1, "need at least one bin");
    let p = fields.rows();
    let neurons = fields.cols();
    let classes: Vec<usize> = match scope.class {
        Some(k) => vec![k],
        None => (0..signs.len()).collect(),
    };
    let neuron_list: Vec<usize> = match scope.neuron {
        Some(i) => vec![i],
        None => (0..neurons).collect(),
    };
    // Per-class sample index lists, shared by all neurons.
    let class_members: Vec<Vec<usize>> = (0..signs.len())
        .map(|k| (0..p).filter(|&i| labels[i] == k).collect())
        .collect();

    let per_neuron: Vec<Vec<u64>> = parallel::map_indexed(neuron_list.len(), |ni| {
        let neuron = neuron_list[ni];
        let col: Vec<f64> = (0..p).map(|i| fields.get(i, neuron)).collect();
        let mut ranks_pos: Option<Vec<usize>> = None;
        let mut ranks_neg: Option<Vec<usize>> = None;
        let mut counts = vec![0u64; bins];
        for &k in &classes {
            let s = signs[k][neuron];
            if s == 0 {
                continue;
            }
            let ranks = if s > 0 {
                ranks_pos.get_or_insert_with(|| rank_descending(&col))
            } else {
                ranks_neg.get_or_insert_with(|| {
                    let negated: Vec<f64> = col.iter().map(|v| -v).collect();
                    rank_descending(&negated)
                })
            };
            for &i in &class_members[k] {
                let r = normalized_rank(ranks[i], p);
                counts[bin_of(r, bins)] += 1;
            }
        }
        counts
    });

    let mut counts = vec![0u64; bins];
    for c in per_neuron {
        for (acc, v) in counts.iter_mut().zip(c) {
            *acc += v;
        }
    }
    RpdHistogram::from_counts(counts, scope)
}

/// The rank probability distribution of a hidden layer over a dataset.
///
/// Signs come from the composed linear map from the layer's output to the
/// logits (`compose(net, layer + 1)`), BN-folded with running statistics
/// when the network uses batch norm; local fields are collected in `mode`.
pub fn layer_rpd(
    net: &Network,
    ds: &LabeledDataset,
    layer: usize,
    class_filter: Option<usize>,
    bins: usize,
    mode: BnMode,
) -> Result<RpdHistogram, RpdError> {
    let max_hidden = net.num_layers() - 1;
    if layer < 2 || layer > max_hidden {
        return Err(RpdError::NotHidden { layer, max: max_hidden });
    }
    let map = if net.has_bn() {
        lmap::compose_with_bn(net, layer + 1, BnFold::Running)?
    } else {
        lmap::compose(net, layer + 1)?
    };
    let signs = lmap::sign_matrix(&map);
    let fields = net.collect_local_fields(ds.samples(), layer, mode, 4096)?;
    let scope = RpdScope { layer, class: class_filter, neuron: None };
    Ok(rpd_from_fields(&fields, &signs, ds.labels(), scope, bins))
}

/// Least-squares slope of density versus bin-center normalized rank.
pub fn rpd_gradient(hist: &RpdHistogram) -> RpdGradient {
    let n = hist.bins as f64;
    assert!(hist.bins >= 2, "need at least two bins for a slope");
    let xs = hist.bin_centers();
    let ys = &hist.density;
    let mean_x: f64 = xs.iter().sum::<f64>() / n;
    let mean_y: f64 = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxx += (x - mean_x) * (x - mean_x);
        sxy += (x - mean_x) * (y - mean_y);
    }
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let residual = (xs
        .iter()
        .zip(ys)
        .map(|(x, y)| {
            let fit = intercept + slope * x;
            (y - fit) * (y - fit)
        })
        .sum::<f64>()
        / n)
        .sqrt();
    RpdGradient { slope, residual }
}

/// Steepness of a layer's RPD in one call.
pub fn layer_steepness(
    net: &Network,
    ds: &LabeledDataset,
    layer: usize,
    bins: usize,
    mode: BnMode,
) -> Result<f64, RpdError> {
    let hist = layer_rpd(net, ds, layer, None, bins, mode)?;
    Ok(rpd_gradient(&hist).steepness())
}

pub const DEFAULT_BINS: usize = 50;
