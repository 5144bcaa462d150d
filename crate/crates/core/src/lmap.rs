//! Linear substitution maps: the single affine map obtained by replacing
//! every activation from a given layer onward with the identity, optionally
//! folding batch-norm scalings and mean shifts, plus the pruning-accuracy
//! diagnostic built on it.
//!
//! Convention: `compose(net, l)` returns the operator `M` (with offset `c`)
//! such that `logits = M · x + c` where `x` is the activation *entering*
//! layer `l` (that is, `X^(l-1)`). For `l = L` this is the final weight
//! matrix itself.

use thiserror::Error;

use crate::data::LabeledDataset;
use crate::linalg::Matrix;
use crate::net::{BnMode, Network};
use crate::train;

#[derive(Debug, Error)]
pub enum LmapError {
    #[error("batch-norm running statistics at layer {layer} were never populated")]
    UnpopulatedStats { layer: usize },
    #[error("layer {layer} out of range 2..={max}")]
    LayerOutOfRange { layer: usize, max: usize },
    #[error(transparent)]
    Net(#[from] crate::net::NetError),
}

/// An affine map from some layer's input activation to the output logits.
#[derive(Debug, Clone)]
pub struct LmapMatrix {
    pub matrix: Matrix,
    /// Affine part collecting bias terms and batch-norm mean shifts; zero
    /// for plain bias-free composition.
    pub offset: Vec<f64>,
    pub from_layer: usize,
    pub bn_folded: bool,
}

impl LmapMatrix {
    /// Apply the map to a batch of row vectors.
    pub fn apply(&self, x: &Matrix) -> Matrix {
        let mut out = x.matmul_nt(&self.matrix);
        for i in 0..out.rows() {
            for (v, c) in out.row_mut(i).iter_mut().zip(&self.offset) {
                *v += c;
            }
        }
        out
    }
}

/// Where `compose_with_bn` takes the batch-norm statistics from.
pub enum BnFold<'a> {
    /// The accumulated running statistics.
    Running,
    /// Explicit per-layer (mean, variance) pairs, one entry per hidden layer
    /// of the network (`l = 2..=L-1` in order).
    Stats(&'a [(Vec<f64>, Vec<f64>)]),
}

fn check_layer(net: &Network, from_layer: usize) -> Result<(), LmapError> {
    let max = net.num_layers();
    if from_layer < 2 || from_layer > max {
        return Err(LmapError::LayerOutOfRange { layer: from_layer, max });
    }
    Ok(())
}

/// Fold layers `from_layer..=L` into one affine map, ignoring batch norm.
pub fn compose(net: &Network, from_layer: usize) -> Result<LmapMatrix, LmapError> {
    check_layer(net, from_layer)?;
    let layers = net.num_layers();
    let mut matrix = net.weight(from_layer).clone();
    let mut offset: Vec<f64> = match net.bias(from_layer) {
        Some(b) => b.to_vec(),
        None => vec![0.0; matrix.rows()],
    };
    for l in from_layer + 1..=layers {
        let w = net.weight(l);
        matrix = w.matmul(&matrix);
        offset = w.matvec(&offset);
        if let Some(b) = net.bias(l) {
            for (o, bv) in offset.iter_mut().zip(b) {
                *o += bv;
            }
        }
    }
    Ok(LmapMatrix { matrix, offset, from_layer, bn_folded: false })
}

/// Fold layers `from_layer..=L` into one affine map with batch-norm
/// scalings and mean shifts included, so that for an identity-activation
/// network the map reproduces the BN forward pass exactly.
pub fn compose_with_bn(net: &Network, from_layer: usize, fold: BnFold<'_>) -> Result<LmapMatrix, LmapError> {
    check_layer(net, from_layer)?;
    if !net.has_bn() {
        let mut m = compose(net, from_layer)?;
        m.bn_folded = true;
        return Ok(m);
    }
    let layers = net.num_layers();
    let mut matrix: Option<Matrix> = None;
    let mut offset: Vec<f64> = Vec::new();
    for l in from_layer..=layers {
        let w = net.weight(l);
        // Affine action of layer l on its input: y = A x + beta.
        let mut a = w.clone();
        let mut beta = match net.bias(l) {
            Some(b) => b.to_vec(),
            None => vec![0.0; w.rows()],
        };
        let is_hidden = l < layers;
        if is_hidden {
            if let Some(state) = net.bn_state(l) {
                let (mean, var): (Vec<f64>, Vec<f64>) = match &fold {
                    BnFold::Running => {
                        if state.updates == 0 {
                            return Err(LmapError::UnpopulatedStats { layer: l });
                        }
                        (state.running_mean.clone(), state.running_var.clone())
                    }
                    BnFold::Stats(stats) => {
                        let (m, v) = &stats[l - 2];
                        (m.clone(), v.clone())
                    }
                };
                let diag: Vec<f64> = state
                    .gamma
                    .iter()
                    .zip(&var)
                    .map(|(&g, &v)| g / (v + state.epsilon).sqrt())
                    .collect();
                for (i, &d) in diag.iter().enumerate() {
                    for j in 0..a.cols() {
                        let v = a.get(i, j) * d;
                        a.set(i, j, v);
                    }
                    beta[i] = (beta[i] - mean[i]) * d;
                }
            }
        }
        match matrix {
            None => {
                matrix = Some(a);
                offset = beta;
            }
            Some(prev) => {
                matrix = Some(a.matmul(&prev));
                offset = a.matvec(&offset);
                for (o, b) in offset.iter_mut().zip(&beta) {
                    *o += b;
                }
            }
        }
    }
    Ok(LmapMatrix { matrix: matrix.unwrap(), offset, from_layer, bn_folded: true })
}

/// Entrywise sign of row `class` of the map: -1, 0 or +1.
pub fn sign_row(map: &LmapMatrix, class: usize) -> Vec<i8> {
    map.matrix
        .row(class)
        .iter()
        .map(|&v| {
            if v > 0.0 {
                1
            } else if v < 0.0 {
                -1
            } else {
                0
            }
        })
        .collect()
}

/// Sign matrix over all output classes.
pub fn sign_matrix(map: &LmapMatrix) -> Vec<Vec<i8>> {
    (0..map.matrix.rows()).map(|k| sign_row(map, k)).collect()
}

/// Accuracy after replacing layers `from_layer..=L` with their linear
/// substitution map: the prefix runs the true nonlinear dynamics, the suffix
/// is the (BN-folded when applicable) affine map.
///
/// `bn_mode` selects the folded statistics: `Eval` folds running statistics;
/// `BatchStats` folds the statistics the substituted (identity-activation)
/// propagation produces over this dataset.
pub fn prune_accuracy(
    net: &Network,
    from_layer: usize,
    ds: &LabeledDataset,
    bn_mode: BnMode,
) -> Result<f64, LmapError> {
    check_layer(net, from_layer)?;
    let x_in = net.activation_at(ds.samples(), from_layer - 1, bn_mode)?;
    let map = if net.has_bn() {
        match bn_mode {
            BnMode::Eval => compose_with_bn(net, from_layer, BnFold::Running)?,
            BnMode::BatchStats => {
                let stats = linearized_batch_stats(net, &x_in, from_layer);
                compose_with_bn(net, from_layer, BnFold::Stats(&stats))?
            }
        }
    } else {
        compose(net, from_layer)?
    };
    let logits = map.apply(&x_in);
    let labels = ds.labels();
    let mut correct = 0usize;
    for i in 0..logits.rows() {
        if train::argmax(logits.row(i)) == labels[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / labels.len().max(1) as f64)
}

/// Batch statistics of the identity-activation propagation starting from
/// `x_in` at `from_layer`. Entries for layers below `from_layer` are filler
/// (never read by `compose_with_bn` for this fold).
fn linearized_batch_stats(net: &Network, x_in: &Matrix, from_layer: usize) -> Vec<(Vec<f64>, Vec<f64>)> {
    let layers = net.num_layers();
    let mut stats: Vec<(Vec<f64>, Vec<f64>)> = (0..layers.saturating_sub(2))
        .map(|i| {
            let w = net.widths()[i + 1];
            (vec![0.0; w], vec![1.0; w])
        })
        .collect();
    let mut x = x_in.clone();
    for l in from_layer..layers {
        let mut h = x.matmul_nt(net.weight(l));
        if let Some(b) = net.bias(l) {
            for i in 0..h.rows() {
                for (v, bj) in h.row_mut(i).iter_mut().zip(b) {
                    *v += bj;
                }
            }
        }
        let (mean, var) = h.column_stats();
        if let Some(state) = net.bn_state(l) {
            let diag: Vec<f64> =
                state.gamma.iter().zip(&var).map(|(&g, &v)| g / (v + state.epsilon).sqrt()).collect();
            for i in 0..h.rows() {
                let row = h.row_mut(i);
                for j in 0..row.len() {
                    row[j] = (row[j] - mean[j]) * diag[j];
                }
            }
        }
        stats[l - 2] = (mean, var);
        x = h;
    }
    stats
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_blobs;
    use crate::net::ActivationKind;
    use crate::rng;
    use crate::train::{evaluate, train, TrainConfig};
    use proptest::prelude::*;
    use rand::Rng;

    fn random_input(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut r = rng::stream(seed, &[55]);
        Matrix::from_fn(rows, cols, |_, _| r.random_range(-1.0..1.0))
    }

    #[test]
    fn compose_at_final_layer_is_the_final_matrix() {
        let net = Network::init_kaiming(&[4, 6, 3], 1);
        let m = compose(&net, 3).unwrap();
        assert_eq!(m.matrix.data(), net.weight(3).data());
        assert!(m.offset.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_layer_is_absorbed() {
        let mut net = Network::init_kaiming(&[2, 2, 2], 2).with_activation(ActivationKind::Identity);
        *net.weight_mut(2) = Matrix::identity(2);
        *net.weight_mut(3) = Matrix::from_rows(&[vec![2.0, 3.0], vec![4.0, 5.0]]);
        let m = compose(&net, 2).unwrap();
        assert_eq!(m.matrix.data(), &[2.0, 3.0, 4.0, 5.0]);
        // With W2 = I the product collapses to the single output matrix, so
        // the sign rows are those of W3 directly.
        assert_eq!(sign_row(&m, 0), vec![1, 1]);
        assert_eq!(sign_row(&m, 1), vec![1, 1]);
    }

    #[test]
    fn linear_network_forward_equals_composed_map() {
        let net = Network::init_kaiming(&[5, 8, 7, 3], 3).with_activation(ActivationKind::Identity);
        let x = random_input(20, 5, 9);
        let trace = net.forward(&x, BnMode::Eval).unwrap();
        let m = compose(&net, 2).unwrap();
        let lin = m.apply(&x);
        let scale = trace.logits().frobenius_norm().max(1.0);
        assert!(trace.logits().max_abs_diff(&lin) / scale < 1e-10);
    }

    #[test]
    fn trivial_bn_fold_equals_plain_compose() {
        let mut net = Network::init_kaiming(&[4, 5, 6, 3], 4).with_batch_norm(0.1);
        // gamma = 1, running mean 0, running var 1 - eps so the diagonal is
        // exactly 1 after the epsilon floor.
        for l in 2..net.num_layers() {
            let state = net.bn_state_mut(l).unwrap();
            let w = state.gamma.len();
            let eps = state.epsilon;
            state.set_stats(vec![0.0; w], vec![1.0 - eps; w]);
        }
        let plain = compose(&net, 2).unwrap();
        let folded = compose_with_bn(&net, 2, BnFold::Running).unwrap();
        assert!(plain.matrix.max_abs_diff(&folded.matrix) < 1e-12);
        for (a, b) in plain.offset.iter().zip(&folded.offset) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn bn_diagonal_scaling_doubles_rows() {
        let mut net = Network::init_kaiming(&[3, 4, 2], 5).with_batch_norm(0.1);
        {
            let state = net.bn_state_mut(2).unwrap();
            let eps = state.epsilon;
            // gamma = 2 sigma-hat makes the diagonal exactly 2.
            let var = 0.25 - eps;
            state.gamma = vec![2.0 * 0.25f64.sqrt(); 4];
            state.set_stats(vec![0.0; 4], vec![var; 4]);
        }
        let plain = compose(&net, 2).unwrap();
        let folded = compose_with_bn(&net, 2, BnFold::Running).unwrap();
        // Folding left-multiplies W2 by diag(2), so the composed map doubles.
        assert!(folded.matrix.max_abs_diff(&plain.matrix.scale(2.0)) < 1e-12);
    }

    #[test]
    fn bn_eval_forward_matches_affine_map_on_identity_net() {
        let mut net = Network::init_kaiming(&[6, 9, 7, 4], 6)
            .with_activation(ActivationKind::Identity)
            .with_batch_norm(0.1);
        let warmup = random_input(32, 6, 10);
        net.forward_train(&warmup).unwrap();
        // Nontrivial gamma.
        for l in 2..=3 {
            let state = net.bn_state_mut(l).unwrap();
            for (j, g) in state.gamma.iter_mut().enumerate() {
                *g = 0.5 + 0.1 * j as f64;
            }
        }
        let x = random_input(25, 6, 11);
        let trace = net.forward(&x, BnMode::Eval).unwrap();
        let map = compose_with_bn(&net, 2, BnFold::Running).unwrap();
        let lin = map.apply(&x);
        let scale = trace.logits().frobenius_norm().max(1.0);
        assert!(trace.logits().max_abs_diff(&lin) / scale < 1e-10);
    }

    #[test]
    fn unpopulated_stats_error() {
        let net = Network::init_kaiming(&[4, 5, 3], 7).with_batch_norm(0.1);
        match compose_with_bn(&net, 2, BnFold::Running) {
            Err(LmapError::UnpopulatedStats { layer: 2 }) => {}
            other => panic!("expected UnpopulatedStats, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn sign_row_cases() {
        let map = LmapMatrix {
            matrix: Matrix::from_rows(&[vec![0.3, -2.0, 0.0]]),
            offset: vec![0.0],
            from_layer: 2,
            bn_folded: false,
        };
        assert_eq!(sign_row(&map, 0), vec![1, -1, 0]);
    }

    #[test]
    fn compose_is_consistent_with_one_step_unrolling() {
        let net = Network::init_kaiming(&[5, 7, 6, 4, 3], 8);
        for l in 2..net.num_layers() {
            let whole = compose(&net, l).unwrap();
            let rest = compose(&net, l + 1).unwrap();
            let unrolled = rest.matrix.matmul(net.weight(l));
            assert!(whole.matrix.max_abs_diff(&unrolled) < 1e-12, "layer {l}");
        }
    }

    #[test]
    fn prune_at_output_layer_equals_full_evaluation() {
        let ds = synthetic_blobs(4, 6, 40, 0.3, 12);
        let net = Network::init_kaiming(&[6, 10, 8, 4], 9).with_activation(ActivationKind::Relu);
        let full = evaluate(&net, &ds, BnMode::Eval);
        let pruned = prune_accuracy(&net, net.num_layers(), &ds, BnMode::Eval).unwrap();
        assert_eq!(full, pruned);
    }

    #[test]
    fn linear_net_prune_accuracy_is_layer_independent() {
        let ds = synthetic_blobs(3, 6, 30, 0.2, 13);
        let net = Network::init_kaiming(&[6, 9, 8, 3], 10).with_activation(ActivationKind::Identity);
        let accs: Vec<f64> = (2..=4).map(|l| prune_accuracy(&net, l, &ds, BnMode::Eval).unwrap()).collect();
        assert!(accs.windows(2).all(|w| w[0] == w[1]), "{accs:?}");
    }

    #[test]
    fn early_pruning_hurts_a_trained_nonlinear_net() {
        let ds = synthetic_blobs(4, 8, 60, 0.45, 14);
        let net = Network::init_kaiming(&[8, 24, 16, 4], 11).with_activation(ActivationKind::Tanh);
        let config = TrainConfig {
            learning_rate: 0.1,
            batch_size: 32,
            epochs: 60,
            eval_every: 0,
            seed: 15,
            ..TrainConfig::default()
        };
        let (net, _) = train(net, &ds, None, &config, None).unwrap();
        let full = evaluate(&net, &ds, BnMode::Eval);
        let early = prune_accuracy(&net, 2, &ds, BnMode::Eval).unwrap();
        let late = prune_accuracy(&net, 4, &ds, BnMode::Eval).unwrap();
        assert_eq!(late, full);
        assert!(early <= full, "early {early} vs full {full}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        /// Positive rescaling of the map never changes sign rows, and argmax
        /// decisions are invariant under positive scaling.
        #[test]
        fn signs_and_argmax_are_scale_invariant(seed in 0u64..500, c in 0.01f64..100.0) {
            let net = Network::init_kaiming(&[4, 6, 3], seed);
            let map = compose(&net, 2).unwrap();
            let scaled = LmapMatrix {
                matrix: map.matrix.scale(c),
                offset: map.offset.iter().map(|v| v * c).collect(),
                from_layer: 2,
                bn_folded: false,
            };
            for k in 0..3 {
                prop_assert_eq!(sign_row(&map, k), sign_row(&scaled, k));
            }
            let x = random_input(8, 4, seed ^ 0xbeef);
            let a = map.apply(&x);
            let b = scaled.apply(&x);
            for i in 0..a.rows() {
                prop_assert_eq!(crate::train::argmax(a.row(i)), crate::train::argmax(b.row(i)));
            }
        }
    }
}
