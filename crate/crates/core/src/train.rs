//! Optimization: SGD and Adam under softmax cross-entropy or squared error,
//! with L2 weight decay, divergence guarding and per-step metric snapshots.
//!
//! Gradients come from hand-rolled backpropagation, including the
//! batch-statistics path through batch normalization; the test suites pin
//! them against central finite differences.

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::data::LabeledDataset;
use crate::linalg::Matrix;
use crate::net::{BnMode, Network};
use crate::rng::{self, tag};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("loss became non-finite at step {step}")]
    NumericOverflow { step: usize },
    #[error(transparent)]
    Net(#[from] crate::net::NetError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

impl OptimizerKind {
    pub fn adam_default() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    SquaredError,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::CrossEntropy => "cross_entropy",
            LossKind::SquaredError => "squared_error",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "cross_entropy" => Some(LossKind::CrossEntropy),
            "squared_error" => Some(LossKind::SquaredError),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub loss: LossKind,
    pub seed: u64,
    pub init_scale: f64,
    /// Steps between metric snapshots; 0 disables intermediate snapshots.
    /// A snapshot is always taken at step 0 and after the final step.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Sgd,
            learning_rate: 0.03,
            batch_size: 64,
            epochs: 10,
            weight_decay: 0.0,
            loss: LossKind::CrossEntropy,
            seed: 0,
            init_scale: 1.0,
            eval_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) {
        assert!(self.learning_rate.is_finite() && self.learning_rate >= 0.0, "bad learning rate");
        assert!(self.batch_size >= 1, "batch size must be at least 1");
        assert!(self.weight_decay >= 0.0, "weight decay must be non-negative");
    }
}

/// One metrics row plus the optional analysis results an observer attaches.
#[derive(Debug, Clone)]
pub struct MetricSnapshot {
    pub step: usize,
    pub train_acc: f64,
    pub test_acc: f64,
    pub loss: f64,
    pub weight_norm: f64,
    /// (hidden layer, rank-histogram steepness) pairs, when scheduled.
    pub rpd_gradients: Option<Vec<(usize, f64)>>,
    /// (space label, basin size) pairs, when scheduled; a None size means
    /// the accuracy never crossed the threshold on the probed grid.
    pub basin_sizes: Option<Vec<(String, Option<f64>)>>,
}

#[derive(Debug, Clone, Default)]
pub struct MetricTrace {
    pub snapshots: Vec<MetricSnapshot>,
}

impl MetricTrace {
    pub fn train_accuracy(&self) -> Vec<(usize, f64)> {
        self.snapshots.iter().map(|s| (s.step, s.train_acc)).collect()
    }

    pub fn test_accuracy(&self) -> Vec<(usize, f64)> {
        self.snapshots.iter().map(|s| (s.step, s.test_acc)).collect()
    }

    pub fn weight_norms(&self) -> Vec<(usize, f64)> {
        self.snapshots.iter().map(|s| (s.step, s.weight_norm)).collect()
    }
}

/// Gradients shaped like the trainable parameters of a network.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub weights: Vec<Matrix>,
    pub biases: Option<Vec<Vec<f64>>>,
    pub bn_gamma: Option<Vec<Vec<f64>>>,
}

/// Loss over the logits and its gradient with respect to them. Both losses
/// average over the batch.
fn loss_and_grad(logits: &Matrix, labels: &[usize], kind: LossKind) -> (f64, Matrix) {
    let b = logits.rows();
    let c = logits.cols();
    let scale = 1.0 / b as f64;
    let mut grad = Matrix::zeros(b, c);
    let mut total = 0.0;
    match kind {
        LossKind::CrossEntropy => {
            for i in 0..b {
                let row = logits.row(i);
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exp: Vec<f64> = row.iter().map(|&z| (z - m).exp()).collect();
                let z: f64 = exp.iter().sum();
                let label = labels[i];
                total += -(row[label] - m - z.ln());
                let g = grad.row_mut(i);
                for j in 0..c {
                    g[j] = (exp[j] / z - f64::from(j == label)) * scale;
                }
            }
        }
        LossKind::SquaredError => {
            for i in 0..b {
                let row = logits.row(i);
                let label = labels[i];
                let g = grad.row_mut(i);
                for j in 0..c {
                    let target = f64::from(j == label);
                    let d = row[j] - target;
                    total += d * d;
                    g[j] = 2.0 * d * scale;
                }
            }
        }
    }
    (total * scale, grad)
}

/// Batch loss without gradients.
pub fn dataset_loss(net: &Network, x: &Matrix, labels: &[usize], kind: LossKind, mode: BnMode) -> f64 {
    let logits = net.logits(x, mode).expect("shape-checked input");
    loss_and_grad(&logits, labels, kind).0
}

/// Forward + backward over one batch. Pure: BN layers normalize by batch
/// statistics but running averages are untouched; those statistics are
/// returned so the caller can fold them in. Returns (loss, gradients,
/// per-BN-layer stats).
pub fn forward_backward(
    net: &Network,
    x: &Matrix,
    labels: &[usize],
    loss_kind: LossKind,
) -> Result<(f64, Gradients, Vec<(Vec<f64>, Vec<f64>)>), TrainError> {
    let (trace, bn_stats) = net.forward_batch_stats(x)?;
    let layers = net.num_layers();
    let (loss, mut d_h) = loss_and_grad(trace.logits(), labels, loss_kind);

    let mut d_weights: Vec<Matrix> = Vec::with_capacity(layers - 1);
    let mut d_biases: Option<Vec<Vec<f64>>> = net.has_bias().then(Vec::new);
    let mut d_gamma: Option<Vec<Vec<f64>>> = net.has_bn().then(Vec::new);

    // Walk from the output back to the input; `d_h` enters each iteration as
    // dL/dH^(l), H being the post-BN local field the activation consumed.
    for l in (2..=layers).rev() {
        let is_hidden = l < layers;
        let d_h_raw = if is_hidden && net.has_bn() {
            let state = net.bn_state(l).unwrap();
            let (mean, var) = &bn_stats[l - 2];
            let b = x.rows() as f64;
            let width = mean.len();
            let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + state.epsilon).sqrt()).collect();
            // Raw local fields are not retained in the trace; rebuild them.
            let x_prev = trace.activation(l - 1);
            let mut hat = x_prev.matmul_nt(net.weight(l));
            if let Some(bias) = net.bias(l) {
                for i in 0..hat.rows() {
                    for (v, bj) in hat.row_mut(i).iter_mut().zip(bias) {
                        *v += bj;
                    }
                }
            }
            for i in 0..hat.rows() {
                let row = hat.row_mut(i);
                for j in 0..width {
                    row[j] = (row[j] - mean[j]) * inv_std[j];
                }
            }
            let mut g_gamma = vec![0.0; width];
            for i in 0..hat.rows() {
                for j in 0..width {
                    g_gamma[j] += d_h.get(i, j) * hat.get(i, j);
                }
            }
            let mut d_hat = d_h;
            for i in 0..d_hat.rows() {
                let row = d_hat.row_mut(i);
                for j in 0..width {
                    row[j] *= state.gamma[j];
                }
            }
            // Batch-norm backward with population variance:
            // d_raw = inv_std * (d_hat - mean_b(d_hat) - hat * mean_b(d_hat ⊙ hat)).
            let mut mean_dhat = vec![0.0; width];
            let mut mean_dhat_hat = vec![0.0; width];
            for i in 0..d_hat.rows() {
                for j in 0..width {
                    mean_dhat[j] += d_hat.get(i, j);
                    mean_dhat_hat[j] += d_hat.get(i, j) * hat.get(i, j);
                }
            }
            for j in 0..width {
                mean_dhat[j] /= b;
                mean_dhat_hat[j] /= b;
            }
            let mut d_raw = Matrix::zeros(d_hat.rows(), width);
            for i in 0..d_hat.rows() {
                let row = d_raw.row_mut(i);
                for j in 0..width {
                    row[j] = inv_std[j] * (d_hat.get(i, j) - mean_dhat[j] - hat.get(i, j) * mean_dhat_hat[j]);
                }
            }
            if let Some(gs) = d_gamma.as_mut() {
                gs.push(g_gamma);
            }
            d_raw
        } else {
            d_h
        };

        let x_prev = trace.activation(l - 1);
        d_weights.push(d_h_raw.matmul_tn(x_prev));
        if let Some(bs) = d_biases.as_mut() {
            let mut g = vec![0.0; d_h_raw.cols()];
            for i in 0..d_h_raw.rows() {
                for (acc, v) in g.iter_mut().zip(d_h_raw.row(i)) {
                    *acc += v;
                }
            }
            bs.push(g);
        }
        if l == 2 {
            break;
        }
        let mut d_x_prev = d_h_raw.matmul(net.weight(l));
        let f = net.activation(l - 1);
        let h_prev = trace.local_field(l - 1);
        let x_prev_act = trace.activation(l - 1);
        for i in 0..d_x_prev.rows() {
            let row = d_x_prev.row_mut(i);
            for j in 0..row.len() {
                row[j] *= f.derivative(h_prev.get(i, j), x_prev_act.get(i, j));
            }
        }
        d_h = d_x_prev;
    }

    d_weights.reverse();
    if let Some(bs) = d_biases.as_mut() {
        bs.reverse();
    }
    if let Some(gs) = d_gamma.as_mut() {
        gs.reverse();
    }
    Ok((loss, Gradients { weights: d_weights, biases: d_biases, bn_gamma: d_gamma }, bn_stats))
}

/// Plain SGD update on one parameter slice: `w <- w - lr * (g + decay * w)`.
pub fn sgd_step(params: &mut [f64], grads: &[f64], learning_rate: f64, weight_decay: f64) {
    for (w, &g) in params.iter_mut().zip(grads) {
        *w -= learning_rate * (g + weight_decay * *w);
    }
}

/// Per-parameter Adam moments for one tensor.
#[derive(Debug, Clone)]
pub struct AdamMoments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamMoments {
    pub fn zeros(n: usize) -> Self {
        AdamMoments { m: vec![0.0; n], v: vec![0.0; n] }
    }
}

/// Bias-corrected Adam update with L2 decay folded into the gradient.
/// `timestep` is 1-based.
#[allow(clippy::too_many_arguments)]
pub fn adam_step(
    moments: &mut AdamMoments,
    params: &mut [f64],
    grads: &[f64],
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    weight_decay: f64,
    timestep: u64,
) {
    let bc1 = 1.0 - beta1.powi(timestep as i32);
    let bc2 = 1.0 - beta2.powi(timestep as i32);
    for i in 0..params.len() {
        let g = grads[i] + weight_decay * params[i];
        moments.m[i] = beta1 * moments.m[i] + (1.0 - beta1) * g;
        moments.v[i] = beta2 * moments.v[i] + (1.0 - beta2) * g * g;
        let m_hat = moments.m[i] / bc1;
        let v_hat = moments.v[i] / bc2;
        params[i] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
    }
}

/// Optimizer state covering every trainable tensor of a network.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    kind: OptimizerKind,
    timestep: u64,
    weight_moments: Vec<AdamMoments>,
    bias_moments: Vec<AdamMoments>,
    gamma_moments: Vec<AdamMoments>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, net: &Network) -> Self {
        let weight_moments = net.weights().iter().map(|w| AdamMoments::zeros(w.data().len())).collect();
        let bias_moments = if net.has_bias() {
            (2..=net.num_layers()).map(|l| AdamMoments::zeros(net.bias(l).unwrap().len())).collect()
        } else {
            Vec::new()
        };
        let gamma_moments = if net.has_bn() {
            (2..net.num_layers()).map(|l| AdamMoments::zeros(net.bn_state(l).unwrap().gamma.len())).collect()
        } else {
            Vec::new()
        };
        OptimizerState { kind, timestep: 0, weight_moments, bias_moments, gamma_moments }
    }

    /// Apply one update. Weight decay touches weight matrices only; biases
    /// and BN scales are never decayed.
    pub fn apply(&mut self, net: &mut Network, grads: &Gradients, learning_rate: f64, weight_decay: f64) {
        self.timestep += 1;
        let t = self.timestep;
        match self.kind {
            OptimizerKind::Sgd => {
                for (w, g) in net.weights_mut().iter_mut().zip(&grads.weights) {
                    sgd_step(w.data_mut(), g.data(), learning_rate, weight_decay);
                }
                if let (Some(biases), Some(gbs)) = (net.biases_mut(), grads.biases.as_ref()) {
                    for (b, g) in biases.iter_mut().zip(gbs) {
                        sgd_step(b, g, learning_rate, 0.0);
                    }
                }
                if let Some(ggs) = grads.bn_gamma.as_ref() {
                    for (idx, g) in ggs.iter().enumerate() {
                        let state = net.bn_state_mut(idx + 2).unwrap();
                        sgd_step(&mut state.gamma, g, learning_rate, 0.0);
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, epsilon } => {
                for ((w, g), m) in
                    net.weights_mut().iter_mut().zip(&grads.weights).zip(&mut self.weight_moments)
                {
                    adam_step(m, w.data_mut(), g.data(), learning_rate, beta1, beta2, epsilon, weight_decay, t);
                }
                if let (Some(biases), Some(gbs)) = (net.biases_mut(), grads.biases.as_ref()) {
                    for ((b, g), m) in biases.iter_mut().zip(gbs).zip(&mut self.bias_moments) {
                        adam_step(m, b, g, learning_rate, beta1, beta2, epsilon, 0.0, t);
                    }
                }
                if let Some(ggs) = grads.bn_gamma.as_ref() {
                    for (idx, g) in ggs.iter().enumerate() {
                        let moments = &mut self.gamma_moments[idx];
                        let state = net.bn_state_mut(idx + 2).unwrap();
                        adam_step(moments, &mut state.gamma, g, learning_rate, beta1, beta2, epsilon, 0.0, t);
                    }
                }
            }
        }
    }
}

/// Fraction of samples whose argmax logit matches the label. Ties resolve to
/// the lowest class index; the network is never mutated. Evaluation runs in
/// bounded-memory chunks, except `BatchStats` with BN enabled where the
/// statistics must cover the whole set.
pub fn evaluate(net: &Network, ds: &LabeledDataset, mode: BnMode) -> f64 {
    accuracy_of(net, ds.samples(), ds.labels(), mode)
}

/// `evaluate` against an explicit sample matrix and label slice.
pub fn accuracy_of(net: &Network, samples: &Matrix, labels: &[usize], mode: BnMode) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    count_correct(net, samples, labels, mode) as f64 / labels.len() as f64
}

pub(crate) fn count_correct(net: &Network, samples: &Matrix, labels: &[usize], mode: BnMode) -> usize {
    let chunk =
        if net.has_bn() && mode == BnMode::BatchStats { samples.rows().max(1) } else { 4096 };
    let mut correct = 0usize;
    let mut start = 0;
    while start < samples.rows() {
        let end = (start + chunk).min(samples.rows());
        let mut sub = Matrix::zeros(end - start, samples.cols());
        for (r, i) in (start..end).enumerate() {
            sub.row_mut(r).copy_from_slice(samples.row(i));
        }
        let logits = net.logits(&sub, mode).expect("shape-checked input");
        for (r, i) in (start..end).enumerate() {
            if argmax(logits.row(r)) == labels[i] {
                correct += 1;
            }
        }
        start = end;
    }
    correct
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0usize;
    let mut best_v = f64::NEG_INFINITY;
    for (j, &v) in row.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = j;
        }
    }
    best
}

/// Callback invoked at every metric snapshot; may attach analysis results to
/// the snapshot or save checkpoints.
pub type SnapshotObserver<'a> = &'a mut dyn FnMut(usize, &Network, &mut MetricSnapshot);

/// Seeded mini-batch training: fresh shuffled permutation per epoch,
/// mini-batches in permutation order (remainder batch included), metrics at
/// step 0, every `eval_every` steps and after the final step.
pub fn train(
    mut net: Network,
    train_ds: &LabeledDataset,
    test_ds: Option<&LabeledDataset>,
    config: &TrainConfig,
    mut observer: Option<SnapshotObserver<'_>>,
) -> Result<(Network, MetricTrace), TrainError> {
    config.validate();
    let p = train_ds.len();
    let b = config.batch_size.min(p).max(1);
    let mut trace = MetricTrace::default();
    let mut opt = OptimizerState::new(config.optimizer, &net);

    let take_snapshot =
        |step: usize, net: &Network, loss: f64, observer: &mut Option<SnapshotObserver<'_>>| {
            let train_acc = evaluate(net, train_ds, BnMode::Eval);
            let test_acc = test_ds.map_or(f64::NAN, |ds| evaluate(net, ds, BnMode::Eval));
            let mut snap = MetricSnapshot {
                step,
                train_acc,
                test_acc,
                loss,
                weight_norm: net.weight_norm(),
                rpd_gradients: None,
                basin_sizes: None,
            };
            if let Some(obs) = observer.as_mut() {
                obs(step, net, &mut snap);
            }
            snap
        };

    // Initial snapshot: loss of the first batch-worth of rows, pre-update.
    {
        let first: Vec<usize> = (0..b).collect();
        let (x, labels) = train_ds.gather(&first);
        let loss0 = dataset_loss(&net, &x, &labels, config.loss, BnMode::BatchStats);
        let snap = take_snapshot(0, &net, loss0, &mut observer);
        trace.snapshots.push(snap);
    }

    let mut step = 0usize;
    let mut last_snapshot_step = 0usize;
    let mut loss_accum = 0.0;
    let mut loss_count = 0usize;
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..p).collect();
        order.shuffle(&mut rng::stream(config.seed, &[tag::SHUFFLE, epoch as u64]));
        for batch_idx in order.chunks(b) {
            let (x, labels) = train_ds.gather(batch_idx);
            let (loss, grads, bn_stats) = forward_backward(&net, &x, &labels, config.loss)?;
            if !loss.is_finite() {
                return Err(TrainError::NumericOverflow { step });
            }
            for (idx, (mean, var)) in bn_stats.iter().enumerate() {
                net.bn_state_mut(idx + 2).unwrap().update(mean, var);
            }
            opt.apply(&mut net, &grads, config.learning_rate, config.weight_decay);
            step += 1;
            loss_accum += loss;
            loss_count += 1;
            if config.eval_every > 0 && step % config.eval_every == 0 {
                let mean_loss = loss_accum / loss_count as f64;
                let snap = take_snapshot(step, &net, mean_loss, &mut observer);
                trace.snapshots.push(snap);
                loss_accum = 0.0;
                loss_count = 0;
                last_snapshot_step = step;
            }
        }
    }
    if step != last_snapshot_step || trace.snapshots.len() == 1 {
        let mean_loss = if loss_count > 0 {
            loss_accum / loss_count as f64
        } else {
            trace.snapshots.last().map_or(f64::NAN, |s| s.loss)
        };
        let snap = take_snapshot(step, &net, mean_loss, &mut observer);
        trace.snapshots.push(snap);
    }
    Ok((net, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_blobs;
    use crate::net::ActivationKind;
    use crate::rng;
    use rand::Rng;

    fn small_net(seed: u64, kind: ActivationKind) -> Network {
        Network::init_kaiming(&[6, 10, 8, 4], seed).with_activation(kind)
    }

    fn small_data(seed: u64) -> (Matrix, Vec<usize>) {
        let mut r = rng::stream(seed, &[77]);
        let x = Matrix::from_fn(10, 6, |_, _| r.random_range(-1.0..1.0));
        let labels: Vec<usize> = (0..10).map(|_| r.random_range(0..4usize)).collect();
        (x, labels)
    }

    fn fd_weight_grad(
        net: &Network,
        layer: usize,
        i: usize,
        j: usize,
        x: &Matrix,
        labels: &[usize],
        loss: LossKind,
        h: f64,
    ) -> f64 {
        let v = net.weight(layer).get(i, j);
        let mut plus = net.clone();
        plus.weight_mut(layer).set(i, j, v + h);
        let lp = dataset_loss(&plus, x, labels, loss, BnMode::BatchStats);
        let mut minus = net.clone();
        minus.weight_mut(layer).set(i, j, v - h);
        let lm = dataset_loss(&minus, x, labels, loss, BnMode::BatchStats);
        (lp - lm) / (2.0 * h)
    }

    fn max_rel_weight_grad_error(net: &Network, loss: LossKind) -> f64 {
        let (x, labels) = small_data(3);
        let (_, grads, _) = forward_backward(net, &x, &labels, loss).unwrap();
        let mut worst = 0.0f64;
        for layer in 2..=net.num_layers() {
            let g = &grads.weights[layer - 2];
            for i in 0..g.rows() {
                for j in 0..g.cols() {
                    let analytic = g.get(i, j);
                    let numeric = fd_weight_grad(net, layer, i, j, &x, &labels, loss, 1e-5);
                    let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
                    worst = worst.max(rel);
                }
            }
        }
        worst
    }

    #[test]
    fn gradients_match_finite_differences() {
        for kind in [ActivationKind::Tanh, ActivationKind::Relu] {
            for loss in [LossKind::CrossEntropy, LossKind::SquaredError] {
                let net = small_net(5, kind);
                let err = max_rel_weight_grad_error(&net, loss);
                assert!(err < 1e-4, "{kind:?}/{loss:?}: rel err {err}");
            }
        }
    }

    #[test]
    fn bn_gradients_match_finite_differences() {
        let net = small_net(6, ActivationKind::Tanh).with_batch_norm(0.1);
        for loss in [LossKind::CrossEntropy, LossKind::SquaredError] {
            let err = max_rel_weight_grad_error(&net, loss);
            assert!(err < 1e-4, "{loss:?}: rel err {err}");
        }
        let (x, labels) = small_data(3);
        let (_, grads, _) = forward_backward(&net, &x, &labels, LossKind::CrossEntropy).unwrap();
        let ggs = grads.bn_gamma.as_ref().unwrap();
        for layer in 2..net.num_layers() {
            for j in 0..ggs[layer - 2].len() {
                let analytic = ggs[layer - 2][j];
                let h = 1e-5;
                let mut plus = net.clone();
                plus.bn_state_mut(layer).unwrap().gamma[j] += h;
                let lp = dataset_loss(&plus, &x, &labels, LossKind::CrossEntropy, BnMode::BatchStats);
                let mut minus = net.clone();
                minus.bn_state_mut(layer).unwrap().gamma[j] -= h;
                let lm = dataset_loss(&minus, &x, &labels, LossKind::CrossEntropy, BnMode::BatchStats);
                let numeric = (lp - lm) / (2.0 * h);
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
                assert!(rel < 1e-4, "layer {layer} gamma {j}: rel err {rel}");
            }
        }
    }

    #[test]
    fn sgd_step_examples() {
        let mut w = vec![1.0];
        sgd_step(&mut w, &[1.0], 0.03, 0.0);
        assert!((w[0] - 0.97).abs() < 1e-15);

        let mut w = vec![2.0, -3.0];
        sgd_step(&mut w, &[0.0, 0.0], 0.1, 0.0);
        assert_eq!(w, vec![2.0, -3.0]);

        // Pure decay shrinks geometrically.
        let mut w = vec![1.0];
        let mut prev = w[0];
        for _ in 0..5 {
            sgd_step(&mut w, &[0.0], 0.1, 0.5);
            assert!((w[0] - prev * 0.95).abs() < 1e-15);
            prev = w[0];
        }
    }

    #[test]
    fn adam_first_step_magnitude_is_learning_rate() {
        for &g in &[0.001, 1.0, 250.0] {
            let mut m = AdamMoments::zeros(1);
            let mut w = vec![0.5];
            adam_step(&mut m, &mut w, &[g], 0.01, 0.9, 0.999, 1e-8, 0.0, 1);
            let delta = (0.5 - w[0]).abs();
            assert!((delta - 0.01).abs() < 1e-5, "g={g}: delta {delta}");
        }
    }

    #[test]
    fn adam_zero_gradient_keeps_weights() {
        let mut m = AdamMoments::zeros(2);
        let mut w = vec![1.0, -2.0];
        for t in 1..=10 {
            adam_step(&mut m, &mut w, &[0.0, 0.0], 0.1, 0.9, 0.999, 1e-8, 0.0, t);
        }
        assert_eq!(w, vec![1.0, -2.0]);
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let ds = synthetic_blobs(4, 6, 30, 0.2, 9);
        let config = TrainConfig {
            optimizer: OptimizerKind::adam_default(),
            learning_rate: 0.01,
            batch_size: 16,
            epochs: 3,
            eval_every: 10,
            seed: 4,
            ..TrainConfig::default()
        };
        let run = || {
            let net = Network::init_kaiming(&[6, 12, 4], 21).with_activation(ActivationKind::Tanh);
            train(net, &ds, None, &config, None).unwrap()
        };
        let (n1, t1) = run();
        let (n2, t2) = run();
        for (a, b) in n1.weights().iter().zip(n2.weights()) {
            assert_eq!(a.data(), b.data());
        }
        let l1: Vec<f64> = t1.snapshots.iter().map(|s| s.loss).collect();
        let l2: Vec<f64> = t2.snapshots.iter().map(|s| s.loss).collect();
        assert_eq!(l1, l2);
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let ds = synthetic_blobs(3, 5, 20, 0.3, 2);
        let net = Network::init_kaiming(&[5, 8, 3], 11);
        let before = evaluate(&net, &ds, BnMode::Eval);
        let config = TrainConfig { learning_rate: 0.0, epochs: 2, eval_every: 0, ..TrainConfig::default() };
        let (after_net, trace) = train(net, &ds, None, &config, None).unwrap();
        assert_eq!(evaluate(&after_net, &ds, BnMode::Eval), before);
        assert_eq!(trace.snapshots.last().unwrap().train_acc, before);
    }

    #[test]
    fn separable_blobs_reach_perfect_train_accuracy() {
        let ds = synthetic_blobs(10, 10, 50, 0.05, 17);
        let net = Network::init_kaiming(&[10, 32, 10], 3).with_activation(ActivationKind::Tanh);
        let config = TrainConfig {
            learning_rate: 0.1,
            batch_size: 32,
            epochs: 50,
            eval_every: 0,
            seed: 8,
            ..TrainConfig::default()
        };
        let (net, trace) = train(net, &ds, None, &config, None).unwrap();
        assert_eq!(evaluate(&net, &ds, BnMode::Eval), 1.0, "trace: {:?}", trace.snapshots.last());
    }

    #[test]
    fn loss_trends_down_over_first_epochs() {
        let ds = synthetic_blobs(4, 8, 40, 0.2, 5);
        let net = Network::init_kaiming(&[8, 16, 4], 7).with_activation(ActivationKind::Tanh);
        let config = TrainConfig {
            learning_rate: 0.01,
            batch_size: 16,
            epochs: 4,
            eval_every: 10,
            seed: 2,
            ..TrainConfig::default()
        };
        let (_, trace) = train(net, &ds, None, &config, None).unwrap();
        let losses: Vec<f64> = trace.snapshots.iter().map(|s| s.loss).collect();
        let first = losses[1];
        let last = *losses.last().unwrap();
        assert!(last < first, "loss did not decrease: {losses:?}");
    }

    #[test]
    fn divergence_reports_step() {
        let ds = synthetic_blobs(3, 5, 30, 0.1, 4);
        let net = Network::init_kaiming(&[5, 16, 3], 13).with_activation(ActivationKind::Relu);
        let config = TrainConfig {
            learning_rate: 1e12,
            batch_size: 8,
            epochs: 50,
            eval_every: 0,
            loss: LossKind::SquaredError,
            seed: 6,
            ..TrainConfig::default()
        };
        match train(net, &ds, None, &config, None) {
            Err(TrainError::NumericOverflow { step }) => assert!(step > 0),
            other => panic!("expected overflow, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn evaluate_handles_perfect_and_near_chance_predictors() {
        // Identity weights make logits equal the one-hot inputs.
        let ds = synthetic_blobs(4, 4, 25, 0.0, 1);
        let mut net = Network::init_kaiming(&[4, 4, 4], 2).with_activation(ActivationKind::Identity);
        *net.weight_mut(2) = Matrix::identity(4);
        *net.weight_mut(3) = Matrix::identity(4);
        assert_eq!(evaluate(&net, &ds, BnMode::Eval), 1.0);

        // An untrained net on high-spread 10-class data sits near chance.
        let ds = synthetic_blobs(10, 12, 200, 5.0, 3);
        let net = Network::init_kaiming(&[12, 16, 10], 44);
        let acc = evaluate(&net, &ds, BnMode::Eval);
        assert!(acc > 0.02 && acc < 0.25, "acc {acc}");
    }

    #[test]
    fn weight_norm_examples() {
        let mut net = Network::init_kaiming(&[1, 2, 1], 1);
        *net.weight_mut(2) = Matrix::from_vec(2, 1, vec![3.0, 4.0]);
        *net.weight_mut(3) = Matrix::from_vec(1, 2, vec![0.0, 0.0]);
        assert_eq!(net.weight_norm(), 5.0);
        *net.weight_mut(2) = Matrix::zeros(2, 1);
        assert_eq!(net.weight_norm(), 0.0);
    }

    #[test]
    fn bn_eval_equals_batch_stats_when_running_match() {
        let mut net = Network::init_kaiming(&[5, 7, 3], 31).with_batch_norm(1.0);
        let ds = synthetic_blobs(3, 5, 12, 0.4, 6);
        // Momentum 1 copies the batch statistics into the running averages.
        net.forward_train(ds.samples()).unwrap();
        let eval = evaluate(&net, &ds, BnMode::Eval);
        let batch = evaluate(&net, &ds, BnMode::BatchStats);
        assert_eq!(eval.to_bits(), batch.to_bits());
    }
}
