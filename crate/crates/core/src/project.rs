//! Low-dimensional views: a 2D bottleneck built from the final layer's two
//! leading right-singular vectors applied to penultimate activations, a
//! k-NN overlap statistic quantifying how much of a test cloud falls inside
//! a training cloud, and top-3 PCA of raw data.
//!
//! Singular vectors carry a fixed sign convention (largest-magnitude entry
//! positive) so coordinates are comparable across checkpoints.

use thiserror::Error;

use crate::data::LabeledDataset;
use crate::linalg::{self, Matrix};
use crate::net::{BnMode, Network};
use crate::parallel;

#[derive(Debug, Error)]
pub enum ProjectError {
    #[error("final weight matrix has fewer than {needed} well-separated singular values")]
    RankDeficient { needed: usize },
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("need data dimension at least {needed}, got {got}")]
    DimensionTooSmall { needed: usize, got: usize },
    #[error(transparent)]
    Net(#[from] crate::net::NetError),
}

/// Per-sample coordinates along the two leading right-singular directions of
/// the final weight matrix.
#[derive(Debug, Clone)]
pub struct Projection2D {
    /// The two direction vectors (orthonormal, sign-fixed).
    pub directions: (Vec<f64>, Vec<f64>),
    pub singular_values: (f64, f64),
    /// n x 2 coordinates.
    pub coords: Matrix,
    pub labels: Vec<usize>,
}

const RANK_TOL: f64 = 1e-12;

/// Top-`k` right-singular vectors of the final weight matrix via the small
/// Gram route: eigendecompose W W^T (classes x classes), then map back.
fn final_layer_directions(net: &Network, k: usize) -> Result<(Vec<f64>, Matrix), ProjectError> {
    let w = net.weight(net.num_layers());
    let gram = w.matmul_nt(w); // classes x classes
    let (evals, evecs) = linalg::jacobi_eigh(&gram);
    let sigmas: Vec<f64> = evals.iter().map(|&l| l.max(0.0).sqrt()).collect();
    let top = sigmas.first().copied().unwrap_or(0.0);
    if sigmas.len() < k || top == 0.0 || sigmas[k - 1] <= RANK_TOL * top.max(1.0) {
        return Err(ProjectError::RankDeficient { needed: k });
    }
    // v_i = W^T u_i / sigma_i.
    let mut v = Matrix::zeros(w.cols(), k);
    for j in 0..k {
        let u = evecs.col(j);
        let wt_u = {
            let mut out = vec![0.0; w.cols()];
            for (i, &ui) in u.iter().enumerate() {
                for (o, &wij) in out.iter_mut().zip(w.row(i)) {
                    *o += wij * ui;
                }
            }
            out
        };
        for i in 0..w.cols() {
            v.set(i, j, wt_u[i] / sigmas[j]);
        }
    }
    linalg::fix_column_signs(&mut v);
    Ok((sigmas, v))
}

/// Project every sample onto the two leading right-singular directions of
/// the final weight matrix, using the penultimate activation as input to the
/// bottleneck.
pub fn bottleneck_2d(net: &Network, ds: &LabeledDataset, mode: BnMode) -> Result<Projection2D, ProjectError> {
    let (sigmas, v) = final_layer_directions(net, 2)?;
    let penultimate = net.activation_at(ds.samples(), net.num_layers() - 1, mode)?;
    let coords = penultimate.matmul(&v);
    Ok(Projection2D {
        directions: (v.col(0), v.col(1)),
        singular_values: (sigmas[0], sigmas[1]),
        coords,
        labels: ds.labels().to_vec(),
    })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Distance to the k-th nearest row of `points`, excluding any index in the
/// leading `skip` positions of the candidate list equal to `self_idx`.
fn knn_distance(query: &[f64], points: &Matrix, k: usize, self_idx: Option<usize>) -> f64 {
    let mut dists: Vec<f64> = (0..points.rows())
        .filter(|&i| Some(i) != self_idx)
        .map(|i| sq_dist(query, points.row(i)))
        .collect();
    let k = k.min(dists.len()).max(1);
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    dists[k - 1].sqrt()
}

/// Fraction of test points whose k-th-nearest-training-point distance falls
/// at or below the q-quantile (nearest rank) of the training points' own
/// k-NN distances. 1 means the test cloud sits inside the training cloud;
/// 0 means it is disjoint.
pub fn overlap_statistic(train: &Matrix, test: &Matrix, k: usize, q: f64) -> f64 {
    assert!(train.rows() > 0 && test.rows() > 0, "both point sets must be nonempty");
    let train_dists: Vec<f64> =
        parallel::map_indexed(train.rows(), |i| knn_distance(train.row(i), train, k, Some(i)));
    let mut sorted = train_dists.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    let threshold = sorted[rank - 1];
    let inside: Vec<bool> =
        parallel::map_indexed(test.rows(), |i| knn_distance(test.row(i), train, k, None) <= threshold);
    inside.iter().filter(|&&b| b).count() as f64 / test.rows() as f64
}

pub const OVERLAP_K: usize = 5;
pub const OVERLAP_Q: f64 = 0.95;

/// Center the data and project onto its top-3 principal directions
/// (subspace iteration on the centered matrix; the covariance matrix is
/// never formed). Returns n x 3 coordinates.
pub fn pca_3d(data: &Matrix) -> Result<Matrix, ProjectError> {
    pca_top_k(data, 3)
}

/// Top-`k` PCA coordinates with the crate's deterministic sign convention.
pub fn pca_top_k(data: &Matrix, k: usize) -> Result<Matrix, ProjectError> {
    if data.rows() < k {
        return Err(ProjectError::TooFewSamples { needed: k, got: data.rows() });
    }
    if data.cols() < k {
        return Err(ProjectError::DimensionTooSmall { needed: k, got: data.cols() });
    }
    let mut centered = data.clone();
    let (mean, _) = centered.column_stats();
    for i in 0..centered.rows() {
        for (v, m) in centered.row_mut(i).iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    let (_, v) = linalg::top_right_singular(&centered, k, 1000, 1e-13)
        .ok_or(ProjectError::RankDeficient { needed: k })?;
    Ok(centered.matmul(&v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_blobs;
    use crate::net::ActivationKind;
    use crate::rng;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn toy_net_with_final(w_final: Matrix) -> Network {
        let hidden = w_final.cols();
        let mut net =
            Network::init_kaiming(&[hidden, hidden, w_final.rows()], 3).with_activation(ActivationKind::Identity);
        *net.weight_mut(2) = Matrix::identity(hidden);
        *net.weight_mut(3) = w_final;
        net
    }

    #[test]
    fn diagonal_final_layer_recovers_axes() {
        // W = diag(3, 1): right-singular vectors are e1, e2; coordinates are
        // the raw penultimate features.
        let net = toy_net_with_final(Matrix::from_rows(&[vec![3.0, 0.0], vec![0.0, 1.0]]));
        let samples = Matrix::from_rows(&[vec![0.5, -0.25], vec![-1.0, 2.0]]);
        let ds = LabeledDataset::new(samples.clone(), vec![0, 1], 2);
        let p = bottleneck_2d(&net, &ds, BnMode::Eval).unwrap();
        assert!((p.singular_values.0 - 3.0).abs() < 1e-10);
        assert!((p.singular_values.1 - 1.0).abs() < 1e-10);
        assert!(p.coords.max_abs_diff(&samples) < 1e-10);
        // Orthonormal directions.
        let (v1, v2) = &p.directions;
        let dot: f64 = v1.iter().zip(v2).map(|(a, b)| a * b).sum();
        assert!(dot.abs() < 1e-8);
    }

    #[test]
    fn orthogonal_left_transforms_leave_coordinates_fixed() {
        let theta: f64 = 0.4;
        let q = Matrix::from_rows(&[
            vec![theta.cos(), -theta.sin()],
            vec![theta.sin(), theta.cos()],
        ]);
        let w = Matrix::from_rows(&[vec![2.0, 0.3, -0.5], vec![-0.2, 1.0, 0.8]]);
        let net_a = toy_net_with_final(w.clone());
        let net_b = toy_net_with_final(q.matmul(&w));
        let mut r = rng::stream(4, &[9]);
        let samples = Matrix::from_fn(12, 3, |_, _| r.random_range(-1.0..1.0));
        let ds = LabeledDataset::new(samples, vec![0; 12], 1);
        let pa = bottleneck_2d(&net_a, &ds, BnMode::Eval).unwrap();
        let pb = bottleneck_2d(&net_b, &ds, BnMode::Eval).unwrap();
        // Right-singular vectors are invariant under left-orthogonal maps;
        // the sign convention removes the leftover sign freedom.
        assert!(pa.coords.max_abs_diff(&pb.coords) < 1e-8);
    }

    #[test]
    fn rank_deficient_final_layer_is_rejected() {
        // Rank 1: second singular value is 0.
        let net = toy_net_with_final(Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]));
        let ds = LabeledDataset::new(Matrix::from_rows(&[vec![0.1, 0.2]]), vec![0], 1);
        assert!(matches!(
            bottleneck_2d(&net, &ds, BnMode::Eval),
            Err(ProjectError::RankDeficient { needed: 2 })
        ));
    }

    #[test]
    fn identical_sets_overlap_fully() {
        // 19 points: the 0.95 nearest-rank quantile is the maximum, so every
        // (self-matching) test distance sits at or below the threshold.
        let mut r = rng::stream(5, &[1]);
        let pts = Matrix::from_fn(19, 2, |_, _| r.random_range(-1.0..1.0));
        assert_eq!(overlap_statistic(&pts, &pts.clone(), OVERLAP_K, OVERLAP_Q), 1.0);
    }

    #[test]
    fn distant_clouds_do_not_overlap() {
        let mut r = rng::stream(6, &[2]);
        let train = Matrix::from_fn(40, 2, |_, _| r.random_range(-1.0..1.0));
        let test = Matrix::from_fn(40, 2, |_, _| 1000.0 + r.random_range(-1.0..1.0));
        assert_eq!(overlap_statistic(&train, &test, OVERLAP_K, OVERLAP_Q), 0.0);
    }

    #[test]
    fn interleaved_gaussians_overlap_near_q() {
        // Same-distribution independent clouds: by exchangeability the test
        // k-NN distance falls below the train q-quantile with probability
        // close to q.
        let n = 4000;
        let mut r = rng::stream(7, &[3]);
        let normal = StandardNormal;
        let mut draw = |rows: usize| {
            Matrix::from_fn(rows, 2, |_, _| {
                let v: f64 = normal.sample(&mut r);
                v
            })
        };
        let train = draw(n);
        let test = draw(n);
        let got = overlap_statistic(&train, &test, OVERLAP_K, OVERLAP_Q);
        assert!((got - 0.95).abs() < 0.02, "overlap {got}");
    }

    #[test]
    fn pca_recovers_axis_aligned_anisotropy() {
        // Data stretched along x then y then z; PCA must order the axes by
        // variance.
        let mut r = rng::stream(8, &[4]);
        let normal = StandardNormal;
        let scales = [5.0, 2.0, 0.5];
        let data = Matrix::from_fn(600, 3, |_, j| {
            let v: f64 = normal.sample(&mut r);
            scales[j] * v
        });
        let coords = pca_3d(&data).unwrap();
        let (_, var) = coords.column_stats();
        assert!(var[0] > var[1] && var[1] > var[2], "vars {var:?}");
        assert!((var[0].sqrt() - 5.0).abs() < 0.5);
        // Total variance is preserved for a rank-3 dataset.
        let (_, dvar) = data.column_stats();
        let total_data: f64 = dvar.iter().sum();
        let total_proj: f64 = var.iter().sum();
        assert!(total_proj <= total_data * (1.0 + 1e-9));
        assert!((total_proj - total_data).abs() < 1e-6 * total_data);
    }

    #[test]
    fn pca_matches_covariance_eigendecomposition() {
        // Dual route: explicit covariance + full Jacobi eigensolve.
        let ds = synthetic_blobs(4, 8, 60, 0.3, 11);
        let data = ds.samples();
        let coords = pca_3d(data).unwrap();

        let mut centered = data.clone();
        let (mean, _) = centered.column_stats();
        for i in 0..centered.rows() {
            for (v, m) in centered.row_mut(i).iter_mut().zip(&mean) {
                *v -= m;
            }
        }
        let cov = centered.matmul_tn(&centered).scale(1.0 / (data.rows() as f64 - 1.0));
        // matmul_tn computes self^T * rhs: centered^T centered is dim x dim.
        let (_, evecs) = linalg::jacobi_eigh(&cov);
        let mut top3 = Matrix::from_fn(data.cols(), 3, |i, j| evecs.get(i, j));
        linalg::fix_column_signs(&mut top3);
        let want = centered.matmul(&top3);
        assert!(coords.max_abs_diff(&want) < 1e-8);
    }

    #[test]
    fn projections_are_bitwise_reproducible() {
        let ds = synthetic_blobs(3, 6, 30, 0.2, 12);
        let net = Network::init_kaiming(&[6, 10, 3], 9).with_activation(ActivationKind::Tanh);
        let a = bottleneck_2d(&net, &ds, BnMode::Eval).unwrap();
        let b = bottleneck_2d(&net, &ds, BnMode::Eval).unwrap();
        assert_eq!(a.coords.data(), b.coords.data());
        let pa = pca_3d(ds.samples()).unwrap();
        let pb = pca_3d(ds.samples()).unwrap();
        assert_eq!(pa.data(), pb.data());
    }

    #[test]
    fn perturbed_networks_still_project_finitely() {
        let ds = synthetic_blobs(3, 6, 20, 0.2, 13);
        let net = Network::init_kaiming(&[6, 12, 3], 10).with_activation(ActivationKind::Relu);
        for &amp in &[0.1, 1.0, 10.0] {
            let noisy = crate::basin::perturb_weights(&net, amp, 3, 0, 0).unwrap();
            if let Ok(p) = bottleneck_2d(&noisy, &ds, BnMode::Eval) {
                assert!(p.coords.data().iter().all(|v| v.is_finite()));
            }
        }
    }
}
