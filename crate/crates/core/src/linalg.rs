//! Dense row-major matrices sized for small fully connected networks.
//!
//! The three product kernels are blocked over rows and parallelized over
//! disjoint output row blocks; every output element accumulates its sum in a
//! fixed index order, so products are bitwise reproducible for any thread
//! count. That property is load-bearing: checkpoint replays and repeated
//! experiment runs are required to match byte for byte.

use crate::parallel;

/// Number of output rows each task owns. Streaming this many rows per pass
/// over the right-hand side keeps the kernel out of memory-bandwidth stalls.
const ROW_BLOCK: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length must match dimensions");
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Matrix { rows: r, cols: c, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        Matrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64 + Sync) -> Matrix {
        let mut out = self.clone();
        out.map_inplace(f);
        out
    }

    pub fn map_inplace(&mut self, f: impl Fn(f64) -> f64 + Sync) {
        let cols = self.cols.max(1);
        parallel::for_each_chunk_mut(&mut self.data, cols, |_, row| {
            for v in row.iter_mut() {
                *v = f(*v);
            }
        });
    }

    pub fn scale(&self, c: f64) -> Matrix {
        self.map(|v| v * c)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `self * rhs` for `self: m x k`, `rhs: k x n`.
    pub fn matmul(&self, rhs: &Matrix) -> Matrix {
        assert_eq!(self.cols, rhs.rows, "matmul shape mismatch");
        let (m, k, n) = (self.rows, self.cols, rhs.cols);
        let mut out = Matrix::zeros(m, n);
        parallel::for_each_chunk_mut(&mut out.data, n * ROW_BLOCK, |blk, cblk| {
            let i0 = blk * ROW_BLOCK;
            let rows = cblk.len() / n;
            for t in 0..k {
                let brow = &rhs.data[t * n..(t + 1) * n];
                for r in 0..rows {
                    let a = self.data[(i0 + r) * k + t];
                    if a == 0.0 {
                        continue;
                    }
                    let crow = &mut cblk[r * n..(r + 1) * n];
                    for (c, b) in crow.iter_mut().zip(brow) {
                        *c += a * b;
                    }
                }
            }
        });
        out
    }

    /// `self * rhs^T` for `self: m x k`, `rhs: n x k`. Both operands are read
    /// along contiguous rows.
    pub fn matmul_nt(&self, rhs: &Matrix) -> Matrix {
        assert_eq!(self.cols, rhs.cols, "matmul_nt shape mismatch");
        let (m, k, n) = (self.rows, self.cols, rhs.rows);
        let mut out = Matrix::zeros(m, n);
        parallel::for_each_chunk_mut(&mut out.data, n, |i, crow| {
            let arow = &self.data[i * k..(i + 1) * k];
            for (j, c) in crow.iter_mut().enumerate() {
                let brow = &rhs.data[j * k..(j + 1) * k];
                let mut s = 0.0;
                for (a, b) in arow.iter().zip(brow) {
                    s += a * b;
                }
                *c = s;
            }
        });
        out
    }

    /// `self^T * rhs` for `self: k x m`, `rhs: k x n`.
    pub fn matmul_tn(&self, rhs: &Matrix) -> Matrix {
        assert_eq!(self.rows, rhs.rows, "matmul_tn shape mismatch");
        let (k, m, n) = (self.rows, self.cols, rhs.cols);
        let mut out = Matrix::zeros(m, n);
        parallel::for_each_chunk_mut(&mut out.data, n * ROW_BLOCK, |blk, cblk| {
            let i0 = blk * ROW_BLOCK;
            let rows = cblk.len() / n;
            for t in 0..k {
                let brow = &rhs.data[t * n..(t + 1) * n];
                let arow = &self.data[t * m..(t + 1) * m];
                for r in 0..rows {
                    let a = arow[i0 + r];
                    if a == 0.0 {
                        continue;
                    }
                    let crow = &mut cblk[r * n..(r + 1) * n];
                    for (c, b) in crow.iter_mut().zip(brow) {
                        *c += a * b;
                    }
                }
            }
        });
        out
    }

    /// Apply to a single vector: `self * v`.
    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "matvec shape mismatch");
        (0..self.rows)
            .map(|i| self.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Per-column mean and population variance.
    pub fn column_stats(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.rows.max(1) as f64;
        let mut mean = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (m, v) in mean.iter_mut().zip(self.row(i)) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= n;
        }
        let mut var = vec![0.0; self.cols];
        for i in 0..self.rows {
            for ((s, v), m) in var.iter_mut().zip(self.row(i)).zip(&mean) {
                let d = v - m;
                *s += d * d;
            }
        }
        for s in var.iter_mut() {
            *s /= n;
        }
        (mean, var)
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Eigendecomposition of a symmetric matrix by the cyclic Jacobi method.
/// Returns eigenvalues in descending order with eigenvectors as the columns
/// of the second result. Intended for small matrices (class counts, Gram
/// matrices of projection subspaces, test covariances).
pub fn jacobi_eigh(a: &Matrix) -> (Vec<f64>, Matrix) {
    assert_eq!(a.rows(), a.cols(), "jacobi_eigh needs a square matrix");
    let n = a.rows();
    let mut m = a.clone();
    let mut v = Matrix::identity(n);
    let max_sweeps = 64;
    for _ in 0..max_sweeps {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m.get(i, j).abs();
            }
        }
        if off < 1e-14 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m.get(p, q);
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = m.get(p, p);
                let aqq = m.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m.get(k, p);
                    let mkq = m.get(k, q);
                    m.set(k, p, c * mkp - s * mkq);
                    m.set(k, q, s * mkp + c * mkq);
                }
                for k in 0..n {
                    let mpk = m.get(p, k);
                    let mqk = m.get(q, k);
                    m.set(p, k, c * mpk - s * mqk);
                    m.set(q, k, s * mpk + c * mqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m.get(j, j).partial_cmp(&m.get(i, i)).unwrap());
    let values: Vec<f64> = order.iter().map(|&i| m.get(i, i)).collect();
    let vectors = Matrix::from_fn(n, n, |i, j| v.get(i, order[j]));
    (values, vectors)
}

/// Modified Gram-Schmidt on the columns of `m`. Returns false if a column
/// collapses below `tol` (rank deficiency).
fn orthonormalize_columns(m: &mut Matrix, tol: f64) -> bool {
    let (rows, cols) = (m.rows(), m.cols());
    for j in 0..cols {
        for prev in 0..j {
            let mut dot = 0.0;
            for i in 0..rows {
                dot += m.get(i, j) * m.get(i, prev);
            }
            for i in 0..rows {
                let v = m.get(i, j) - dot * m.get(i, prev);
                m.set(i, j, v);
            }
        }
        let norm: f64 = (0..rows).map(|i| m.get(i, j).powi(2)).sum::<f64>().sqrt();
        if norm <= tol {
            return false;
        }
        for i in 0..rows {
            let v = m.get(i, j) / norm;
            m.set(i, j, v);
        }
    }
    true
}

/// Flip each column of `vectors` so that its largest-magnitude entry is
/// positive. Ties are resolved by the first such entry. This pins an
/// otherwise arbitrary sign so projections are comparable across runs.
pub fn fix_column_signs(vectors: &mut Matrix) {
    for j in 0..vectors.cols() {
        let mut best = 0usize;
        let mut best_abs = -1.0;
        for i in 0..vectors.rows() {
            let a = vectors.get(i, j).abs();
            if a > best_abs {
                best_abs = a;
                best = i;
            }
        }
        if vectors.get(best, j) < 0.0 {
            for i in 0..vectors.rows() {
                let v = -vectors.get(i, j);
                vectors.set(i, j, v);
            }
        }
    }
}

/// Top-`k` singular values and right-singular vectors of `a` by subspace
/// iteration, alternating applications of `a` and `a^T`. The Gram matrix of
/// `a` is never formed. Returns `(singular_values, v)` with values in
/// descending order and vectors as columns of `v` (sign-fixed).
pub fn top_right_singular(a: &Matrix, k: usize, max_iter: usize, tol: f64) -> Option<(Vec<f64>, Matrix)> {
    let (_m, n) = (a.rows(), a.cols());
    assert!(k >= 1 && k <= n.min(a.rows()), "invalid subspace size");
    // Deterministic start: a fixed quasi-random basis.
    let mut v = Matrix::from_fn(n, k, |i, j| {
        let x = crate::rng::stream_key(0xA5A5_5A5A, &[i as u64, j as u64]);
        (x as f64 / u64::MAX as f64) - 0.5
    });
    if !orthonormalize_columns(&mut v, 1e-300) {
        return None;
    }
    let mut prev_sigma = vec![f64::INFINITY; k];
    for _ in 0..max_iter {
        let av = a.matmul(&v); // m x k
        let mut w = a.matmul_tn(&av); // a^T * (a v): n x k
        if !orthonormalize_columns(&mut w, 1e-300) {
            return None;
        }
        v = w;
        let av = a.matmul(&v);
        let sigma: Vec<f64> = (0..k)
            .map(|j| (0..av.rows()).map(|i| av.get(i, j).powi(2)).sum::<f64>().sqrt())
            .collect();
        let drift = sigma
            .iter()
            .zip(&prev_sigma)
            .map(|(s, p)| (s - p).abs())
            .fold(0.0, f64::max);
        let scale = sigma.iter().fold(0.0_f64, |a, &b| a.max(b)).max(1e-300);
        prev_sigma = sigma;
        if drift <= tol * scale {
            break;
        }
    }
    // Rayleigh-Ritz on the converged subspace separates close singular values.
    let av = a.matmul(&v);
    let gram = av.matmul_tn(&av); // k x k: (AV)^T (AV)
    let (evals, rot) = jacobi_eigh(&gram);
    let mut vr = v.matmul(&rot);
    fix_column_signs(&mut vr);
    let sigmas: Vec<f64> = evals.iter().map(|&l| l.max(0.0).sqrt()).collect();
    Some((sigmas, vr))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut r = rng::stream(seed, &[rows as u64, cols as u64]);
        Matrix::from_fn(rows, cols, |_, _| r.random_range(-1.0..1.0))
    }

    /// Textbook triple-loop product; the oracle for the blocked kernels.
    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for t in 0..a.cols() {
                    s += a.get(i, t) * b.get(t, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    #[test]
    fn blocked_kernels_match_naive() {
        for &(m, k, n) in &[(1, 1, 1), (3, 5, 4), (7, 9, 6), (16, 17, 13)] {
            let a = random_matrix(m, k, 10);
            let b = random_matrix(k, n, 11);
            let want = naive_matmul(&a, &b);
            assert!(a.matmul(&b).max_abs_diff(&want) < 1e-12);
            assert!(a.matmul_nt(&b.transpose()).max_abs_diff(&want) < 1e-12);
            assert!(a.transpose().matmul_tn(&b).max_abs_diff(&want) < 1e-12);
        }
    }

    #[test]
    fn matvec_matches_matmul() {
        let a = random_matrix(6, 4, 12);
        let v: Vec<f64> = (0..4).map(|i| i as f64 + 0.5).collect();
        let col = Matrix::from_fn(4, 1, |i, _| v[i]);
        let want = a.matmul(&col);
        let got = a.matvec(&v);
        for i in 0..6 {
            assert!((got[i] - want.get(i, 0)).abs() < 1e-14);
        }
    }

    #[test]
    fn jacobi_recovers_known_spectrum() {
        // Diagonalize Q D Q^T for a known rotation.
        let d = [5.0, 2.0, -1.0];
        let theta: f64 = 0.7;
        let q = Matrix::from_rows(&[
            vec![theta.cos(), -theta.sin(), 0.0],
            vec![theta.sin(), theta.cos(), 0.0],
            vec![0.0, 0.0, 1.0],
        ]);
        let diag = Matrix::from_fn(3, 3, |i, j| if i == j { d[i] } else { 0.0 });
        let a = q.matmul(&diag).matmul_nt(&q);
        let (vals, vecs) = jacobi_eigh(&a);
        assert!((vals[0] - 5.0).abs() < 1e-10);
        assert!((vals[1] - 2.0).abs() < 1e-10);
        assert!((vals[2] + 1.0).abs() < 1e-10);
        // A v = lambda v for each column.
        for j in 0..3 {
            let v = vecs.col(j);
            let av = a.matvec(&v);
            for i in 0..3 {
                assert!((av[i] - vals[j] * v[i]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn subspace_iteration_matches_gram_eigh() {
        let a = random_matrix(40, 12, 77);
        let (sigmas, v) = top_right_singular(&a, 3, 500, 1e-13).unwrap();
        // Dual route: eigendecompose A^T A explicitly.
        let gram = a.transpose().matmul(&a);
        let (evals, evecs) = jacobi_eigh(&gram);
        for j in 0..3 {
            assert!((sigmas[j] - evals[j].max(0.0).sqrt()).abs() < 1e-8);
            let got = v.col(j);
            let mut want = evecs.col(j);
            // Align signs before comparing.
            let dot: f64 = got.iter().zip(&want).map(|(a, b)| a * b).sum();
            if dot < 0.0 {
                for w in want.iter_mut() {
                    *w = -*w;
                }
            }
            for i in 0..12 {
                assert!((got[i] - want[i]).abs() < 1e-7, "vector {j} entry {i}");
            }
        }
        // Columns orthonormal.
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = v.col(i).iter().zip(v.col(j)).map(|(a, b)| a * b).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn sign_convention_pins_largest_entry_positive() {
        let mut m = Matrix::from_rows(&[vec![-3.0, 0.5], vec![1.0, -0.9]]);
        fix_column_signs(&mut m);
        // Column 0 flips (largest entry was -3); column 1 flips (largest -0.9).
        assert_eq!(m.data(), &[3.0, -0.5, -1.0, 0.9]);
    }
}
