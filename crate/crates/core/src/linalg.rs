//! Closed-form algebra for Sigma_A = I + A A'.
//!
//! With A'A = diag(n_j) the matrix has eigenvalue 1 + n_j on each cluster
//! indicator and 1 elsewhere, so
//!
//! ```text
//! Sigma^-1     = I - A diag(1 / (1 + n_j)) A'
//! Sigma^-1/2   = I - A diag((1 - (1 + n_j)^-1/2) / n_j) A'
//! log|Sigma|   = sum_j log(1 + n_j)
//! ```
//!
//! Everything here works from per-cluster sums; no n x n matrix is formed.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::types::Allocation;

#[derive(Debug, Clone)]
pub struct SigmaOps<'a> {
    alloc: &'a Allocation,
    d_inv: Vec<f64>,
    c_sqrt: Vec<f64>,
}

impl<'a> SigmaOps<'a> {
    pub fn new(alloc: &'a Allocation) -> Self {
        let d_inv = alloc.sizes().iter().map(|&n| 1.0 / (1.0 + n as f64)).collect();
        let c_sqrt = alloc
            .sizes()
            .iter()
            .map(|&n| {
                // (1 - (1+n)^-1/2) / n, rearranged to avoid cancellation
                let r = (1.0 + n as f64).sqrt();
                1.0 / (r * (r + 1.0))
            })
            .collect();
        Self {
            alloc,
            d_inv,
            c_sqrt,
        }
    }

    pub fn alloc(&self) -> &Allocation {
        self.alloc
    }

    pub fn n(&self) -> usize {
        self.alloc.n()
    }

    pub fn d_inv(&self) -> &[f64] {
        &self.d_inv
    }

    pub fn c_sqrt(&self) -> &[f64] {
        &self.c_sqrt
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.n() {
            return Err(Error::Shape {
                expected: self.n(),
                got: len,
            });
        }
        Ok(())
    }

    fn cluster_sums(&self, v: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; self.alloc.k()];
        for (&l, &vi) in self.alloc.labels().iter().zip(v) {
            t[l] += vi;
        }
        t
    }

    fn apply_with(&self, v: &[f64], coef: &[f64]) -> Result<Vec<f64>> {
        self.check_len(v.len())?;
        let t = self.cluster_sums(v);
        Ok(self
            .alloc
            .labels()
            .iter()
            .zip(v)
            .map(|(&l, &vi)| vi - coef[l] * t[l])
            .collect())
    }

    /// Sigma^-1 v.
    pub fn inv_apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.apply_with(v, &self.d_inv)
    }

    /// Sigma^-1/2 v (symmetric square root).
    pub fn inv_sqrt_apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.apply_with(v, &self.c_sqrt)
    }

    /// u' Sigma^-1 v.
    pub fn inv_inner(&self, u: &[f64], v: &[f64]) -> Result<f64> {
        self.check_len(u.len())?;
        self.check_len(v.len())?;
        let tu = self.cluster_sums(u);
        let tv = self.cluster_sums(v);
        let plain: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
        let corr: f64 = (0..tu.len()).map(|j| self.d_inv[j] * tu[j] * tv[j]).sum();
        Ok(plain - corr)
    }

    /// Per-cluster column sums of `x` (k x q).
    fn column_sums(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut s = DMatrix::zeros(self.alloc.k(), x.ncols());
        for (c, col) in x.column_iter().enumerate() {
            for (&l, &v) in self.alloc.labels().iter().zip(col.iter()) {
                s[(l, c)] += v;
            }
        }
        s
    }

    /// X' Sigma^-1 X, accumulated row by row as sum_i x_i (x_i - d_l s_l)'.
    pub fn inv_quadform(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_len(x.nrows())?;
        let s = self.column_sums(x);
        let q = x.ncols();
        let mut out = DMatrix::zeros(q, q);
        for (i, &l) in self.alloc.labels().iter().enumerate() {
            let d = self.d_inv[l];
            for b in 0..q {
                let centred = x[(i, b)] - d * s[(l, b)];
                for a in 0..=b {
                    out[(a, b)] += x[(i, a)] * centred;
                }
            }
        }
        for b in 0..q {
            for a in 0..b {
                out[(b, a)] = out[(a, b)];
            }
        }
        Ok(out)
    }

    /// X' Sigma^-1 v.
    pub fn inv_cross(&self, x: &DMatrix<f64>, v: &[f64]) -> Result<DVector<f64>> {
        self.check_len(x.nrows())?;
        let w = self.inv_apply(v)?;
        Ok(x.tr_mul(&DVector::from_vec(w)))
    }

    pub fn log_det(&self) -> f64 {
        self.alloc.sizes().iter().map(|&n| (1.0 + n as f64).ln()).sum()
    }
}

/// Cholesky factor of a symmetric positive-definite block. A block that fails
/// is retried once with `1e-10 * trace / q` added to the diagonal.
pub fn spd_cholesky(m: &DMatrix<f64>, context: &str) -> Result<Cholesky<f64, Dyn>> {
    if let Some(c) = Cholesky::new(m.clone()) {
        return Ok(c);
    }
    let q = m.nrows().max(1) as f64;
    let jitter = 1e-10 * m.trace().abs() / q;
    let mut jm = m.clone();
    for i in 0..m.nrows() {
        jm[(i, i)] += jitter;
    }
    Cholesky::new(jm).ok_or_else(|| Error::Singular {
        context: context.to_string(),
        condition: condition_estimate(m),
    })
}

/// Ratio of extreme eigenvalue magnitudes of a symmetric matrix.
pub fn condition_estimate(m: &DMatrix<f64>) -> f64 {
    let eig = m.clone().symmetric_eigenvalues();
    let max = eig.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let min = eig.iter().map(|v| v.abs()).fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// b' M^-1 b from a Cholesky factor of M.
pub fn inv_quad(chol: &Cholesky<f64, Dyn>, b: &DVector<f64>) -> f64 {
    let w = chol
        .l_dirty()
        .solve_lower_triangular(b)
        .expect("cholesky factor has a positive diagonal");
    w.norm_squared()
}

/// log det M from a Cholesky factor.
pub fn log_det_chol(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn dense_sigma(alloc: &Allocation) -> DMatrix<f64> {
        let n = alloc.n();
        DMatrix::from_fn(n, n, |i, j| {
            let same = alloc.labels()[i] == alloc.labels()[j];
            (i == j) as u8 as f64 + same as u8 as f64
        })
    }

    fn dense_inv_sqrt(alloc: &Allocation) -> DMatrix<f64> {
        let e = dense_sigma(alloc).symmetric_eigen();
        let d = DMatrix::from_diagonal(&e.eigenvalues.map(|v| 1.0 / v.sqrt()));
        &e.eigenvectors * d * e.eigenvectors.transpose()
    }

    pub(crate) fn plain_gram(x: &DMatrix<f64>) -> DMatrix<f64> {
        let q = x.ncols();
        let mut g = DMatrix::zeros(q, q);
        for i in 0..x.nrows() {
            for a in 0..q {
                for b in 0..q {
                    g[(a, b)] += x[(i, a)] * x[(i, b)];
                }
            }
        }
        g
    }

    fn rel_close(a: &[f64], b: &[f64], tol: f64) -> bool {
        let scale = b.iter().map(|v| v.abs()).fold(1.0, f64::max);
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * scale)
    }

    #[test]
    fn identity_allocation_halves() {
        let a = Allocation::identity(6);
        let ops = SigmaOps::new(&a);
        let v = vec![1.0, -2.0, 3.0, 0.5, 0.0, 8.0];
        let out = ops.inv_apply(&v).unwrap();
        for (o, x) in out.iter().zip(&v) {
            assert_eq!(*o, x / 2.0);
        }
        let s = ops.inv_sqrt_apply(&v).unwrap();
        for (o, x) in s.iter().zip(&v) {
            assert_relative_eq!(*o, x / 2f64.sqrt(), max_relative = 1e-15);
        }
        let x = DMatrix::from_fn(6, 3, |i, j| (i as f64 + 1.0) * (j as f64 - 1.3));
        assert_eq!(ops.inv_quadform(&x).unwrap(), plain_gram(&x) * 0.5);
        assert_relative_eq!(ops.log_det(), 6.0 * 2f64.ln(), max_relative = 1e-15);
    }

    #[test]
    fn single_subject_cluster() {
        let a = Allocation::single(1);
        let ops = SigmaOps::new(&a);
        assert_eq!(ops.inv_apply(&[4.0]).unwrap(), vec![2.0]);
    }

    #[test]
    fn single_cluster_log_det() {
        let a = Allocation::single(9);
        assert_relative_eq!(SigmaOps::new(&a).log_det(), 10f64.ln(), max_relative = 1e-15);
    }

    #[test]
    fn single_cluster_quadform_matches_centering_formula() {
        let n = 7;
        let a = Allocation::single(n);
        let x = DMatrix::from_fn(n, 2, |i, j| ((i * 3 + j * 5) % 7) as f64 - 2.5);
        let got = SigmaOps::new(&a).inv_quadform(&x).unwrap();
        let sums = x.row_sum();
        let expect = x.tr_mul(&x) - sums.transpose() * &sums / (1.0 + n as f64);
        assert!((got - expect).abs().max() < 1e-12);
    }

    #[test]
    fn inv_sqrt_single_cluster_matches_eigendecomposition() {
        let a = Allocation::single(3);
        let ops = SigmaOps::new(&a);
        let dense = dense_inv_sqrt(&a);
        let v = [0.3, -1.2, 2.0];
        let got = ops.inv_sqrt_apply(&v).unwrap();
        let want = &dense * DVector::from_row_slice(&v);
        assert!(rel_close(&got, want.as_slice(), 1e-10));
        assert_eq!(ops.inv_sqrt_apply(&[0.0; 3]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn zero_column_quadform() {
        let a = Allocation::new(vec![0, 1, 0, 1]).unwrap();
        let x = DMatrix::zeros(4, 1);
        assert_eq!(SigmaOps::new(&a).inv_quadform(&x).unwrap()[(0, 0)], 0.0);
    }

    #[test]
    fn length_mismatch_is_reported() {
        let a = Allocation::single(3);
        let ops = SigmaOps::new(&a);
        assert!(matches!(ops.inv_apply(&[1.0]), Err(Error::Shape { expected: 3, got: 1 })));
        assert!(ops.inv_quadform(&DMatrix::zeros(2, 1)).is_err());
    }

    #[test]
    fn coefficient_ranges() {
        let a = Allocation::new(vec![0, 0, 0, 1, 2, 2]).unwrap();
        let ops = SigmaOps::new(&a);
        for (j, &n) in a.sizes().iter().enumerate() {
            assert!(ops.d_inv()[j] > 0.0 && ops.d_inv()[j] < 1.0);
            assert!(ops.c_sqrt()[j] > 0.0 && ops.c_sqrt()[j] < 1.0 / n as f64);
        }
    }

    #[test]
    fn jitter_rescues_tiny_negative_pivot_only() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        // exactly singular: jitter of 1e-10 makes it PD
        assert!(spd_cholesky(&m, "t").is_ok());
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(spd_cholesky(&m, "t"), Err(Error::Singular { .. })));
    }

    fn alloc_strategy() -> impl Strategy<Value = Allocation> {
        (1usize..=50)
            .prop_flat_map(|n| proptest::collection::vec(0usize..n, n))
            .prop_map(|ids| Allocation::from_ids(&ids).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn closed_forms_match_dense(alloc in alloc_strategy(), seed in 0u64..1000) {
            let n = alloc.n();
            let ops = SigmaOps::new(&alloc);
            let sigma = dense_sigma(&alloc);
            let sigma_inv = sigma.clone().try_inverse().unwrap();
            let v: Vec<f64> = (0..n).map(|i| ((i as f64 + 1.0) * (seed as f64 + 0.37)).sin()).collect();
            let dv = DVector::from_row_slice(&v);

            let got = ops.inv_apply(&v).unwrap();
            prop_assert!(rel_close(&got, (&sigma_inv * &dv).as_slice(), 1e-10));

            let half = ops.inv_sqrt_apply(&v).unwrap();
            // principal inverse root: symmetric, positive definite, squares to Sigma^-1
            let s_mat = DMatrix::from_fn(n, n, |i, j| {
                let mut e = vec![0.0; n];
                e[j] = 1.0;
                ops.inv_sqrt_apply(&e).unwrap()[i]
            });
            prop_assert!((&s_mat - s_mat.transpose()).abs().max() < 1e-14);
            prop_assert!((&s_mat * &s_mat - &sigma_inv).abs().max() < 1e-12);
            prop_assert!(s_mat.clone().cholesky().is_some());
            prop_assert!(rel_close(&half, (&s_mat * &dv).as_slice(), 1e-12));
            let twice = ops.inv_sqrt_apply(&half).unwrap();
            prop_assert!(rel_close(&twice, &got, 1e-10));

            let x = DMatrix::from_fn(n, 3, |i, j| ((i * 7 + j * 13 + seed as usize) as f64).cos());
            let q = ops.inv_quadform(&x).unwrap();
            let dq = x.transpose() * &sigma_inv * &x;
            prop_assert!(rel_close(q.as_slice(), dq.as_slice(), 1e-10));

            // PSD order: X' Sigma^-1 X <= X'X
            let diff = &q - x.tr_mul(&x);
            let top = diff.symmetric_eigenvalues().max();
            prop_assert!(top <= 1e-10);

            let ld = sigma.determinant().ln();
            prop_assert!((ops.log_det() - ld).abs() <= 1e-10 * ld.abs().max(1.0));

            let inner = ops.inv_inner(&v, &v).unwrap();
            prop_assert!((inner - dv.dot(&(&sigma_inv * &dv))).abs() <= 1e-10 * inner.abs().max(1.0));
        }
    }
}
