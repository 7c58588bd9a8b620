//! Small dense linear-algebra helpers shared by the model and sampler code.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Eigenvalues below `-NEG_EIG_TOL` make a matrix non-PSD.
pub const NEG_EIG_TOL: f64 = 1e-10;

/// Eigenvalues below this fraction of the largest one are treated as zero.
pub const EIG_RANK_RTOL: f64 = 1e-12;

/// Cached symmetric eigendecomposition `M = Q diag(λ) Qᵀ` of a PSD matrix.
///
/// Eigenvalues are sorted in decreasing order; negatives within tolerance and
/// roundoff-level positives are clipped to exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct CovSpectrum {
    q: DMatrix<f64>,
    lambda: DVector<f64>,
    rank: usize,
}

impl CovSpectrum {
    pub fn new(m: &DMatrix<f64>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::Dimension {
                expected: m.nrows(),
                got: m.ncols(),
                context: "covariance must be square".into(),
            });
        }
        let n = m.nrows();
        if n == 0 {
            return Ok(Self {
                q: DMatrix::zeros(0, 0),
                lambda: DVector::zeros(0),
                rank: 0,
            });
        }
        let sym = symmetrize(m);
        let eig = sym.symmetric_eigen();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

        let min = eig.eigenvalues.min();
        if min < -NEG_EIG_TOL {
            return Err(Error::NotPsd { min_eigenvalue: min });
        }
        let max = eig.eigenvalues.max().max(0.0);
        let cut = max * EIG_RANK_RTOL;

        let mut q = DMatrix::zeros(n, n);
        let mut lambda = DVector::zeros(n);
        let mut rank = 0;
        for (dst, &src) in order.iter().enumerate() {
            let l = eig.eigenvalues[src];
            let l = if l <= cut { 0.0 } else { l };
            if l > 0.0 {
                rank += 1;
            }
            lambda[dst] = l;
            q.set_column(dst, &eig.eigenvectors.column(src));
        }
        Ok(Self { q, lambda, rank })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            q: DMatrix::identity(n, n),
            lambda: DVector::from_element(n, 1.0),
            rank: n,
        }
    }

    pub fn dim(&self) -> usize {
        self.lambda.len()
    }

    /// Number of nonzero eigenvalues after clipping.
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.lambda
    }

    pub fn eigenvectors(&self) -> &DMatrix<f64> {
        &self.q
    }

    /// Coordinates of `v` in the eigenbasis, `Qᵀv`.
    pub fn coords(&self, v: &DVector<f64>) -> DVector<f64> {
        self.q.tr_mul(v)
    }

    /// `Q diag(f(λ)) Qᵀ v`.
    pub fn apply<F: Fn(f64) -> f64>(&self, v: &DVector<f64>, f: F) -> DVector<f64> {
        let mut c = self.q.tr_mul(v);
        for (ci, &l) in c.iter_mut().zip(self.lambda.iter()) {
            *ci *= f(l);
        }
        &self.q * c
    }

    /// `Q diag(f(λ)) Qᵀ` as a dense matrix.
    pub fn matrix<F: Fn(f64) -> f64>(&self, f: F) -> DMatrix<f64> {
        let mut scaled = self.q.clone();
        for (j, &l) in self.lambda.iter().enumerate() {
            let s = f(l);
            scaled.column_mut(j).scale_mut(s);
        }
        symmetrize(&(&scaled * self.q.transpose()))
    }

    /// Orthonormal basis of the range (eigenvectors with nonzero eigenvalue).
    pub fn range_basis(&self) -> DMatrix<f64> {
        self.q.columns(0, self.rank).into_owned()
    }

    /// `D×r` factor `F` with `F Fᵀ = M`, restricted to the range.
    pub fn sqrt_factor(&self) -> DMatrix<f64> {
        let mut f = self.range_basis();
        for j in 0..self.rank {
            let s = self.lambda[j].sqrt();
            f.column_mut(j).scale_mut(s);
        }
        f
    }

    /// Reassemble the (clipped) matrix.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        self.matrix(|l| l)
    }
}

/// `(M + Mᵀ)/2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Maximum absolute asymmetry `max |M_ij − M_ji|`.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        for j in 0..i {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Orthonormalize the columns of `m` by thin QR, flipping signs so that
/// `diag(R) ≥ 0`.
pub fn orthonormalize(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (rows, cols) = m.shape();
    if cols > rows {
        return Err(Error::domain(format!(
            "cannot orthonormalize {cols} columns in dimension {rows}"
        )));
    }
    let qr = m.clone().qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..cols {
        if r[(j, j)] == 0.0 {
            return Err(Error::RankDeficient {
                rank: j,
                required: cols,
            });
        }
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    Ok(q)
}

/// Singular values of a tall matrix, computed from the `R` factor of a thin QR.
pub fn singular_values_tall(m: &DMatrix<f64>) -> DVector<f64> {
    if m.nrows() >= m.ncols() {
        let r = m.clone().qr().r();
        r.singular_values()
    } else {
        m.singular_values()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spectrum_reconstructs_and_sorts() {
        let m = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.0, 1.0, 3.0, 0.0, 0.0, 0.0, 0.0]);
        let s = CovSpectrum::new(&m).unwrap();
        assert_eq!(s.rank(), 2);
        assert!(s.eigenvalues()[0] >= s.eigenvalues()[1]);
        assert!((s.reconstruct() - &m).norm() < 1e-12);
        let f = s.sqrt_factor();
        assert!((&f * f.transpose() - &m).norm() < 1e-12);
    }

    #[test]
    fn spectrum_rejects_negative_definite() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1e-3]));
        assert!(matches!(CovSpectrum::new(&m), Err(Error::NotPsd { .. })));
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1e-12]));
        let s = CovSpectrum::new(&m).unwrap();
        assert_eq!(s.eigenvalues()[1], 0.0);
    }

    #[test]
    fn orthonormalize_fixes_sign() {
        let m = DMatrix::from_row_slice(3, 2, &[-2.0, 0.0, 0.0, 3.0, 0.0, 1.0]);
        let q = orthonormalize(&m).unwrap();
        assert!((q.tr_mul(&q) - DMatrix::identity(2, 2)).norm() < 1e-14);
        assert!(q[(0, 0)] < 0.0);
        let r = q.tr_mul(&m);
        assert!(r[(0, 0)] > 0.0 && r[(1, 1)] > 0.0);
    }
}
