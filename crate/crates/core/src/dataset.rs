//! Synthetic pre-training data, empirical statistics and subspace adherence.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{asymmetry, orthonormalize, singular_values_tall, CovSpectrum};
use crate::rng::stream_rng;

/// Singular values below this fraction of the largest are treated as zero
/// when recovering a subspace from samples.
pub const BASIS_SV_RTOL: f64 = 1e-8;

const ORTHONORMAL_TOL: f64 = 1e-10;

/// Orthonormal `D×d` basis `A` of the data subspace.
#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceBasis {
    a: DMatrix<f64>,
}

impl SubspaceBasis {
    pub fn new(a: DMatrix<f64>) -> Result<Self> {
        let (big_d, d) = a.shape();
        if d == 0 || d > big_d {
            return Err(Error::domain(format!(
                "basis must have 1 <= d <= D columns, got D={big_d}, d={d}"
            )));
        }
        let err = (a.tr_mul(&a) - DMatrix::identity(d, d)).norm();
        if !(err < ORTHONORMAL_TOL) {
            return Err(Error::domain(format!(
                "basis columns are not orthonormal (|AᵀA − I|_F = {err:e})"
            )));
        }
        Ok(Self { a })
    }

    /// QR of a seeded standard-Gaussian `D×d` matrix with `diag(R) > 0`.
    pub fn random(ambient: usize, latent: usize, seed: u64) -> Result<Self> {
        if latent == 0 || latent > ambient {
            return Err(Error::config("latent_dim", "need 1 <= d <= D"));
        }
        let mut rng = stream_rng(seed, u64::MAX);
        let g = DMatrix::from_fn(ambient, latent, |_, _| rng.sample::<f64, _>(StandardNormal));
        Self::new(orthonormalize(&g)?)
    }

    /// The first `d` columns of the identity.
    pub fn canonical(ambient: usize, latent: usize) -> Result<Self> {
        Self::new(DMatrix::identity(ambient, latent))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn ambient_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn latent_dim(&self) -> usize {
        self.a.ncols()
    }

    /// `AAᵀx`.
    pub fn project(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.a * self.a.tr_mul(x)
    }

    /// `(I − AAᵀ)x`.
    pub fn orthogonal(&self, x: &DVector<f64>) -> DVector<f64> {
        x - self.project(x)
    }

    /// `AAᵀ` as a dense matrix.
    pub fn projector(&self) -> DMatrix<f64> {
        &self.a * self.a.transpose()
    }
}

/// Mean vector and PSD covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianDist {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianDist {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        Error::check_dim(mean.len(), cov.nrows(), "covariance rows")?;
        Error::check_dim(mean.len(), cov.ncols(), "covariance columns")?;
        let asym = asymmetry(&cov);
        if asym > 1e-10 {
            return Err(Error::domain(format!("covariance is not symmetric ({asym:e})")));
        }
        CovSpectrum::new(&cov)?;
        Ok(Self { mean, cov })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: DVector::zeros(dim),
            cov: DMatrix::identity(dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Latent distribution for subspace data.
#[derive(Debug, Clone, PartialEq)]
pub enum LatentDist {
    StdNormal,
    Gaussian(GaussianDist),
}

/// Samples stored as the columns of a `D×n` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: DMatrix<f64>,
    basis: Option<SubspaceBasis>,
}

impl Dataset {
    pub fn new(samples: DMatrix<f64>, basis: Option<SubspaceBasis>) -> Result<Self> {
        if samples.ncols() == 0 {
            return Err(Error::domain("dataset has no samples"));
        }
        if let Some(b) = &basis {
            Error::check_dim(b.ambient_dim(), samples.nrows(), "basis ambient dimension")?;
        }
        Ok(Self { samples, basis })
    }

    /// Build from one row per sample.
    pub fn from_rows(rows: &[Vec<f64>], basis: Option<SubspaceBasis>) -> Result<Self> {
        let n = rows.len();
        let dim = rows.first().map_or(0, Vec::len);
        for r in rows {
            Error::check_dim(dim, r.len(), "sample length")?;
        }
        let m = DMatrix::from_fn(dim, n, |i, j| rows[j][i]);
        Self::new(m, basis)
    }

    pub fn len(&self) -> usize {
        self.samples.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.ncols() == 0
    }

    pub fn dim(&self) -> usize {
        self.samples.nrows()
    }

    /// `D×n` sample matrix.
    pub fn samples(&self) -> &DMatrix<f64> {
        &self.samples
    }

    pub fn sample(&self, i: usize) -> DVector<f64> {
        self.samples.column(i).into_owned()
    }

    pub fn basis(&self) -> Option<&SubspaceBasis> {
        self.basis.as_ref()
    }

    pub fn with_basis(mut self, basis: Option<SubspaceBasis>) -> Result<Self> {
        if let Some(b) = &basis {
            Error::check_dim(b.ambient_dim(), self.dim(), "basis ambient dimension")?;
        }
        self.basis = basis;
        Ok(self)
    }
}

/// Draw `n` standard-normal columns of length `dim`, one RNG stream per column.
pub(crate) fn standard_normal_columns(dim: usize, n: usize, seed: u64) -> DMatrix<f64> {
    let mut z = DMatrix::zeros(dim, n);
    z.par_column_iter_mut().enumerate().for_each(|(j, mut col)| {
        let mut rng = stream_rng(seed, j as u64);
        for v in col.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
    });
    z
}

/// Samples `x = A u` with `u` drawn from `latent`.
pub fn generate_subspace(
    basis: &SubspaceBasis,
    latent: &LatentDist,
    n: usize,
    seed: u64,
) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::config("n", "must be at least 1"));
    }
    let d = basis.latent_dim();
    let mut u = standard_normal_columns(d, n, seed);
    if let LatentDist::Gaussian(dist) = latent {
        Error::check_dim(d, dist.dim(), "latent distribution dimension")?;
        let f = CovSpectrum::new(&dist.cov)?.sqrt_factor();
        let z = u.rows(0, f.ncols()).into_owned();
        u = &f * z;
        for mut col in u.column_iter_mut() {
            col += &dist.mean;
        }
    }
    Dataset::new(basis.matrix() * u, Some(basis.clone()))
}

/// Samples from a (possibly degenerate) Gaussian.
pub fn generate_gaussian(dist: &GaussianDist, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::config("n", "must be at least 1"));
    }
    let f = CovSpectrum::new(&dist.cov)?.sqrt_factor();
    let z = standard_normal_columns(f.ncols(), n, seed);
    let mut x = &f * z;
    for mut col in x.column_iter_mut() {
        col += &dist.mean;
    }
    Dataset::new(x, None)
}

/// Column mean of a `D×n` matrix.
pub fn column_mean(samples: &DMatrix<f64>) -> DVector<f64> {
    let n = samples.ncols() as f64;
    samples.column_sum() / n
}

/// Mean and `1/n`-normalized covariance of the columns of `samples`.
pub fn sample_stats(samples: &DMatrix<f64>) -> GaussianDist {
    let n = samples.ncols();
    let mean = column_mean(samples);
    let mut centered = samples.clone();
    for mut col in centered.column_iter_mut() {
        col -= &mean;
    }
    let cov = if n <= 1 {
        DMatrix::zeros(samples.nrows(), samples.nrows())
    } else {
        let c = &centered * centered.transpose() / n as f64;
        (&c + c.transpose()) * 0.5
    };
    GaussianDist { mean, cov }
}

pub fn empirical_stats(data: &Dataset) -> GaussianDist {
    sample_stats(data.samples())
}

fn normalized_weights(weights: &[f64], n: usize) -> Result<Vec<f64>> {
    Error::check_dim(n, weights.len(), "weights")?;
    if weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
        return Err(Error::config("weights", "must be positive and finite"));
    }
    let total: f64 = weights.iter().sum();
    Ok(weights.iter().map(|w| w / total).collect())
}

/// `Σ wᵢxᵢ / Σ wᵢ`.
pub fn weighted_mean(data: &Dataset, weights: &[f64]) -> Result<DVector<f64>> {
    let w = normalized_weights(weights, data.len())?;
    let mut m = DVector::zeros(data.dim());
    for (j, col) in data.samples().column_iter().enumerate() {
        m.axpy(w[j], &col, 1.0);
    }
    Ok(m)
}

/// Numerical rank of the centered latent coordinates `Aᵀ(xᵢ − x̄)`.
pub fn latent_rank(data: &Dataset, basis: &SubspaceBasis) -> usize {
    let stats_mean = column_mean(data.samples());
    let mut centered = data.samples().clone();
    for mut col in centered.column_iter_mut() {
        col -= &stats_mean;
    }
    let latent = basis.matrix().tr_mul(&centered);
    numerical_rank(&singular_values_tall(&latent.transpose()))
}

fn numerical_rank(sv: &DVector<f64>) -> usize {
    let max = sv.max();
    if !(max > 0.0) {
        return 0;
    }
    sv.iter().filter(|&&s| s > BASIS_SV_RTOL * max).count()
}

/// Recover the column space of the centered samples.
///
/// With `latent_dim = Some(d)` the rank must be at least `d` and the top `d`
/// directions are returned; otherwise the numerical rank is used.
pub fn recover_basis(data: &Dataset, latent_dim: Option<usize>) -> Result<SubspaceBasis> {
    let mean = column_mean(data.samples());
    let mut centered_t = data.samples().transpose();
    for mut row in centered_t.row_iter_mut() {
        row -= &mean.transpose();
    }
    let big_d = data.dim();
    let r = if centered_t.nrows() >= big_d {
        centered_t.qr().r()
    } else {
        centered_t
    };
    let svd = r.svd(false, true);
    let v_t = svd.v_t.expect("requested right singular vectors");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let rank = numerical_rank(&svd.singular_values);
    let d = match latent_dim {
        Some(d) if rank < d => return Err(Error::RankDeficient { rank, required: d }),
        Some(d) => d,
        None if rank == 0 => return Err(Error::RankDeficient { rank, required: 1 }),
        None => rank,
    };
    let mut a = DMatrix::zeros(big_d, d);
    for (j, &src) in order.iter().take(d).enumerate() {
        a.set_column(j, &v_t.row(src).transpose());
    }
    SubspaceBasis::new(orthonormalize(&a)?)
}

/// `‖(I − AAᵀ)x‖ / ‖AAᵀx‖`; `+∞` when the on-support part vanishes.
pub fn off_support_ratio(x: &DVector<f64>, basis: &SubspaceBasis) -> Result<f64> {
    Error::check_dim(basis.ambient_dim(), x.len(), "vector length")?;
    if x.iter().all(|&v| v == 0.0) {
        return Err(Error::domain("off-support ratio of the zero vector"));
    }
    let on = basis.project(x);
    let off = (x - &on).norm();
    let on = on.norm();
    Ok(if on == 0.0 { f64::INFINITY } else { off / on })
}

/// Mean of per-sample off-support ratios over the columns of `samples`.
pub fn batch_off_support_ratio(samples: &DMatrix<f64>, basis: &SubspaceBasis) -> Result<f64> {
    Error::check_dim(basis.ambient_dim(), samples.nrows(), "sample dimension")?;
    let n = samples.ncols();
    if n == 0 {
        return Err(Error::domain("empty batch"));
    }
    let latent = basis.matrix().tr_mul(samples);
    let on = basis.matrix() * &latent;
    let mut total = 0.0;
    for j in 0..n {
        let x = samples.column(j);
        if x.iter().all(|&v| v == 0.0) {
            return Err(Error::domain("off-support ratio of the zero vector"));
        }
        let on_j = on.column(j);
        let on_norm = latent.column(j).norm();
        let off = (x - on_j).norm();
        total += if on_norm == 0.0 { f64::INFINITY } else { off / on_norm };
    }
    Ok(total / n as f64)
}
