//! Distances between two sets of feature embeddings: Fréchet distance of
//! Gaussian fits (FID), unbiased polynomial-kernel MMD² over random subsets
//! (KID) and RBF-kernel MMD² on unit-normalized rows (CMMD).

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::embedding::{row_norm, EmbeddingError, EmbeddingMatrix};
use crate::sampling::{sample_indices, seeded_rng};
use crate::summation::{mean, pairwise_sum, population_std};

/// Relative tolerance separating round-off from genuine indefiniteness.
pub const EIGEN_CLAMP_REL: f64 = 1e-8;
pub const SYMMETRY_TOL: f64 = 1e-8;
/// Negative Fréchet distances down to this value are round-off.
pub const FID_NEGATIVE_TOL: f64 = 1e-6;

pub const DEFAULT_KID_SUBSET: usize = 1000;
pub const DEFAULT_KID_SUBSETS: usize = 100;
pub const DEFAULT_CMMD_BANDWIDTH: f64 = 10.0;
pub const DEFAULT_CMMD_SCALE: f64 = 1000.0;

#[derive(Debug, Error)]
pub enum DistError {
    #[error("need ≥2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("matrix is not square")]
    NotSquare,
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    Asymmetric(f64),
    #[error("matrix is indefinite (eigenvalue {0:e})")]
    Indefinite(f64),
    #[error("Fréchet distance came out negative ({0:e})")]
    NegativeDistance(f64),
    #[error("subset size {subset} invalid for sets of {nx} and {ny} rows (need 2 ≤ size ≤ min)")]
    BadSubset { subset: usize, nx: usize, ny: usize },
    #[error("number of subsets must be positive")]
    NoSubsets,
    #[error("bandwidth must be positive, got {0}")]
    BadBandwidth(f64),
    #[error("scale must be positive, got {0}")]
    BadScale(f64),
    #[error("empty embedding set")]
    Empty,
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

fn check_dims(x: &EmbeddingMatrix, y: &EmbeddingMatrix) -> Result<(), DistError> {
    if x.dim() != y.dim() {
        Err(DistError::DimMismatch(x.dim(), y.dim()))
    } else {
        Ok(())
    }
}

/// Mean and unbiased covariance of an embedding set.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub sample_count: usize,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Column mean and `(n-1)`-divisor covariance, symmetrized.
pub fn fit_gaussian(matrix: &EmbeddingMatrix) -> Result<GaussianStats, DistError> {
    let n = matrix.n_rows();
    if n < 2 {
        return Err(DistError::TooFewSamples(n));
    }
    let d = matrix.dim();
    let data = DMatrix::from_row_iterator(n, d, matrix.as_slice().iter().map(|&v| f64::from(v)));
    let mean = DVector::from_iterator(
        d,
        (0..d).map(|c| {
            let col: Vec<f64> = data.column(c).iter().copied().collect();
            pairwise_sum(&col) / n as f64
        }),
    );
    let mut centered = data;
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = (centered.transpose() * &centered) / (n as f64 - 1.0);
    let covariance = (&cov + cov.transpose()) * 0.5;
    Ok(GaussianStats {
        mean,
        covariance,
        sample_count: n,
    })
}

fn check_symmetric(a: &DMatrix<f64>) -> Result<(), DistError> {
    if !a.is_square() {
        return Err(DistError::NotSquare);
    }
    let scale = a.amax().max(1.0);
    let asym = (a - a.transpose()).amax();
    if asym > SYMMETRY_TOL * scale {
        return Err(DistError::Asymmetric(asym));
    }
    Ok(())
}

/// Eigen-decomposes a symmetric matrix and clamps round-off negatives.
fn psd_eigen(a: &DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>), DistError> {
    check_symmetric(a)?;
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let largest = eig.eigenvalues.amax();
    let mut values = eig.eigenvalues;
    for v in values.iter_mut() {
        if *v < 0.0 {
            if *v < -EIGEN_CLAMP_REL * largest {
                return Err(DistError::Indefinite(*v));
            }
            *v = 0.0;
        }
    }
    Ok((eig.eigenvectors, values))
}

/// Principal square root `Q sqrt(L) Q^T` of a symmetric PSD matrix.
pub fn sqrtm_psd(a: &DMatrix<f64>) -> Result<DMatrix<f64>, DistError> {
    let (q, values) = psd_eigen(a)?;
    let root = DMatrix::from_diagonal(&values.map(f64::sqrt));
    let s = &q * root * q.transpose();
    Ok((&s + s.transpose()) * 0.5)
}

/// `|mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2))`, with the cross term
/// evaluated as `tr((S1^(1/2) S2 S1^(1/2))^(1/2))`.
pub fn frechet_distance(p: &GaussianStats, q: &GaussianStats) -> Result<f64, DistError> {
    if p.dim() != q.dim() {
        return Err(DistError::DimMismatch(p.dim(), q.dim()));
    }
    if p.mean == q.mean && p.covariance == q.covariance {
        return Ok(0.0);
    }
    let diff = &p.mean - &q.mean;
    let mean_term = diff.dot(&diff);
    let s1 = sqrtm_psd(&p.covariance)?;
    psd_eigen(&q.covariance)?;
    let sandwich = &s1 * &q.covariance * &s1;
    let sandwich = (&sandwich + sandwich.transpose()) * 0.5;
    let (_, values) = psd_eigen(&sandwich)?;
    let tr_covmean: f64 = values.iter().map(|v| v.sqrt()).sum();
    let fid = mean_term + p.covariance.trace() + q.covariance.trace() - 2.0 * tr_covmean;
    if fid < 0.0 {
        if fid >= -FID_NEGATIVE_TOL {
            return Ok(0.0);
        }
        return Err(DistError::NegativeDistance(fid));
    }
    Ok(fid)
}

/// FID between two embedding sets.
pub fn fid(x: &EmbeddingMatrix, y: &EmbeddingMatrix) -> Result<f64, DistError> {
    check_dims(x, y)?;
    frechet_distance(&fit_gaussian(x)?, &fit_gaussian(y)?)
}

/// `(a.b / d + 1)^3`.
pub fn polynomial_kernel(a: &[f32], b: &[f32]) -> f64 {
    let d = a.len() as f64;
    let dot: f64 = a.iter().zip(b).map(|(&u, &v)| f64::from(u) * f64::from(v)).sum();
    (dot / d + 1.0).powi(3)
}

/// Sum of `kernel(a_i, b_j)` over all pairs, skipping `i == j` when
/// `skip_diagonal`. Rows are summed in order, then reduced pairwise.
fn kernel_sum<T, K>(a: &[T], b: &[T], skip_diagonal: bool, kernel: K) -> f64
where
    T: Sync,
    K: Fn(&T, &T) -> f64 + Sync,
{
    let row_sums: Vec<f64> = a
        .par_iter()
        .enumerate()
        .map(|(i, ai)| {
            let vals: Vec<f64> = b
                .iter()
                .enumerate()
                .filter(|&(j, _)| !(skip_diagonal && i == j))
                .map(|(_, bj)| kernel(ai, bj))
                .collect();
            pairwise_sum(&vals)
        })
        .collect();
    pairwise_sum(&row_sums)
}

/// Unbiased MMD² with the cubic polynomial kernel on two equal-size sets.
pub fn mmd2_unbiased_polynomial(x: &[&[f32]], y: &[&[f32]]) -> f64 {
    let m = x.len() as f64;
    let k = |a: &&[f32], b: &&[f32]| polynomial_kernel(a, b);
    let kxx = kernel_sum(x, x, true, k) / (m * (m - 1.0));
    let kyy = kernel_sum(y, y, true, k) / (m * (m - 1.0));
    let kxy = kernel_sum(x, y, false, k) / (m * m);
    kxx + kyy - 2.0 * kxy
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KidParams {
    pub subset_size: usize,
    pub n_subsets: usize,
    pub seed: u64,
}

impl KidParams {
    /// `subset_size = min(1000, n)`, 100 subsets.
    pub fn defaults_for(nx: usize, ny: usize, seed: u64) -> Self {
        Self {
            subset_size: DEFAULT_KID_SUBSET.min(nx.min(ny)),
            n_subsets: DEFAULT_KID_SUBSETS,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KidEstimate {
    pub mean: f64,
    /// Population standard deviation across subsets.
    pub std: f64,
}

/// KID: unbiased MMD² averaged over seeded subsets drawn without
/// replacement from each set.
pub fn kid_unbiased(x: &EmbeddingMatrix, y: &EmbeddingMatrix, params: KidParams) -> Result<KidEstimate, DistError> {
    check_dims(x, y)?;
    let m = params.subset_size;
    if m < 2 || m > x.n_rows() || m > y.n_rows() {
        return Err(DistError::BadSubset {
            subset: m,
            nx: x.n_rows(),
            ny: y.n_rows(),
        });
    }
    if params.n_subsets == 0 {
        return Err(DistError::NoSubsets);
    }
    let mut rng = seeded_rng(params.seed);
    let draws: Vec<(Vec<usize>, Vec<usize>)> = (0..params.n_subsets)
        .map(|_| {
            let xi = sample_indices(x.n_rows(), m, &mut rng);
            let yi = sample_indices(y.n_rows(), m, &mut rng);
            (xi, yi)
        })
        .collect();
    let estimates: Vec<f64> = draws
        .iter()
        .map(|(xi, yi)| {
            let xs: Vec<&[f32]> = xi.iter().map(|&i| x.row(i)).collect();
            let ys: Vec<&[f32]> = yi.iter().map(|&i| y.row(i)).collect();
            mmd2_unbiased_polynomial(&xs, &ys)
        })
        .collect();
    Ok(KidEstimate {
        mean: mean(&estimates).expect("non-empty"),
        std: population_std(&estimates).expect("non-empty"),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CmmdParams {
    pub bandwidth: f64,
    pub scale: f64,
}

impl Default for CmmdParams {
    fn default() -> Self {
        Self {
            bandwidth: DEFAULT_CMMD_BANDWIDTH,
            scale: DEFAULT_CMMD_SCALE,
        }
    }
}

fn rbf(gamma: f64) -> impl Fn(&Vec<f64>, &Vec<f64>) -> f64 + Sync {
    move |a, b| {
        let sq: f64 = a
            .iter()
            .zip(b)
            .map(|(u, v)| {
                let d = u - v;
                d * d
            })
            .sum();
        (-gamma * sq).exp()
    }
}

fn unit_rows_f64(m: &EmbeddingMatrix) -> Result<Vec<Vec<f64>>, DistError> {
    m.rows()
        .enumerate()
        .map(|(i, r)| {
            let norm = row_norm(r);
            if norm == 0.0 {
                return Err(EmbeddingError::ZeroNorm { row: i }.into());
            }
            Ok(r.iter().map(|&v| f64::from(v) / norm).collect())
        })
        .collect()
}

/// Biased (V-statistic) MMD² with a Gaussian RBF kernel on unit-normalized
/// rows, multiplied by `scale`.
pub fn cmmd(x: &EmbeddingMatrix, y: &EmbeddingMatrix, params: CmmdParams) -> Result<f64, DistError> {
    check_dims(x, y)?;
    if x.is_empty() || y.is_empty() {
        return Err(DistError::Empty);
    }
    if !(params.bandwidth.is_finite() && params.bandwidth > 0.0) {
        return Err(DistError::BadBandwidth(params.bandwidth));
    }
    if !(params.scale.is_finite() && params.scale > 0.0) {
        return Err(DistError::BadScale(params.scale));
    }
    let xs = unit_rows_f64(x)?;
    let ys = unit_rows_f64(y)?;
    let gamma = 1.0 / (2.0 * params.bandwidth * params.bandwidth);
    let kernel_mean =
        |a: &[Vec<f64>], b: &[Vec<f64>]| kernel_sum(a, b, false, rbf(gamma)) / (a.len() as f64 * b.len() as f64);
    let mmd2 = kernel_mean(&xs, &xs) + kernel_mean(&ys, &ys) - 2.0 * kernel_mean(&xs, &ys);
    Ok((params.scale * mmd2).max(0.0))
}

/// The four realism values for a real/synthetic pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RealismMetrics {
    pub fid: f64,
    pub kid_mean: f64,
    pub kid_std: f64,
    pub cmmd: f64,
}

pub fn realism_metrics(
    real: &EmbeddingMatrix,
    synthetic: &EmbeddingMatrix,
    kid: KidParams,
    cmmd_params: CmmdParams,
) -> Result<RealismMetrics, DistError> {
    check_dims(real, synthetic)?;
    let fid = fid(real, synthetic)?;
    let k = kid_unbiased(real, synthetic, kid)?;
    let c = cmmd(real, synthetic, cmmd_params)?;
    Ok(RealismMetrics {
        fid,
        kid_mean: k.mean,
        kid_std: k.std,
        cmmd: c,
    })
}
