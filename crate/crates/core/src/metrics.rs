//! Objective metrics: Fréchet distance between embedding Gaussians,
//! log-spectral distance and SI-SDR.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Diagonal ridge added to every sample covariance.
pub const COV_RIDGE: f64 = 1e-6;
pub const SI_SDR_CAP_DB: f64 = 60.0;

/// Mean and ridge-regularised sample covariance of a set of embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbedStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub n: usize,
}

impl EmbedStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Stats of a Gaussian given directly (used for closed-form checks).
    pub fn from_moments(mean: Vec<f64>, cov: DMatrix<f64>, n: usize) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(invalid(format!("covariance {}×{} for a {}-dim mean", cov.nrows(), cov.ncols(), mean.len())));
        }
        Ok(Self {
            mean: DVector::from_vec(mean),
            cov,
            n,
        })
    }

    fn is_finite(&self) -> bool {
        self.mean.iter().chain(self.cov.iter()).all(|v| v.is_finite())
    }
}

/// Sample mean and unbiased covariance (`n − 1`) plus `COV_RIDGE · I`.
pub fn embedding_stats<R: AsRef<[f64]>>(embeddings: &[R]) -> Result<EmbedStats> {
    let n = embeddings.len();
    if n < 2 {
        return Err(invalid(format!("embedding statistics need at least 2 samples, got {n}")));
    }
    let d = embeddings[0].as_ref().len();
    if d == 0 || embeddings.iter().any(|e| e.as_ref().len() != d) {
        return Err(invalid("embeddings must share one non-zero dimension"));
    }
    let mut mean = DVector::zeros(d);
    for e in embeddings {
        mean += DVector::from_column_slice(e.as_ref());
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for e in embeddings {
        let c = DVector::from_column_slice(e.as_ref()) - &mean;
        cov += &c * c.transpose();
    }
    cov /= (n - 1) as f64;
    for i in 0..d {
        cov[(i, i)] += COV_RIDGE;
    }
    Ok(EmbedStats { mean, cov, n })
}

/// PSD square root by symmetric eigendecomposition. Negative eigenvalues
/// (rounding noise, |λ| ~ 1e-10) are clamped to zero; small positive ones are
/// kept, since the ridge makes them legitimately ~1e-12 in a product.
fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `‖μ1 − μ2‖² + Tr(Σ1 + Σ2 − 2(Σ1^{1/2} Σ2 Σ1^{1/2})^{1/2})`, floored at 0.
pub fn frechet_distance(a: &EmbedStats, b: &EmbedStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(invalid(format!("Fréchet distance between {}-dim and {}-dim stats", a.dim(), b.dim())));
    }
    if !a.is_finite() || !b.is_finite() {
        return Err(invalid("Fréchet distance of non-finite statistics"));
    }
    let diff = &a.mean - &b.mean;
    let r1 = sqrt_psd(&a.cov);
    let cross = sqrt_psd(&(&r1 * &b.cov * &r1));
    let d2 = diff.dot(&diff) + a.cov.trace() + b.cov.trace() - 2.0 * cross.trace();
    Ok(d2.max(0.0))
}

/// `10·√mean((A − B)²)` for log10-mel grids, in dB.
pub fn log_spectral_distance(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(invalid(format!("LSD needs equal non-empty grids, got {} and {}", a.len(), b.len())));
    }
    let ms = a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / a.len() as f64;
    Ok(10.0 * ms.sqrt())
}

/// Scale-invariant SDR in dB, capped at +60.
pub fn si_sdr(est: &[f64], reference: &[f64]) -> Result<f64> {
    if est.len() != reference.len() || est.is_empty() {
        return Err(invalid(format!("SI-SDR needs equal lengths, got {} and {}", est.len(), reference.len())));
    }
    let rr: f64 = reference.iter().map(|r| r * r).sum();
    if rr <= 0.0 {
        return Err(invalid("SI-SDR reference is silent"));
    }
    let alpha = est.iter().zip(reference).map(|(e, r)| e * r).sum::<f64>() / rr;
    let (mut sig, mut res) = (0.0, 0.0);
    for (e, r) in est.iter().zip(reference) {
        let s = alpha * r;
        sig += s * s;
        res += (e - s).powi(2);
    }
    if res == 0.0 {
        return Ok(SI_SDR_CAP_DB);
    }
    Ok((10.0 * (sig / res).log10()).min(SI_SDR_CAP_DB))
}

/// Per-item values with their mean and median.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub per_item: Vec<f64>,
    pub mean: f64,
    pub median: f64,
}

impl MetricSummary {
    pub fn new(per_item: Vec<f64>) -> Self {
        Self {
            mean: mean(&per_item),
            median: median(&per_item),
            per_item,
        }
    }

    /// A set-level value (e.g. a Fréchet distance) reported as one item.
    pub fn scalar(v: f64) -> Self {
        Self::new(vec![v])
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Coefficient of determination of the least-squares line through `(x, y)`.
pub fn linear_fit_r2(x: &[f64], y: &[f64]) -> Result<(f64, f64, f64)> {
    if x.len() != y.len() || x.len() < 3 {
        return Err(invalid("linear fit needs at least 3 paired points"));
    }
    let (mx, my) = (mean(x), mean(y));
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(invalid("linear fit with constant x"));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Ok((slope, intercept, r2))
}
