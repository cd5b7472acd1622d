use log::warn;
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::nets::Backbone;
use crate::tensor::Tensor;

/// Diagonal loading added to every covariance.
const LOADING: f64 = 1e-6;

/// Mean and covariance of a feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianFit {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianFit {
    pub fn new(features: &[Vec<f64>]) -> Result<Self> {
        let n = features.len();
        let d = features.first().map_or(0, Vec::len);
        if n < 2 || d == 0 {
            return Err(Error::invalid(format!(
                "a Gaussian fit needs at least 2 non-empty feature vectors, got {n}"
            )));
        }
        if features.iter().any(|f| f.len() != d) {
            return Err(Error::invalid("feature vectors differ in length"));
        }
        if n <= d {
            warn!("{n} samples for {d} feature dimensions; covariance is regularized");
        }
        let x = DMatrix::from_fn(n, d, |i, j| features[i][j]);
        let mean = DVector::from_fn(d, |j, _| x.column(j).sum() / n as f64);
        let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
        let mut cov = centered.transpose() * &centered / (n - 1) as f64;
        for j in 0..d {
            cov[(j, j)] += LOADING;
        }
        Ok(GaussianFit { mean, cov })
    }
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let e = sym.symmetric_eigen();
    let s = DMatrix::from_diagonal(&e.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &e.eigenvectors * s * e.eigenvectors.transpose()
}

/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2)`.
pub fn frechet_distance(a: &GaussianFit, b: &GaussianFit) -> f64 {
    let diff = (&a.mean - &b.mean).norm_squared();
    let ra = sym_sqrt(&a.cov);
    let inner = &ra * &b.cov * &ra;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = inner
        .symmetric_eigenvalues()
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum();
    (diff + a.cov.trace() + b.cov.trace() - 2.0 * cross).max(0.0)
}

/// Fréchet distance between Gaussian fits of pooled frozen-backbone
/// features of two image sets.
pub fn feature_distribution_distance(
    backbone: &Backbone,
    a: &[Tensor],
    b: &[Tensor],
) -> Result<f64> {
    let features = |set: &[Tensor]| -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(set.len());
        for chunk in set.chunks(32) {
            out.extend(backbone.pooled_features(&Tensor::stack(chunk))?);
        }
        Ok(out)
    };
    Ok(frechet_distance(
        &GaussianFit::new(&features(a)?)?,
        &GaussianFit::new(&features(b)?)?,
    ))
}
