//! Fitting the frozen projection: streaming first/second moments over
//! posterior features, eigendecomposition of the population covariance,
//! top-k selection.

use crate::error::{Error, Result};
use crate::gaussian::Projection;
use crate::linalg::{symmetric_eigen, Matrix};

/// Running `f64` sums of features and their outer products.
#[derive(Debug, Clone)]
pub struct MomentAccumulator {
    dim: usize,
    count: usize,
    sum: Vec<f64>,
    sum_outer: Matrix,
    frozen: bool,
}

/// Result of [`MomentAccumulator::finalize`].
#[derive(Debug, Clone)]
pub struct PcaFit {
    pub projection: Projection,
    /// Full descending eigenvalue spectrum of the population covariance.
    pub eigenvalues: Vec<f64>,
    pub samples: usize,
}

impl PcaFit {
    /// Fraction of total variance captured by the retained directions.
    pub fn captured_variance_fraction(&self) -> f64 {
        let total: f64 = self.eigenvalues.iter().map(|v| v.max(0.0)).sum();
        if total <= 0.0 {
            return 1.0;
        }
        let kept: f64 = self.eigenvalues[..self.projection.k()]
            .iter()
            .map(|v| v.max(0.0))
            .sum();
        kept / total
    }
}

impl MomentAccumulator {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            count: 0,
            sum: vec![0.0; dim],
            sum_outer: Matrix::zeros(dim, dim),
            frozen: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn accumulate(&mut self, feature: &[f64]) -> Result<()> {
        if self.frozen {
            return Err(Error::Frozen);
        }
        if feature.len() != self.dim {
            return Err(Error::shape(
                "accumulate",
                format!(
                    "feature of length {}, accumulator dimension {}",
                    feature.len(),
                    self.dim
                ),
            ));
        }
        if feature.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("PCA feature".into()));
        }
        self.count += 1;
        for (s, &x) in self.sum.iter_mut().zip(feature) {
            *s += x;
        }
        for i in 0..self.dim {
            for j in i..self.dim {
                let v = feature[i] * feature[j];
                self.sum_outer[(i, j)] += v;
                if i != j {
                    self.sum_outer[(j, i)] += v;
                }
            }
        }
        Ok(())
    }

    pub fn mean(&self) -> Vec<f64> {
        let n = self.count.max(1) as f64;
        self.sum.iter().map(|s| s / n).collect()
    }

    /// Population covariance `sum_outer/count − mean·meanᵀ`.
    pub fn covariance(&self) -> Matrix {
        let n = self.count.max(1) as f64;
        let mean = self.mean();
        let mut cov = Matrix::zeros(self.dim, self.dim);
        for i in 0..self.dim {
            for j in i..self.dim {
                let v = self.sum_outer[(i, j)] / n - mean[i] * mean[j];
                cov[(i, j)] = v;
                cov[(j, i)] = v;
            }
        }
        cov
    }

    /// Builds the projection from the top-k eigenvectors and freezes the
    /// accumulator. The stored mean and basis are rounded to `f32` so that
    /// a checkpointed projection reloads bit-identically.
    pub fn finalize(&mut self, k: usize) -> Result<PcaFit> {
        if self.frozen {
            return Err(Error::Frozen);
        }
        if k == 0 || k > self.dim {
            return Err(Error::InvalidArgument(format!(
                "k={k} must lie in [1, {}]",
                self.dim
            )));
        }
        if self.count < self.dim + 1 {
            return Err(Error::InsufficientSamples {
                have: self.count,
                need: self.dim + 1,
            });
        }
        let eigen = symmetric_eigen(&self.covariance())?;
        let mut basis = Matrix::zeros(self.dim, k);
        for c in 0..k {
            for r in 0..self.dim {
                basis[(r, c)] = eigen.vectors[(r, c)] as f32 as f64;
            }
        }
        let mean = self.mean().into_iter().map(|v| v as f32 as f64).collect();
        let projection = Projection::new(mean, basis)?;
        self.frozen = true;
        Ok(PcaFit {
            projection,
            eigenvalues: eigen.values,
            samples: self.count,
        })
    }
}

/// Convenience: fit a projection from a row-major N×D feature matrix.
pub fn fit_projection(features: &[f64], dim: usize, k: usize) -> Result<PcaFit> {
    if dim == 0 || !features.len().is_multiple_of(dim) {
        return Err(Error::shape(
            "fit_projection",
            format!("{} values do not form rows of width {dim}", features.len()),
        ));
    }
    let mut acc = MomentAccumulator::new(dim);
    for row in features.chunks(dim) {
        acc.accumulate(row)?;
    }
    acc.finalize(k)
}
