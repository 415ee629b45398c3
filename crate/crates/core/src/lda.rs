//! Two-class linear discriminant analysis with a nearest-projected-mean rule.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::autodiff::AutodiffError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LdaError {
    #[error("LDA needs samples of both classes")]
    SingleClass,
    #[error("within-class scatter is singular")]
    SingularScatter,
    #[error("class means coincide; no discriminant direction")]
    CoincidentMeans,
    #[error("model is not fitted")]
    Unfitted,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("loss ratio must lie in [0, 1], got {0}")]
    BadRatio(f64),
}

pub type Result<T> = std::result::Result<T, LdaError>;

#[derive(Clone, Debug, PartialEq)]
pub struct LdaModel {
    /// Unit-norm projection; oriented so that `mu1 > mu0`.
    pub w: Vec<f64>,
    pub mu0: f64,
    pub mu1: f64,
    pub fitted: bool,
}

impl LdaModel {
    pub fn unfitted(dim: usize) -> Self {
        Self {
            w: vec![0.0; dim],
            mu0: 0.0,
            mu1: 0.0,
            fitted: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.w.len()
    }

    /// Closed-form fit `w ∝ S_w⁻¹ (m₁ − m₀)` on row-major `N×d` features.
    pub fn fit(features: &[f64], dim: usize, labels: &[u8]) -> Result<Self> {
        if dim == 0 || features.len() != dim * labels.len() {
            return Err(LdaError::Shape(format!(
                "{} values for {} rows of width {dim}",
                features.len(),
                labels.len()
            )));
        }
        let mut means = [DVector::<f64>::zeros(dim), DVector::<f64>::zeros(dim)];
        let mut counts = [0usize; 2];
        for (row, l) in features.chunks(dim).zip(labels) {
            let k = (*l != 0) as usize;
            means[k] += DVector::from_column_slice(row);
            counts[k] += 1;
        }
        if counts[0] == 0 || counts[1] == 0 {
            return Err(LdaError::SingleClass);
        }
        means[0] /= counts[0] as f64;
        means[1] /= counts[1] as f64;
        let mut scatter = DMatrix::<f64>::zeros(dim, dim);
        for (row, l) in features.chunks(dim).zip(labels) {
            let d = DVector::from_column_slice(row) - &means[(*l != 0) as usize];
            scatter += &d * d.transpose();
        }
        // With no within-class spread any ridge gives w ∝ m₁ − m₀.
        let trace = scatter.trace();
        let ridge = if trace > 0.0 {
            1e-6 * trace / dim as f64
        } else {
            1.0
        };
        for i in 0..dim {
            scatter[(i, i)] += ridge;
        }
        let diff = &means[1] - &means[0];
        if diff.iter().all(|v| *v == 0.0) {
            return Err(LdaError::CoincidentMeans);
        }
        let chol = scatter.cholesky().ok_or(LdaError::SingularScatter)?;
        let mut w = chol.solve(&diff);
        let norm = w.norm();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(LdaError::SingularScatter);
        }
        w /= norm;
        if w.dot(&diff) < 0.0 {
            w.neg_mut();
        }
        let mu0 = w.dot(&means[0]);
        let mu1 = w.dot(&means[1]);
        if mu0 == mu1 {
            return Err(LdaError::CoincidentMeans);
        }
        Ok(Self {
            w: w.as_slice().to_vec(),
            mu0,
            mu1,
            fitted: true,
        })
    }

    /// Projections `w·x` of row-major features.
    pub fn project(&self, features: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim();
        if d == 0 || features.len() % d != 0 {
            return Err(LdaError::Shape(format!(
                "{} values for width {d}",
                features.len()
            )));
        }
        Ok(features
            .chunks(d)
            .map(|row| row.iter().zip(&self.w).map(|(a, b)| a * b).sum())
            .collect())
    }

    /// Nearest projected class mean; ties go to class 0.
    pub fn predict(&self, features: &[f64]) -> Result<Vec<u8>> {
        if !self.fitted {
            return Err(LdaError::Unfitted);
        }
        Ok(self
            .project(features)?
            .into_iter()
            .map(|g| u8::from((g - self.mu1).abs() < (g - self.mu0).abs()))
            .collect())
    }
}

/// `(σ²₀ + σ²₁) / (μ₀ − μ₁)²` of projected values.
pub fn fisher_criterion(projected: &[f64], labels: &[u8]) -> Result<f64> {
    if projected.len() != labels.len() {
        return Err(LdaError::Shape(format!(
            "{} values, {} labels",
            projected.len(),
            labels.len()
        )));
    }
    crate::autodiff::fisher_value(projected, labels).map_err(|e| match e {
        AutodiffError::CoincidentMeans => LdaError::CoincidentMeans,
        _ => LdaError::SingleClass,
    })
}

/// `r·L + (1 − r)·J`.
pub fn combined_loss(csp_loss: f64, fisher: f64, ratio: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(LdaError::BadRatio(ratio));
    }
    Ok(ratio * csp_loss + (1.0 - ratio) * fisher)
}
