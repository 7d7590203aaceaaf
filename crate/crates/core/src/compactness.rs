//! Per-base-point compactness `c_i`: the inverse variance of the ambient
//! mini-distribution seeded at that point.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box `[lower, upper]` in parameter space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingRegion {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl SamplingRegion {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(Error::shape("region bounds must be non-empty and of equal length"));
        }
        if lower
            .iter()
            .zip(&upper)
            .any(|(l, u)| !(l.is_finite() && u.is_finite() && u > l))
        {
            return Err(Error::invalid("region needs finite bounds with upper > lower"));
        }
        Ok(Self { lower, upper })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn half_lengths(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| 0.5 * (u - l))
            .collect()
    }

    pub fn centroid(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| 0.5 * (u + l))
            .collect()
    }

    /// Closed-box membership.
    pub fn contains(&self, theta: &[f64]) -> bool {
        theta.len() == self.dim()
            && theta
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(t, (l, u))| *t >= *l && *t <= *u)
    }

    /// `L = diag(ℓ_1⁻², …, ℓ_s⁻²)`.
    pub fn box_matrix(&self) -> DMatrix<f64> {
        let inv: Vec<f64> = self.half_lengths().iter().map(|l| 1.0 / (l * l)).collect();
        DMatrix::from_diagonal(&nalgebra::DVector::from_vec(inv))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompactnessMode {
    #[default]
    MetricAndCurvature,
    MetricOnly,
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompactnessConfig {
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub mode: CompactnessMode,
    #[serde(default = "default_constant")]
    pub constant_c: f64,
}

fn default_epsilon() -> f64 {
    0.1
}

fn default_constant() -> f64 {
    1.0
}

impl Default for CompactnessConfig {
    fn default() -> Self {
        Self {
            epsilon: default_epsilon(),
            mode: CompactnessMode::default(),
            constant_c: default_constant(),
        }
    }
}

impl CompactnessConfig {
    pub fn with_epsilon(epsilon: f64) -> Self {
        Self {
            epsilon,
            ..Self::default()
        }
    }

    pub fn constant(c: f64) -> Self {
        Self {
            mode: CompactnessMode::Constant,
            constant_c: c,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.constant_c > 0.0) {
            return Err(Error::invalid(format!(
                "constant_c must be positive, got {}",
                self.constant_c
            )));
        }
        Ok(())
    }
}

/// Largest eigenvalue λ² of the pushed-forward box matrix `(J⁺)ᵀ L J⁺`.
///
/// That d×d matrix has rank ≤ s; its nonzero eigenvalues are the squared
/// singular values of `L^{1/2} J⁺`, obtained here from the s×s Gram matrix.
pub fn region_scale(jplus: &DMatrix<f64>, region: &SamplingRegion) -> Result<f64> {
    if jplus.nrows() != region.dim() {
        return Err(Error::shape("pseudoinverse rows differ from region dimension"));
    }
    if jplus.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("pseudoinverse has non-finite entries"));
    }
    let mut scaled = jplus.clone();
    for (mu, l) in region.half_lengths().iter().enumerate() {
        scaled.row_mut(mu).scale_mut(1.0 / l);
    }
    let gram = &scaled * scaled.transpose();
    Ok(SymmetricEigen::new(gram).eigenvalues.max().max(0.0))
}

/// Scalar compactness `c = max{λ², κ}/ε` (or its metric-only and constant
/// variants). A missing κ falls back to the metric term.
pub fn compactness(lambda_sq: f64, kappa: Option<f64>, cfg: &CompactnessConfig) -> Result<f64> {
    let c = match cfg.mode {
        CompactnessMode::Constant => cfg.constant_c,
        CompactnessMode::MetricOnly => lambda_sq.abs() / cfg.epsilon,
        CompactnessMode::MetricAndCurvature => match kappa {
            Some(k) => lambda_sq.abs().max(k.abs()) / cfg.epsilon,
            None => lambda_sq.abs() / cfg.epsilon,
        },
    };
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::DegenerateCompactness(c));
    }
    Ok(c)
}
