//! Second-order error weights for test-function expectations, and prior
//! handling (augmented map, coordinate-wise prior transform, post hoc
//! reweighting).

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, Continuous, ContinuousCDF, Normal, Uniform};

use crate::basechain::BaseChainEntry;
use crate::compactness::SamplingRegion;
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::geometry::{metric_inverse, AmbientGaussian, Embedding, Hessian, ManifoldModel};
use crate::upsampler::WeightedSample;

/// Denominators closer to zero than this flag the error weight.
pub const DENOMINATOR_TOL: f64 = 1e-12;

/// Inputs to one error weight: base entry (with Hessian), `α* = α_i - β*`,
/// `ϑ = θ - θ_i` and the entry compactness.
#[derive(Clone, Debug)]
pub struct ErrorWeightInputs<'a> {
    pub entry: &'a BaseChainEntry,
    pub alpha_star: DVector<f64>,
    pub vartheta: DVector<f64>,
    pub c: f64,
}

impl<'a> ErrorWeightInputs<'a> {
    pub fn new(entry: &'a BaseChainEntry, beta_star: &DVector<f64>, theta: &[f64]) -> Self {
        Self {
            entry,
            alpha_star: &entry.alpha - beta_star,
            vartheta: DVector::from_column_slice(theta) - &entry.theta,
            c: entry.compactness,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ErrorTerms {
    pub delta_m: f64,
    pub delta_i: f64,
}

/// `Δ_M` and `Δ_I` by matrix contractions. With `g = JᵀSα*`,
/// `A = Σ_ν (Sα*)_ν H_ν` and `h = H[ϑ, ϑ]`:
///
/// `Δ_M = gᵀΓ⁻¹Aϑ + 3/2 gᵀΓ⁻¹JᵀSh + 1/2 (Aϑ)ᵀΓ⁻¹(Aϑ) + ϑᵀAϑ`, `Δ_I = ½ϑᵀAϑ`.
pub fn error_terms(inputs: &ErrorWeightInputs<'_>, signature: Option<&[f64]>) -> Result<ErrorTerms> {
    let e = inputs.entry;
    let h = e.hessian.as_ref().ok_or(Error::NotAvailable("hessian"))?;
    let g = e.geometry.as_ref().ok_or_else(|| Error::SingularMetric {
        theta: e.theta.iter().copied().collect(),
    })?;
    let (d, s) = e.jacobian.shape();
    if inputs.alpha_star.len() != d || inputs.vartheta.len() != s {
        return Err(Error::shape("error-weight inputs do not match the entry"));
    }
    let signed = |v: &DVector<f64>| match signature {
        None => v.clone(),
        Some(sig) => v.component_mul(&DVector::from_column_slice(sig)),
    };
    let gamma_inv = metric_inverse(&g.metric)?;
    let sa = signed(&inputs.alpha_star);
    let grad = e.jacobian.tr_mul(&sa);
    let a = h.contract_ambient(&sa);
    let v = &inputs.vartheta;
    let av = &a * v;
    let hvv = signed(&h.quadratic(v.as_slice()));
    let lifted = &gamma_inv * &grad;
    let vav = v.dot(&av);
    let delta_m = lifted.dot(&av)
        + 1.5 * lifted.dot(&e.jacobian.tr_mul(&hvv))
        + 0.5 * av.dot(&(&gamma_inv * &av))
        + vav;
    Ok(ErrorTerms {
        delta_m,
        delta_i: 0.5 * vav,
    })
}

/// `Δw = Δ_M / (Δ_M + (1+c)(1-Δ_I)) · w`.
///
/// Returns `None` when the denominator is within [`DENOMINATOR_TOL`] of
/// zero. Infinitely compact or flagged entries give `Δw = 0`.
pub fn error_weight(inputs: &ErrorWeightInputs<'_>, w: f64, signature: Option<&[f64]>) -> Result<Option<f64>> {
    if inputs.entry.is_flagged() || inputs.c.is_infinite() {
        return Ok(Some(0.0));
    }
    let t = error_terms(inputs, signature)?;
    let denom = t.delta_m + (1.0 + inputs.c) * (1.0 - t.delta_i);
    if !denom.is_finite() || denom.abs() < DENOMINATOR_TOL {
        return Ok(None);
    }
    Ok(Some(t.delta_m / denom * w))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ErrorWeights {
    /// One per sample; `None` where the weight was flagged.
    pub values: Vec<Option<f64>>,
    pub flagged: usize,
}

/// Error weights for every sample, in sample order.
pub fn error_weights(
    base: &[BaseChainEntry],
    samples: &[WeightedSample],
    beta_star: &DVector<f64>,
    signature: Option<&[f64]>,
    execution: Execution,
) -> Result<ErrorWeights> {
    if base.iter().any(|e| !e.is_flagged() && e.hessian.is_none()) {
        return Err(Error::NotAvailable("hessian"));
    }
    let values: Vec<Option<f64>> = exec::map_indexed(execution, samples, |_, smp| {
        let entry = base
            .get(smp.base_index)
            .ok_or_else(|| Error::invalid(format!("sample refers to base index {}", smp.base_index)))?;
        if smp.boundary_replaced {
            return Ok(Some(0.0));
        }
        error_weight(&ErrorWeightInputs::new(entry, beta_star, &smp.theta), smp.weight, signature)
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let flagged = values.iter().filter(|v| v.is_none()).count();
    Ok(ErrorWeights { values, flagged })
}

/// Weighted expectation and its second-order systematic error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpectationError {
    #[serde(rename = "E_tau_w")]
    pub e_tau_w: f64,
    #[serde(rename = "Delta_E")]
    pub delta_e: f64,
    pub flagged: usize,
}

/// `E_q[τw] = Στw/Σw` and `ΔE[τ] = ΣτΔw/Σw`. Flagged samples are left out
/// of the error sum.
pub fn expectation_error(
    samples: &[WeightedSample],
    error_weights: &ErrorWeights,
    tau: impl Fn(&[f64]) -> f64,
) -> Result<ExpectationError> {
    if samples.len() != error_weights.values.len() {
        return Err(Error::shape("samples and error weights differ in length"));
    }
    let total: f64 = samples.iter().map(|s| s.weight).sum();
    if !(total > 0.0) {
        return Err(Error::invalid("total sample weight must be positive"));
    }
    let mut num = 0.0;
    let mut err = 0.0;
    for (smp, dw) in samples.iter().zip(&error_weights.values) {
        let t = tau(&smp.theta);
        num += t * smp.weight;
        if let Some(dw) = dw {
            err += t * dw;
        }
    }
    Ok(ExpectationError {
        e_tau_w: num / total,
        delta_e: err / total,
        flagged: error_weights.flagged,
    })
}

/// One-dimensional prior marginal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum Univariate {
    Normal { mean: f64, sd: f64 },
    Uniform { lower: f64, upper: f64 },
    Beta { a: f64, b: f64 },
}

enum Dist {
    Normal(Normal),
    Uniform(Uniform),
    Beta(Beta),
}

impl Univariate {
    fn dist(&self) -> Result<Dist> {
        let bad = |e: statrs::distribution::NormalError| Error::invalid(format!("prior: {e}"));
        Ok(match *self {
            Univariate::Normal { mean, sd } => Dist::Normal(Normal::new(mean, sd).map_err(bad)?),
            Univariate::Uniform { lower, upper } => Dist::Uniform(
                Uniform::new(lower, upper).map_err(|e| Error::invalid(format!("prior: {e}")))?,
            ),
            Univariate::Beta { a, b } => {
                Dist::Beta(Beta::new(a, b).map_err(|e| Error::invalid(format!("prior: {e}")))?)
            }
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.dist().map(|_| ())
    }

    pub fn pdf(&self, x: f64) -> f64 {
        match self.dist() {
            Ok(Dist::Normal(d)) => d.pdf(x),
            Ok(Dist::Uniform(d)) => d.pdf(x),
            Ok(Dist::Beta(d)) => d.pdf(x),
            Err(_) => f64::NAN,
        }
    }

    pub fn quantile(&self, u: f64) -> f64 {
        match self.dist() {
            Ok(Dist::Normal(d)) => d.inverse_cdf(u),
            Ok(Dist::Uniform(d)) => d.inverse_cdf(u),
            Ok(Dist::Beta(d)) => d.inverse_cdf(u),
            Err(_) => f64::NAN,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PriorSpec {
    #[default]
    Uniform,
    Gaussian {
        mean: Vec<f64>,
        /// Row-major s×s covariance.
        cov: Vec<Vec<f64>>,
    },
    Independent1d {
        marginals: Vec<Univariate>,
    },
}

/// Evaluable (unnormalized) prior density.
pub struct PriorDensity {
    kind: PriorKind,
}

enum PriorKind {
    Uniform,
    Gaussian { mean: DVector<f64>, precision: DMatrix<f64> },
    Independent(Vec<Univariate>),
}

impl PriorSpec {
    pub fn density(&self, s: usize) -> Result<PriorDensity> {
        let kind = match self {
            PriorSpec::Uniform => PriorKind::Uniform,
            PriorSpec::Gaussian { mean, cov } => {
                let sigma = square_matrix(cov, s)?;
                if mean.len() != s {
                    return Err(Error::shape("prior mean has the wrong dimension"));
                }
                let chol = sigma
                    .cholesky()
                    .ok_or_else(|| Error::Factorization("prior covariance is not positive-definite".into()))?;
                PriorKind::Gaussian {
                    mean: DVector::from_column_slice(mean),
                    precision: chol.inverse(),
                }
            }
            PriorSpec::Independent1d { marginals } => {
                if marginals.len() != s {
                    return Err(Error::shape("one prior marginal per parameter is required"));
                }
                for m in marginals {
                    m.validate()?;
                }
                PriorKind::Independent(marginals.clone())
            }
        };
        Ok(PriorDensity { kind })
    }
}

impl PriorDensity {
    pub fn eval(&self, theta: &[f64]) -> f64 {
        match &self.kind {
            PriorKind::Uniform => 1.0,
            PriorKind::Gaussian { mean, precision } => {
                let v = DVector::from_column_slice(theta) - mean;
                (-0.5 * v.dot(&(precision * &v))).exp()
            }
            PriorKind::Independent(ms) => ms.iter().zip(theta).map(|(m, x)| m.pdf(*x)).product(),
        }
    }
}

fn square_matrix(rows: &[Vec<f64>], s: usize) -> Result<DMatrix<f64>> {
    if rows.len() != s || rows.iter().any(|r| r.len() != s) {
        return Err(Error::shape(format!("expected an {s}x{s} matrix")));
    }
    Ok(DMatrix::from_fn(s, s, |i, j| rows[i][j]))
}

/// Post hoc prior weights `w_π = π(θ)w / Σπ(θ)w`, normalized to sum 1.
pub fn prior_reweight(samples: &[WeightedSample], prior: &PriorSpec) -> Result<Vec<f64>> {
    let s = samples
        .first()
        .map(|x| x.theta.len())
        .ok_or_else(|| Error::invalid("no samples to reweight"))?;
    let density = prior.density(s)?;
    let raw: Vec<f64> = samples.iter().map(|x| density.eval(&x.theta) * x.weight).collect();
    let total: f64 = raw.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::DegeneratePrior);
    }
    Ok(raw.into_iter().map(|x| x / total).collect())
}

struct Augmented {
    inner: ManifoldModel,
}

impl Embedding for Augmented {
    fn param_dim(&self) -> usize {
        self.inner.param_dim()
    }
    fn ambient_dim(&self) -> usize {
        self.inner.ambient_dim() + self.inner.param_dim()
    }
    fn map(&self, theta: &[f64]) -> Result<DVector<f64>> {
        let a = self.inner.map(theta)?;
        Ok(DVector::from_iterator(
            self.ambient_dim(),
            a.iter().copied().chain(theta.iter().copied()),
        ))
    }
    fn jacobian(&self, theta: &[f64]) -> Option<DMatrix<f64>> {
        let j = self.inner.jacobian(theta).ok()?;
        let (d, s) = j.shape();
        let mut out = DMatrix::zeros(d + s, s);
        out.view_mut((0, 0), (d, s)).copy_from(&j);
        out.view_mut((d, 0), (s, s)).fill_with_identity();
        Some(out)
    }
    fn hessian(&self, theta: &[f64]) -> Option<Hessian> {
        let h = self.inner.hessian(theta).ok()??;
        let (d, s) = (h.ambient_dim(), h.param_dim());
        Some(Hessian::from_fn(d + s, s, |nu, a, b| if nu < d { h.get(nu, a, b) } else { 0.0 }))
    }
    fn has_hessian(&self) -> bool {
        self.inner.has_hessian()
    }
}

/// Gaussian prior `N(θ̂, σ̂)` folded into the ambient Gaussian:
/// `α ⊕ θ`, `β* ⊕ θ̂`, `blockdiag(Σ, σ̂)`.
pub fn augment_map(
    model: &ManifoldModel,
    gaussian: &AmbientGaussian,
    theta_hat: &[f64],
    sigma_hat: &DMatrix<f64>,
) -> Result<(ManifoldModel, AmbientGaussian)> {
    let (s, d) = (model.param_dim(), model.ambient_dim());
    if theta_hat.len() != s || sigma_hat.shape() != (s, s) || gaussian.dim() != d {
        return Err(Error::shape("augment_map: inconsistent dimensions"));
    }
    if sigma_hat.clone().cholesky().is_none() {
        return Err(Error::Factorization("prior covariance is not positive-definite".into()));
    }
    let mut aug = ManifoldModel::new(Augmented { inner: model.clone() })?;
    if let Some(sig) = model.signature() {
        aug = aug.with_signature(sig.iter().copied().chain(std::iter::repeat_n(1.0, s)).collect())?;
    }
    let beta = DVector::from_iterator(
        d + s,
        gaussian.beta_star.iter().copied().chain(theta_hat.iter().copied()),
    );
    let mut sigma = DMatrix::zeros(d + s, d + s);
    sigma.view_mut((0, 0), (d, d)).copy_from(&gaussian.sigma);
    sigma.view_mut((d, d), (s, s)).copy_from(sigma_hat);
    let g = if gaussian.is_whitened() && sigma_hat == &DMatrix::identity(s, s) {
        AmbientGaussian::identity(beta)
    } else {
        AmbientGaussian::new(beta, sigma)?
    };
    Ok((aug, g))
}

/// Margin kept from the unit-cube faces in transformed coordinates.
pub const PRIOR_CUBE_MARGIN: f64 = 1e-6;

struct PriorTransformed {
    inner: ManifoldModel,
    marginals: Arc<Vec<Univariate>>,
}

impl PriorTransformed {
    fn to_theta(&self, u: &[f64]) -> Vec<f64> {
        self.marginals.iter().zip(u).map(|(m, x)| m.quantile(*x)).collect()
    }
}

impl Embedding for PriorTransformed {
    fn param_dim(&self) -> usize {
        self.inner.param_dim()
    }
    fn ambient_dim(&self) -> usize {
        self.inner.ambient_dim()
    }
    fn map(&self, u: &[f64]) -> Result<DVector<f64>> {
        self.inner.map(&self.to_theta(u))
    }
    fn jacobian(&self, u: &[f64]) -> Option<DMatrix<f64>> {
        let theta = self.to_theta(u);
        let mut j = self.inner.jacobian(&theta).ok()?;
        for (mu, (m, t)) in self.marginals.iter().zip(&theta).enumerate() {
            let dq = 1.0 / m.pdf(*t);
            j.column_mut(mu).scale_mut(dq);
        }
        Some(j)
    }
}

/// Reparametrizes through coordinate-wise prior quantiles, `θ = Q(u)` with
/// `u` in the unit cube, so the uniform-region target in `u` corresponds to
/// `f(α(θ))π(θ)`. The returned model has no Hessian.
pub fn prior_transform(model: &ManifoldModel, marginals: &[Univariate]) -> Result<(ManifoldModel, SamplingRegion)> {
    let s = model.param_dim();
    if marginals.len() != s {
        return Err(Error::shape("one prior marginal per parameter is required"));
    }
    for m in marginals {
        m.validate()?;
    }
    let mut out = ManifoldModel::new(PriorTransformed {
        inner: model.clone(),
        marginals: Arc::new(marginals.to_vec()),
    })?;
    if let Some(sig) = model.signature() {
        out = out.with_signature(sig.to_vec())?;
    }
    let region = SamplingRegion::new(vec![PRIOR_CUBE_MARGIN; s], vec![1.0 - PRIOR_CUBE_MARGIN; s])?;
    Ok((out, region))
}

/// Maps transformed-coordinate samples back to parameter space.
pub fn prior_inverse_transform(samples: &mut [WeightedSample], marginals: &[Univariate]) {
    for smp in samples {
        for (x, m) in smp.theta.iter_mut().zip(marginals) {
            *x = m.quantile(*x);
        }
    }
}
