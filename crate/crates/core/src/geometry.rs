//! Differential-geometry kernels for a parametrized submanifold of ℝ^d.
//!
//! A [`ManifoldModel`] wraps an embedding θ ∈ ℝ^s ↦ α(θ) ∈ ℝ^d together with
//! its Jacobian and (optionally) its Hessian tensor. The free functions here
//! compute the quantities the upsampler needs at a single base point: the
//! pullback metric `JᵀSJ`, the left pseudoinverse `J⁺ = F⁻¹JᵀS`, tangent
//! projections, the matrix of normal-curvature norms and its largest scale.
//!
//! `S` is an optional diagonal ±1 ambient signature. It is the identity for
//! every ordinary model; a negative entry marks an ambient coordinate whose
//! square enters the log-density with the opposite sign.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative (and, for the smallest eigenvalue, absolute) tolerance below
/// which a pullback metric is treated as singular.
pub const RANK_TOL: f64 = 1e-12;

/// Third-order tensor `H[ν][μ][μ']` of second partial derivatives.
#[derive(Clone, Debug, PartialEq)]
pub struct Hessian {
    ambient: usize,
    params: usize,
    data: Vec<f64>,
}

impl Hessian {
    pub fn zeros(ambient: usize, params: usize) -> Self {
        Self {
            ambient,
            params,
            data: vec![0.0; ambient * params * params],
        }
    }

    /// Builds a tensor from `f(ν, μ, μ')`, evaluated for μ ≤ μ' and mirrored.
    pub fn from_fn(ambient: usize, params: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut h = Self::zeros(ambient, params);
        for nu in 0..ambient {
            for mu in 0..params {
                for mu2 in mu..params {
                    h.set(nu, mu, mu2, f(nu, mu, mu2));
                }
            }
        }
        h
    }

    pub fn from_vec(ambient: usize, params: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != ambient * params * params {
            return Err(Error::shape(format!(
                "hessian buffer has {} entries, expected {}",
                data.len(),
                ambient * params * params
            )));
        }
        Ok(Self { ambient, params, data })
    }

    pub fn ambient_dim(&self) -> usize {
        self.ambient
    }

    pub fn param_dim(&self) -> usize {
        self.params
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    fn idx(&self, nu: usize, mu: usize, mu2: usize) -> usize {
        (nu * self.params + mu) * self.params + mu2
    }

    #[inline]
    pub fn get(&self, nu: usize, mu: usize, mu2: usize) -> f64 {
        self.data[self.idx(nu, mu, mu2)]
    }

    /// Sets both `(μ, μ')` and `(μ', μ)`.
    pub fn set(&mut self, nu: usize, mu: usize, mu2: usize, value: f64) {
        let a = self.idx(nu, mu, mu2);
        let b = self.idx(nu, mu2, mu);
        self.data[a] = value;
        self.data[b] = value;
    }

    /// The ambient vector `∂_μ ∂_μ' α`.
    pub fn column(&self, mu: usize, mu2: usize) -> DVector<f64> {
        DVector::from_fn(self.ambient, |nu, _| self.get(nu, mu, mu2))
    }

    /// `Σ_ν v_ν H[ν]`, an s×s matrix.
    pub fn contract_ambient(&self, v: &DVector<f64>) -> DMatrix<f64> {
        let s = self.params;
        let mut out = DMatrix::zeros(s, s);
        for nu in 0..self.ambient {
            let vn = v[nu];
            if vn == 0.0 {
                continue;
            }
            for mu in 0..s {
                for mu2 in 0..s {
                    out[(mu, mu2)] += vn * self.get(nu, mu, mu2);
                }
            }
        }
        out
    }

    /// `H[x, x]`, the ambient vector `Σ_{μμ'} H[ν][μ][μ'] x_μ x_μ'`.
    pub fn quadratic(&self, x: &[f64]) -> DVector<f64> {
        DVector::from_fn(self.ambient, |nu, _| {
            let mut acc = 0.0;
            for mu in 0..self.params {
                for mu2 in 0..self.params {
                    acc += self.get(nu, mu, mu2) * x[mu] * x[mu2];
                }
            }
            acc
        })
    }

    /// Applies a linear map on the ambient index: `H'[k] = Σ_ν A[k,ν] H[ν]`.
    pub fn left_mul(&self, a: &DMatrix<f64>) -> Hessian {
        let s = self.params;
        let mut out = Hessian::zeros(a.nrows(), s);
        for k in 0..a.nrows() {
            for nu in 0..self.ambient {
                let akn = a[(k, nu)];
                if akn == 0.0 {
                    continue;
                }
                for mu in 0..s {
                    for mu2 in 0..s {
                        let i = out.idx(k, mu, mu2);
                        out.data[i] += akn * self.get(nu, mu, mu2);
                    }
                }
            }
        }
        out
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&x| x == 0.0)
    }
}

/// A smooth map from parameter space into ambient Euclidean space.
///
/// Only `map` is required. Models without an analytic Jacobian get central
/// finite differences from [`ManifoldModel`]; a missing Hessian stays missing
/// unless the model opts in with [`ManifoldModel::with_fd_hessian`].
pub trait Embedding: Send + Sync {
    fn param_dim(&self) -> usize;
    fn ambient_dim(&self) -> usize;
    fn map(&self, theta: &[f64]) -> Result<DVector<f64>>;

    fn jacobian(&self, _theta: &[f64]) -> Option<DMatrix<f64>> {
        None
    }

    fn hessian(&self, _theta: &[f64]) -> Option<Hessian> {
        None
    }

    fn has_hessian(&self) -> bool {
        false
    }
}

#[derive(Debug, Default)]
pub struct CallCounts {
    map: AtomicU64,
    jacobian: AtomicU64,
    hessian: AtomicU64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct CallSnapshot {
    pub map: u64,
    pub jacobian: u64,
    pub hessian: u64,
}

impl CallSnapshot {
    pub fn since(self, earlier: CallSnapshot) -> CallSnapshot {
        CallSnapshot {
            map: self.map - earlier.map,
            jacobian: self.jacobian - earlier.jacobian,
            hessian: self.hessian - earlier.hessian,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum HessianSource {
    Analytic,
    FiniteDifference,
    Unavailable,
}

/// An embedding plus signature, derivative fallbacks and call accounting.
///
/// Cloning is cheap and clones share the same call counters.
#[derive(Clone)]
pub struct ManifoldModel {
    embedding: Arc<dyn Embedding>,
    signature: Option<Vec<f64>>,
    hessian_source: HessianSource,
    counts: Arc<CallCounts>,
}

impl fmt::Debug for ManifoldModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ManifoldModel")
            .field("s", &self.param_dim())
            .field("d", &self.ambient_dim())
            .field("signature", &self.signature)
            .field("hessian", &self.hessian_source)
            .finish()
    }
}

impl ManifoldModel {
    pub fn new(embedding: impl Embedding + 'static) -> Result<Self> {
        Self::from_arc(Arc::new(embedding))
    }

    pub fn from_arc(embedding: Arc<dyn Embedding>) -> Result<Self> {
        let (s, d) = (embedding.param_dim(), embedding.ambient_dim());
        if s == 0 || d <= s {
            return Err(Error::invalid(format!("need d > s >= 1, got s = {s}, d = {d}")));
        }
        let hessian_source = if embedding.has_hessian() {
            HessianSource::Analytic
        } else {
            HessianSource::Unavailable
        };
        Ok(Self {
            embedding,
            signature: None,
            hessian_source,
            counts: Arc::new(CallCounts::default()),
        })
    }

    pub fn with_signature(mut self, signature: Vec<f64>) -> Result<Self> {
        if signature.len() != self.ambient_dim() {
            return Err(Error::shape(format!(
                "signature has length {}, ambient dimension is {}",
                signature.len(),
                self.ambient_dim()
            )));
        }
        if signature.iter().any(|&x| x != 1.0 && x != -1.0) {
            return Err(Error::invalid("signature entries must be +1 or -1"));
        }
        self.signature = if signature.iter().all(|&x| x == 1.0) {
            None
        } else {
            Some(signature)
        };
        Ok(self)
    }

    /// Fills in a missing Hessian with central differences of the Jacobian.
    pub fn with_fd_hessian(mut self) -> Self {
        if self.hessian_source == HessianSource::Unavailable {
            self.hessian_source = HessianSource::FiniteDifference;
        }
        self
    }

    pub fn param_dim(&self) -> usize {
        self.embedding.param_dim()
    }

    pub fn ambient_dim(&self) -> usize {
        self.embedding.ambient_dim()
    }

    pub fn signature(&self) -> Option<&[f64]> {
        self.signature.as_deref()
    }

    pub fn has_hessian(&self) -> bool {
        self.hessian_source != HessianSource::Unavailable
    }

    pub fn calls(&self) -> CallSnapshot {
        CallSnapshot {
            map: self.counts.map.load(Ordering::Relaxed),
            jacobian: self.counts.jacobian.load(Ordering::Relaxed),
            hessian: self.counts.hessian.load(Ordering::Relaxed),
        }
    }

    fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.param_dim() {
            return Err(Error::shape(format!(
                "theta has length {}, model has s = {}",
                theta.len(),
                self.param_dim()
            )));
        }
        Ok(())
    }

    pub fn map(&self, theta: &[f64]) -> Result<DVector<f64>> {
        self.check_theta(theta)?;
        self.counts.map.fetch_add(1, Ordering::Relaxed);
        self.embedding.map(theta)
    }

    pub fn jacobian(&self, theta: &[f64]) -> Result<DMatrix<f64>> {
        self.check_theta(theta)?;
        self.counts.jacobian.fetch_add(1, Ordering::Relaxed);
        match self.embedding.jacobian(theta) {
            Some(j) => Ok(j),
            None => fd_jacobian(|t| self.embedding.map(t), theta, &default_steps(theta)),
        }
    }

    pub fn hessian(&self, theta: &[f64]) -> Result<Option<Hessian>> {
        self.check_theta(theta)?;
        match self.hessian_source {
            HessianSource::Unavailable => Ok(None),
            HessianSource::Analytic => {
                self.counts.hessian.fetch_add(1, Ordering::Relaxed);
                Ok(self.embedding.hessian(theta))
            }
            HessianSource::FiniteDifference => {
                self.counts.hessian.fetch_add(1, Ordering::Relaxed);
                let jac = |t: &[f64]| match self.embedding.jacobian(t) {
                    Some(j) => Ok(j),
                    None => fd_jacobian(|u| self.embedding.map(u), t, &default_steps(t)),
                };
                fd_hessian(jac, theta, &default_steps(theta)).map(Some)
            }
        }
    }

    /// Evaluates the unwhitened-signature log-density `-½ (α-β*)ᵀ S Σ⁻¹ (α-β*)`.
    ///
    /// For a general Σ the signature is applied in whitened coordinates.
    pub fn log_density(&self, gaussian: &AmbientGaussian, theta: &[f64]) -> Result<f64> {
        let alpha = self.map(theta)?;
        Ok(log_density_at(&alpha, gaussian, self.signature()))
    }
}

pub(crate) fn log_density_at(alpha: &DVector<f64>, gaussian: &AmbientGaussian, signature: Option<&[f64]>) -> f64 {
    let v = alpha - &gaussian.beta_star;
    let r = if gaussian.whitened { v } else { &gaussian.whitener * v };
    let q: f64 = match signature {
        None => r.norm_squared(),
        Some(sig) => r.iter().zip(sig).map(|(x, s)| s * x * x).sum(),
    };
    -0.5 * q
}

/// Boxed-closure embedding for user-supplied models.
pub struct FnEmbedding {
    s: usize,
    d: usize,
    map: Box<dyn Fn(&[f64]) -> DVector<f64> + Send + Sync>,
    jacobian: Option<Box<dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync>>,
    hessian: Option<Box<dyn Fn(&[f64]) -> Hessian + Send + Sync>>,
}

impl FnEmbedding {
    pub fn new(s: usize, d: usize, map: impl Fn(&[f64]) -> DVector<f64> + Send + Sync + 'static) -> Self {
        Self {
            s,
            d,
            map: Box::new(map),
            jacobian: None,
            hessian: None,
        }
    }

    pub fn with_jacobian(mut self, f: impl Fn(&[f64]) -> DMatrix<f64> + Send + Sync + 'static) -> Self {
        self.jacobian = Some(Box::new(f));
        self
    }

    pub fn with_hessian(mut self, f: impl Fn(&[f64]) -> Hessian + Send + Sync + 'static) -> Self {
        self.hessian = Some(Box::new(f));
        self
    }
}

impl Embedding for FnEmbedding {
    fn param_dim(&self) -> usize {
        self.s
    }
    fn ambient_dim(&self) -> usize {
        self.d
    }
    fn map(&self, theta: &[f64]) -> Result<DVector<f64>> {
        Ok((self.map)(theta))
    }
    fn jacobian(&self, theta: &[f64]) -> Option<DMatrix<f64>> {
        self.jacobian.as_ref().map(|f| f(theta))
    }
    fn hessian(&self, theta: &[f64]) -> Option<Hessian> {
        self.hessian.as_ref().map(|f| f(theta))
    }
    fn has_hessian(&self) -> bool {
        self.hessian.is_some()
    }
}

/// Ambient Gaussian `N(β*, Σ)` with a whitening factor `W`, `WᵀW = Σ⁻¹`.
#[derive(Clone, Debug)]
pub struct AmbientGaussian {
    pub beta_star: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub whitener: DMatrix<f64>,
    pub sigma_min_sq: f64,
    whitened: bool,
}

impl AmbientGaussian {
    /// Unit-covariance Gaussian centred on `beta_star`.
    pub fn identity(beta_star: DVector<f64>) -> Self {
        let d = beta_star.len();
        Self {
            beta_star,
            sigma: DMatrix::identity(d, d),
            whitener: DMatrix::identity(d, d),
            sigma_min_sq: 1.0,
            whitened: true,
        }
    }

    /// General covariance. `W = L⁻¹` for the Cholesky factor `Σ = LLᵀ`.
    pub fn new(beta_star: DVector<f64>, sigma: DMatrix<f64>) -> Result<Self> {
        let d = beta_star.len();
        if sigma.nrows() != d || sigma.ncols() != d {
            return Err(Error::shape(format!(
                "covariance is {}x{}, mean has length {d}",
                sigma.nrows(),
                sigma.ncols()
            )));
        }
        if !all_finite(&sigma) || (&sigma - sigma.transpose()).amax() > 1e-12 * sigma.amax().max(1.0) {
            return Err(Error::Factorization("covariance must be finite and symmetric".into()));
        }
        let chol = sigma
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Factorization("covariance is not positive-definite".into()))?;
        let l = chol.l();
        let whitener = l
            .solve_lower_triangular(&DMatrix::identity(d, d))
            .ok_or_else(|| Error::Factorization("singular Cholesky factor".into()))?;
        let sigma_min_sq = SymmetricEigen::new(sigma.clone()).eigenvalues.min();
        if sigma_min_sq <= 0.0 {
            return Err(Error::Factorization("covariance is not positive-definite".into()));
        }
        let whitened = sigma == DMatrix::identity(d, d);
        Ok(Self {
            beta_star,
            sigma,
            whitener,
            sigma_min_sq,
            whitened,
        })
    }

    pub fn dim(&self) -> usize {
        self.beta_star.len()
    }

    pub fn is_whitened(&self) -> bool {
        self.whitened
    }

    /// `Σ⁻¹ = WᵀW`.
    pub fn precision(&self) -> DMatrix<f64> {
        self.whitener.transpose() * &self.whitener
    }
}

/// Geometric quantities at one point of the manifold.
#[derive(Clone, Debug)]
pub struct GeometryAtPoint {
    pub theta: DVector<f64>,
    pub alpha: DVector<f64>,
    pub jacobian: DMatrix<f64>,
    pub metric: DMatrix<f64>,
    pub pseudoinverse: DMatrix<f64>,
    pub second_form: Option<DMatrix<f64>>,
    pub kappa: Option<f64>,
}

impl GeometryAtPoint {
    /// Assembles the local geometry from already-evaluated `α`, `J`, `H`.
    pub fn from_parts(
        theta: DVector<f64>,
        alpha: DVector<f64>,
        jacobian: DMatrix<f64>,
        hessian: Option<&Hessian>,
        signature: Option<&[f64]>,
    ) -> Result<Self> {
        let metric = pullback_metric(&jacobian, signature)?;
        let pseudoinverse = pseudoinverse(&jacobian, &metric, signature).map_err(|e| match e {
            Error::SingularMetric { .. } => Error::SingularMetric {
                theta: theta.iter().copied().collect(),
            },
            other => other,
        })?;
        let (second_form, kappa) = match hessian {
            Some(h) => {
                let f2 = second_fundamental_form(&jacobian, &pseudoinverse, Some(h))?;
                let k = curvature_scale(&metric, &f2)?;
                (Some(f2), Some(k))
            }
            None => (None, None),
        };
        Ok(Self {
            theta,
            alpha,
            jacobian,
            metric,
            pseudoinverse,
            second_form,
            kappa,
        })
    }

    /// Evaluates map, Jacobian and (if available) Hessian at `theta`.
    pub fn evaluate(model: &ManifoldModel, theta: &[f64]) -> Result<Self> {
        let alpha = model.map(theta)?;
        let jacobian = model.jacobian(theta)?;
        let hessian = model.hessian(theta)?;
        Self::from_parts(
            DVector::from_column_slice(theta),
            alpha,
            jacobian,
            hessian.as_ref(),
            model.signature(),
        )
    }

    pub fn projector(&self) -> DMatrix<f64> {
        &self.jacobian * &self.pseudoinverse
    }
}

fn all_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|x| x.is_finite())
}

fn signed_rows(j: &DMatrix<f64>, signature: Option<&[f64]>) -> DMatrix<f64> {
    match signature {
        None => j.clone(),
        Some(sig) => {
            let mut sj = j.clone();
            for (r, s) in sig.iter().enumerate() {
                if *s < 0.0 {
                    sj.row_mut(r).neg_mut();
                }
            }
            sj
        }
    }
}

/// Pullback metric `F_I = JᵀSJ`.
pub fn pullback_metric(j: &DMatrix<f64>, signature: Option<&[f64]>) -> Result<DMatrix<f64>> {
    if !all_finite(j) {
        return Err(Error::invalid("jacobian has non-finite entries"));
    }
    if let Some(sig) = signature {
        if sig.len() != j.nrows() {
            return Err(Error::shape("signature length differs from ambient dimension"));
        }
    }
    Ok(j.transpose() * signed_rows(j, signature))
}

/// Inverse of a symmetric metric via its eigendecomposition.
///
/// Fails when the smallest eigenvalue magnitude falls below [`RANK_TOL`]
/// relative to the largest, or below [`RANK_TOL`] in absolute terms.
pub fn metric_inverse(metric: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = checked_eigen(metric)?;
    let inv_vals = eig.eigenvalues.map(|l| 1.0 / l);
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&inv_vals) * eig.eigenvectors.transpose())
}

fn checked_eigen(metric: &DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let singular = || Error::SingularMetric { theta: Vec::new() };
    if !all_finite(metric) {
        return Err(singular());
    }
    let eig = SymmetricEigen::new(metric.clone());
    let max = eig.eigenvalues.amax();
    let min = eig.eigenvalues.iter().fold(f64::INFINITY, |m, x| m.min(x.abs()));
    if !(max > 0.0) || min < RANK_TOL * max || min < RANK_TOL {
        return Err(singular());
    }
    Ok(eig)
}

/// Left pseudoinverse `J⁺ = F_I⁻¹ JᵀS`, satisfying `J⁺J = I`.
pub fn pseudoinverse(j: &DMatrix<f64>, metric: &DMatrix<f64>, signature: Option<&[f64]>) -> Result<DMatrix<f64>> {
    let s = j.ncols();
    if metric.nrows() != s || metric.ncols() != s {
        return Err(Error::shape("metric must be s x s"));
    }
    let inv = metric_inverse(metric)?;
    Ok(inv * signed_rows(j, signature).transpose())
}

/// Tangent projection `P⊥v = J(J⁺v)` without forming the d×d projector.
pub fn project_tangent(j: &DMatrix<f64>, jplus: &DMatrix<f64>, v: &DVector<f64>) -> Result<DVector<f64>> {
    if j.nrows() != v.len() || jplus.ncols() != v.len() || j.ncols() != jplus.nrows() {
        return Err(Error::shape("project_tangent: inconsistent shapes"));
    }
    Ok(j * (jplus * v))
}

/// Matrix of normal-curvature norms `|(I − P⊥) ∂_μ∂_μ' α|`.
///
/// The norm is Euclidean regardless of signature, so entries are ≥ 0.
pub fn second_fundamental_form(
    j: &DMatrix<f64>,
    jplus: &DMatrix<f64>,
    hessian: Option<&Hessian>,
) -> Result<DMatrix<f64>> {
    let h = hessian.ok_or(Error::NotAvailable("hessian"))?;
    let s = j.ncols();
    if h.param_dim() != s || h.ambient_dim() != j.nrows() {
        return Err(Error::shape("hessian does not match jacobian"));
    }
    let mut out = DMatrix::zeros(s, s);
    for mu in 0..s {
        for mu2 in mu..s {
            let col = h.column(mu, mu2);
            let normal = &col - j * (jplus * &col);
            let n = normal.norm();
            out[(mu, mu2)] = n;
            out[(mu2, mu)] = n;
        }
    }
    Ok(out)
}

/// Largest curvature eigenvalue κ of `K = QᵀF_II Q`, where `F_I⁻¹ = UDUᵀ`
/// and `Q = U|D|^{1/2}` rescales the tangent basis to unit metric.
pub fn curvature_scale(metric: &DMatrix<f64>, second_form: &DMatrix<f64>) -> Result<f64> {
    let eig = checked_eigen(metric)?;
    let d_sqrt = eig.eigenvalues.map(|l| (1.0 / l).abs().sqrt());
    let q = &eig.eigenvectors * DMatrix::from_diagonal(&d_sqrt);
    let k = q.transpose() * second_form * &q;
    let k = (&k + k.transpose()) * 0.5;
    Ok(SymmetricEigen::new(k).eigenvalues.amax())
}

/// Fisher information `JᵀΣ⁻¹J`.
pub fn fisher_matrix(j: &DMatrix<f64>, gaussian: &AmbientGaussian) -> Result<DMatrix<f64>> {
    if j.nrows() != gaussian.dim() {
        return Err(Error::shape("jacobian rows differ from ambient dimension"));
    }
    if gaussian.is_whitened() {
        return Ok(j.transpose() * j);
    }
    let wj = &gaussian.whitener * j;
    Ok(wj.transpose() * wj)
}

struct Whitened {
    inner: ManifoldModel,
    whitener: DMatrix<f64>,
}

impl Embedding for Whitened {
    fn param_dim(&self) -> usize {
        self.inner.param_dim()
    }
    fn ambient_dim(&self) -> usize {
        self.inner.ambient_dim()
    }
    fn map(&self, theta: &[f64]) -> Result<DVector<f64>> {
        Ok(&self.whitener * self.inner.map(theta)?)
    }
    fn jacobian(&self, theta: &[f64]) -> Option<DMatrix<f64>> {
        self.inner.jacobian(theta).ok().map(|j| &self.whitener * j)
    }
    fn hessian(&self, theta: &[f64]) -> Option<Hessian> {
        self.inner
            .hessian(theta)
            .ok()
            .flatten()
            .map(|h| h.left_mul(&self.whitener))
    }
    fn has_hessian(&self) -> bool {
        self.inner.has_hessian()
    }
}

/// Changes ambient coordinates `β → Wβ` so the Gaussian has unit covariance.
///
/// The returned model maps `θ ↦ Wα(θ)` and the Gaussian is `N(Wβ*, I)`.
/// Already-whitened inputs are returned unchanged.
pub fn whiten(model: &ManifoldModel, gaussian: &AmbientGaussian) -> Result<(ManifoldModel, AmbientGaussian)> {
    if gaussian.dim() != model.ambient_dim() {
        return Err(Error::shape("gaussian dimension differs from model ambient dimension"));
    }
    if gaussian.is_whitened() {
        return Ok((model.clone(), gaussian.clone()));
    }
    let w = gaussian.whitener.clone();
    let mut whitened = ManifoldModel::new(Whitened {
        inner: model.clone(),
        whitener: w.clone(),
    })?;
    if let Some(sig) = model.signature() {
        whitened = whitened.with_signature(sig.to_vec())?;
    }
    let g = AmbientGaussian::identity(&w * &gaussian.beta_star);
    Ok((whitened, g))
}

/// Default finite-difference step `1e-5·(1+|θ_μ|)`.
pub fn default_steps(theta: &[f64]) -> Vec<f64> {
    theta.iter().map(|t| 1e-5 * (1.0 + t.abs())).collect()
}

/// Central-difference Jacobian of `f` at `theta`.
pub fn fd_jacobian(
    f: impl Fn(&[f64]) -> Result<DVector<f64>>,
    theta: &[f64],
    steps: &[f64],
) -> Result<DMatrix<f64>> {
    let base = f(theta)?;
    let mut out = DMatrix::zeros(base.len(), theta.len());
    let mut t = theta.to_vec();
    for mu in 0..theta.len() {
        let h = steps[mu];
        t[mu] = theta[mu] + h;
        let up = f(&t)?;
        t[mu] = theta[mu] - h;
        let down = f(&t)?;
        t[mu] = theta[mu];
        out.set_column(mu, &((up - down) / (2.0 * h)));
    }
    Ok(out)
}

/// Central-difference Hessian from a Jacobian evaluator, symmetrized.
pub fn fd_hessian(
    jac: impl Fn(&[f64]) -> Result<DMatrix<f64>>,
    theta: &[f64],
    steps: &[f64],
) -> Result<Hessian> {
    let s = theta.len();
    let mut t = theta.to_vec();
    let mut cols = Vec::with_capacity(s);
    for mu in 0..s {
        let h = steps[mu];
        t[mu] = theta[mu] + h;
        let up = jac(&t)?;
        t[mu] = theta[mu] - h;
        let down = jac(&t)?;
        t[mu] = theta[mu];
        cols.push((up - down) / (2.0 * h));
    }
    let d = cols[0].nrows();
    Ok(Hessian::from_fn(d, s, |nu, mu, mu2| {
        0.5 * (cols[mu][(nu, mu2)] + cols[mu2][(nu, mu)])
    }))
}

/// Relative discrepancies between analytic and finite-difference derivatives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DerivativeCheck {
    pub jacobian_rel_err: f64,
    pub hessian_rel_err: Option<f64>,
}

/// Compares the model's analytic derivatives against Richardson-extrapolated
/// central differences at `theta`.
///
/// Steps are `1e-5·(1+|θ_μ|)`, shrunk to stay well inside `[lower, upper]`
/// where the map may be undefined outside the region.
pub fn check_derivatives(model: &ManifoldModel, theta: &[f64], lower: &[f64], upper: &[f64]) -> Result<DerivativeCheck> {
    let steps: Vec<f64> = theta
        .iter()
        .enumerate()
        .map(|(mu, t)| {
            let room = (t - lower[mu]).min(upper[mu] - t).max(0.0);
            (1e-5 * (1.0 + t.abs())).min(0.05 * room).max(1e-12)
        })
        .collect();
    let emb = &model.embedding;
    let analytic_j = emb
        .jacobian(theta)
        .ok_or(Error::NotAvailable("analytic jacobian"))?;
    let half: Vec<f64> = steps.iter().map(|h| h / 2.0).collect();
    // (4·D(h/2) − D(h)) / 3 cancels the O(h²) term of central differences.
    let fd_j = (fd_jacobian(|t| emb.map(t), theta, &half)? * 4.0 - fd_jacobian(|t| emb.map(t), theta, &steps)?) / 3.0;
    let jacobian_rel_err = (&analytic_j - &fd_j).amax() / analytic_j.amax().max(f64::MIN_POSITIVE);

    let hessian_rel_err = match emb.hessian(theta) {
        None => None,
        Some(h) => {
            let jac = |t: &[f64]| emb.jacobian(t).ok_or(Error::NotAvailable("analytic jacobian"));
            let coarse = fd_hessian(jac, theta, &steps)?;
            let fine = fd_hessian(jac, theta, &half)?;
            let num = h
                .as_slice()
                .iter()
                .zip(coarse.as_slice().iter().zip(fine.as_slice()))
                .fold(0.0f64, |m, (x, (a, b))| m.max((x - (4.0 * b - a) / 3.0).abs()));
            let den = h.as_slice().iter().fold(0.0f64, |m, x| m.max(x.abs()));
            // A vanishing Hessian is compared in absolute terms.
            Some(if den > 0.0 { num / den } else { num })
        }
    };
    Ok(DerivativeCheck {
        jacobian_rel_err,
        hessian_rel_err,
    })
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn full_rank() -> impl Strategy<Value = DMatrix<f64>> {
        (1usize..4, 0usize..4).prop_flat_map(|(s, extra)| {
            let d = s + extra;
            prop::collection::vec(-2.0f64..2.0, d * s)
                .prop_map(move |v| DMatrix::from_vec(d, s, v) + DMatrix::identity(d, s) * 3.0)
        })
    }

    proptest! {
        #[test]
        fn pseudoinverse_is_left_inverse_and_projector_idempotent(j in full_rank(), seed in 0u64..1000) {
            let g = pullback_metric(&j, None).unwrap();
            let jp = pseudoinverse(&j, &g, None).unwrap();
            let s = j.ncols();
            prop_assert!((&jp * &j - DMatrix::identity(s, s)).amax() < 1e-9);
            let p = &j * &jp;
            prop_assert!((&p * &p - &p).amax() < 1e-9);
            prop_assert!((&p - p.transpose()).amax() < 1e-9);
            let v = DVector::from_fn(j.nrows(), |i, _| ((i as u64 * 7919 + seed) % 13) as f64 - 6.0);
            let t = project_tangent(&j, &jp, &v).unwrap();
            // Residual is normal to every column of J.
            prop_assert!((j.transpose() * (&v - &t)).amax() < 1e-8 * (1.0 + v.amax()));
        }

        #[test]
        fn metric_is_positive_definite(j in full_rank()) {
            let g = pullback_metric(&j, None).unwrap();
            let eig = SymmetricEigen::new(g);
            prop_assert!(eig.eigenvalues.iter().all(|l| *l > 0.0));
        }
    }
}
