//! Base chain generation and decoration.
//!
//! A random-walk Metropolis–Hastings sampler draws θ from the bounded target
//! `p(θ) ∝ f(α(θ)) 1_b(θ)`; each retained point is then decorated with its
//! mapped point, Jacobian, local geometry and compactness.

use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::compactness::{compactness, region_scale, CompactnessConfig, SamplingRegion};
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::geometry::{AmbientGaussian, GeometryAtPoint, Hessian, ManifoldModel};
use crate::rng::substream;

/// Bounded target density over parameter space.
#[derive(Clone, Copy, Debug)]
pub struct TargetDensity<'a> {
    pub model: &'a ManifoldModel,
    pub gaussian: &'a AmbientGaussian,
    pub region: &'a SamplingRegion,
}

impl<'a> TargetDensity<'a> {
    pub fn new(model: &'a ManifoldModel, gaussian: &'a AmbientGaussian, region: &'a SamplingRegion) -> Self {
        Self { model, gaussian, region }
    }

    /// Unnormalized log-density; `-∞` outside the region or where the map fails.
    pub fn log_density(&self, theta: &[f64]) -> f64 {
        if !self.region.contains(theta) {
            return f64::NEG_INFINITY;
        }
        self.model
            .log_density(self.gaussian, theta)
            .unwrap_or(f64::NEG_INFINITY)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalKind {
    #[default]
    IsotropicGaussian,
    /// `N(θ, scale² Γ(θ)⁻¹)` with the Hastings correction for the
    /// position-dependent covariance.
    Fisher,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ProposalScale {
    Scalar(f64),
    PerCoordinate(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainConfig {
    pub n_steps: usize,
    #[serde(default)]
    pub burn_in: usize,
    #[serde(default = "one")]
    pub thinning: usize,
    /// Isotropic mode: per-coordinate step (default: 1/20 of each region
    /// half-length). Fisher mode: scalar multiplier (default 1).
    #[serde(default)]
    pub proposal_scale: Option<ProposalScale>,
    #[serde(default)]
    pub proposal_kind: ProposalKind,
    /// Overwritten from the master seed by the pipeline.
    #[serde(default)]
    pub seed: u64,
    /// Starting point; defaults to the region centroid.
    #[serde(default)]
    pub initial: Option<Vec<f64>>,
    /// Base-chain length after downsampling the retained draws; all of
    /// them when absent.
    #[serde(default)]
    pub n_base: Option<usize>,
}

fn one() -> usize {
    1
}

impl ChainConfig {
    pub fn new(n_steps: usize, burn_in: usize, thinning: usize, seed: u64) -> Self {
        Self {
            n_steps,
            burn_in,
            thinning,
            proposal_scale: None,
            proposal_kind: ProposalKind::IsotropicGaussian,
            seed,
            initial: None,
            n_base: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_steps <= self.burn_in {
            return Err(Error::invalid("chain needs n_steps > burn_in"));
        }
        if self.thinning == 0 {
            return Err(Error::invalid("thinning must be at least 1"));
        }
        if let Some(n) = self.n_base {
            let retained = (self.n_steps - self.burn_in).div_ceil(self.thinning);
            if n == 0 || n > retained {
                return Err(Error::invalid(format!(
                    "n_base = {n} but the chain retains only {retained} draws"
                )));
            }
        }
        Ok(())
    }

    fn step_sizes(&self, region: &SamplingRegion) -> Result<Vec<f64>> {
        let s = region.dim();
        let steps = match &self.proposal_scale {
            None => region.half_lengths().iter().map(|l| l / 20.0).collect(),
            Some(ProposalScale::Scalar(x)) => vec![*x; s],
            Some(ProposalScale::PerCoordinate(v)) if v.len() == s => v.clone(),
            Some(ProposalScale::PerCoordinate(v)) => {
                return Err(Error::shape(format!("proposal_scale has {} entries, s = {s}", v.len())))
            }
        };
        if steps.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
            return Err(Error::invalid("proposal scales must be positive"));
        }
        Ok(steps)
    }
}

#[derive(Clone, Debug)]
pub struct ChainOutput {
    pub samples: Vec<Vec<f64>>,
    pub acceptance_rate: f64,
    pub proposals: usize,
}

/// Cholesky factor and log-determinant of a proposal covariance.
struct ProposalShape {
    chol: DMatrix<f64>,
    precision: DMatrix<f64>,
    log_det: f64,
}

impl ProposalShape {
    fn diagonal(steps: &[f64]) -> Self {
        let s = steps.len();
        let chol = DMatrix::from_diagonal(&DVector::from_column_slice(steps));
        let precision = DMatrix::from_fn(s, s, |i, j| if i == j { 1.0 / (steps[i] * steps[i]) } else { 0.0 });
        let log_det = steps.iter().map(|x| 2.0 * x.ln()).sum();
        Self { chol, precision, log_det }
    }

    /// `scale² |Γ|⁻¹`, with eigenvalue magnitudes so signed metrics still
    /// give a valid covariance. Falls back to the isotropic shape when Γ is
    /// unusable.
    fn fisher(target: &TargetDensity<'_>, theta: &[f64], scale: f64, fallback: &[f64]) -> Self {
        let gamma = target
            .model
            .jacobian(theta)
            .and_then(|j| crate::geometry::fisher_matrix(&j, target.gaussian).map(|g| (g, j)));
        let (gamma, j) = match gamma {
            Ok(x) => x,
            Err(_) => return Self::diagonal(fallback),
        };
        let gamma = match target.model.signature() {
            Some(sig) if target.gaussian.is_whitened() => {
                crate::geometry::pullback_metric(&j, Some(sig)).unwrap_or(gamma)
            }
            _ => gamma,
        };
        let eig = SymmetricEigen::new(gamma);
        let max = eig.eigenvalues.amax();
        if !(max > 0.0) || eig.eigenvalues.iter().any(|l| l.abs() < 1e-12 * max || !l.is_finite()) {
            return Self::diagonal(fallback);
        }
        let var = eig.eigenvalues.map(|l| scale * scale / l.abs());
        let cov = &eig.eigenvectors * DMatrix::from_diagonal(&var) * eig.eigenvectors.transpose();
        let precision = &eig.eigenvectors * DMatrix::from_diagonal(&var.map(|v| 1.0 / v)) * eig.eigenvectors.transpose();
        let log_det = var.iter().map(|v| v.ln()).sum();
        match cov.cholesky() {
            Some(c) => Self {
                chol: c.l(),
                precision,
                log_det,
            },
            None => Self::diagonal(fallback),
        }
    }

    fn log_q(&self, from: &[f64], to: &[f64]) -> f64 {
        let d = DVector::from_iterator(from.len(), to.iter().zip(from).map(|(b, a)| b - a));
        -0.5 * (d.dot(&(&self.precision * &d)) + self.log_det)
    }
}

/// Random-walk Metropolis–Hastings on the bounded target.
///
/// Proposals outside the region are rejected. States are recorded after
/// `burn_in` steps, every `thinning`-th step.
pub fn metropolis_hastings(target: &TargetDensity<'_>, cfg: &ChainConfig) -> Result<ChainOutput> {
    cfg.validate()?;
    let s = target.model.param_dim();
    if target.region.dim() != s {
        return Err(Error::shape("region dimension differs from model parameter dimension"));
    }
    let steps = cfg.step_sizes(target.region)?;
    let fisher_scale = match (&cfg.proposal_kind, &cfg.proposal_scale) {
        (ProposalKind::Fisher, Some(ProposalScale::Scalar(x))) => *x,
        _ => 1.0,
    };
    let iso_fallback: Vec<f64> = target.region.half_lengths().iter().map(|l| l / 20.0).collect();
    let shape_at = |theta: &[f64]| match cfg.proposal_kind {
        ProposalKind::IsotropicGaussian => None,
        ProposalKind::Fisher => Some(ProposalShape::fisher(target, theta, fisher_scale, &iso_fallback)),
    };
    let iso = ProposalShape::diagonal(&steps);

    let mut theta = cfg.initial.clone().unwrap_or_else(|| target.region.centroid());
    if theta.len() != s {
        return Err(Error::shape("initial point has the wrong dimension"));
    }
    let mut logp = target.log_density(&theta);
    if !logp.is_finite() {
        return Err(Error::invalid(format!(
            "initial point {theta:?} is outside the region or has zero density"
        )));
    }
    let mut shape = shape_at(&theta);

    let mut rng = substream(cfg.seed, 0);
    let mut samples = Vec::with_capacity((cfg.n_steps - cfg.burn_in) / cfg.thinning + 1);
    let mut accepted = 0usize;
    let mut window_accepted = 0usize;
    let window = 10_000usize;
    let mut z = DVector::<f64>::zeros(s);

    for step in 0..cfg.n_steps {
        for x in z.iter_mut() {
            *x = rng.sample(StandardNormal);
        }
        let current = shape.as_ref().unwrap_or(&iso);
        let delta = &current.chol * &z;
        let proposal: Vec<f64> = theta.iter().zip(delta.iter()).map(|(t, d)| t + d).collect();
        let logp_new = target.log_density(&proposal);
        if logp_new.is_finite() {
            let (log_ratio, new_shape) = match &shape {
                None => (logp_new - logp, None),
                Some(cur) => {
                    let back = shape_at(&proposal).expect("fisher mode");
                    let r = logp_new - logp + back.log_q(&proposal, &theta) - cur.log_q(&theta, &proposal);
                    (r, Some(back))
                }
            };
            let u: f64 = rng.random();
            if log_ratio >= 0.0 || u.ln() < log_ratio {
                theta = proposal;
                logp = logp_new;
                shape = new_shape;
                accepted += 1;
                window_accepted += 1;
            }
        }
        if (step + 1) % window == 0 {
            if window_accepted == 0 {
                log::warn!(
                    "metropolis-hastings: no acceptances in steps {}..{} (overall rate {:.4})",
                    step + 1 - window,
                    step + 1,
                    accepted as f64 / (step + 1) as f64
                );
            }
            window_accepted = 0;
        }
        if step >= cfg.burn_in && (step - cfg.burn_in) % cfg.thinning == 0 {
            samples.push(theta.clone());
        }
    }
    let acceptance_rate = accepted as f64 / cfg.n_steps as f64;
    if accepted == 0 {
        log::warn!("metropolis-hastings: zero acceptances over {} proposals", cfg.n_steps);
    }
    Ok(ChainOutput {
        samples,
        acceptance_rate,
        proposals: cfg.n_steps,
    })
}

/// Takes `n` entries at uniform stride `⌊N/n⌋` from a chain of length N.
pub fn downsample<T: Clone>(chain: &[T], n: usize) -> Result<Vec<T>> {
    if n == 0 || n > chain.len() {
        return Err(Error::invalid(format!(
            "cannot take {n} entries from a chain of length {}",
            chain.len()
        )));
    }
    let stride = chain.len() / n;
    Ok((0..n).map(|k| chain[k * stride].clone()).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryFlag {
    SingularMetric,
    DegenerateCompactness,
}

/// One decorated base-chain point.
///
/// Flagged entries keep θ, α and J but have no usable local frame; the
/// upsampler treats them as infinitely compact.
#[derive(Clone, Debug)]
pub struct BaseChainEntry {
    pub theta: DVector<f64>,
    pub alpha: DVector<f64>,
    pub jacobian: DMatrix<f64>,
    pub hessian: Option<Hessian>,
    pub geometry: Option<GeometryAtPoint>,
    pub lambda_sq: Option<f64>,
    pub kappa: Option<f64>,
    /// `f64::INFINITY` for flagged entries.
    pub compactness: f64,
    pub flag: Option<EntryFlag>,
}

impl BaseChainEntry {
    pub fn is_flagged(&self) -> bool {
        self.flag.is_some()
    }

    /// Decorates already-evaluated `α`, `J`, `H` at `theta`.
    pub fn from_parts(
        theta: DVector<f64>,
        alpha: DVector<f64>,
        jacobian: DMatrix<f64>,
        hessian: Option<Hessian>,
        signature: Option<&[f64]>,
        region: &SamplingRegion,
        cfg: &CompactnessConfig,
    ) -> Result<Self> {
        let mut entry = BaseChainEntry {
            theta: theta.clone(),
            alpha: alpha.clone(),
            jacobian: jacobian.clone(),
            hessian: hessian.clone(),
            geometry: None,
            lambda_sq: None,
            kappa: None,
            compactness: f64::INFINITY,
            flag: None,
        };
        let geometry = match GeometryAtPoint::from_parts(theta, alpha, jacobian, hessian.as_ref(), signature) {
            Ok(g) => g,
            Err(Error::SingularMetric { .. }) => {
                entry.flag = Some(EntryFlag::SingularMetric);
                return Ok(entry);
            }
            Err(e) => return Err(e),
        };
        let lambda_sq = region_scale(&geometry.pseudoinverse, region)?;
        entry.lambda_sq = Some(lambda_sq);
        entry.kappa = geometry.kappa;
        match compactness(lambda_sq, geometry.kappa, cfg) {
            Ok(c) => entry.compactness = c,
            Err(Error::DegenerateCompactness(_)) => entry.flag = Some(EntryFlag::DegenerateCompactness),
            Err(e) => return Err(e),
        }
        entry.geometry = Some(geometry);
        Ok(entry)
    }

    /// Evaluates the model at `theta` (one map, one Jacobian, one optional
    /// Hessian call) and decorates the result.
    pub fn evaluate(
        model: &ManifoldModel,
        theta: &[f64],
        region: &SamplingRegion,
        cfg: &CompactnessConfig,
    ) -> Result<Self> {
        let alpha = model.map(theta)?;
        let jacobian = model.jacobian(theta)?;
        let hessian = model.hessian(theta)?;
        Self::from_parts(
            DVector::from_column_slice(theta),
            alpha,
            jacobian,
            hessian,
            model.signature(),
            region,
            cfg,
        )
    }

    /// Recomputes compactness (and flags) for a new configuration without
    /// touching the model.
    pub fn recompute_compactness(&self, region: &SamplingRegion, cfg: &CompactnessConfig) -> Result<Self> {
        match &self.geometry {
            None => Ok(self.clone()),
            Some(g) => {
                let lambda_sq = region_scale(&g.pseudoinverse, region)?;
                let mut e = self.clone();
                e.lambda_sq = Some(lambda_sq);
                match compactness(lambda_sq, g.kappa, cfg) {
                    Ok(c) => {
                        e.compactness = c;
                        e.flag = None;
                    }
                    Err(Error::DegenerateCompactness(_)) => {
                        e.compactness = f64::INFINITY;
                        e.flag = Some(EntryFlag::DegenerateCompactness);
                    }
                    Err(err) => return Err(err),
                }
                Ok(e)
            }
        }
    }
}

/// Decorates every base point. Geometry failures become per-entry flags;
/// only invalid input (dimension errors, points outside the region, map
/// failures) aborts.
pub fn build_base_chain(
    thetas: &[Vec<f64>],
    model: &ManifoldModel,
    region: &SamplingRegion,
    cfg: &CompactnessConfig,
    execution: Execution,
) -> Result<Vec<BaseChainEntry>> {
    cfg.validate()?;
    if region.dim() != model.param_dim() {
        return Err(Error::shape("region dimension differs from model parameter dimension"));
    }
    if let Some(bad) = thetas.iter().position(|t| !region.contains(t)) {
        return Err(Error::invalid(format!(
            "base point {bad} ({:?}) lies outside the sampling region",
            thetas[bad]
        )));
    }
    exec::map_indexed(execution, thetas, |_, t| BaseChainEntry::evaluate(model, t, region, cfg))
        .into_iter()
        .collect()
}

/// JSONL record for one base-chain entry. The Jacobian (d×s) and Hessian
/// (d×s×s) are flattened row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainRecord {
    pub theta: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jacobian: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hessian: Option<Vec<f64>>,
    /// Compactness; `null` for flagged (infinitely compact) entries.
    #[serde(default)]
    pub c: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flag: Option<EntryFlag>,
}

impl From<&BaseChainEntry> for ChainRecord {
    fn from(e: &BaseChainEntry) -> Self {
        let (d, s) = e.jacobian.shape();
        let mut jac = Vec::with_capacity(d * s);
        for nu in 0..d {
            for mu in 0..s {
                jac.push(e.jacobian[(nu, mu)]);
            }
        }
        ChainRecord {
            theta: e.theta.iter().copied().collect(),
            alpha: Some(e.alpha.iter().copied().collect()),
            jacobian: Some(jac),
            hessian: e.hessian.as_ref().map(|h| h.as_slice().to_vec()),
            c: e.compactness.is_finite().then_some(e.compactness),
            flag: e.flag,
        }
    }
}

pub fn write_chain_jsonl<W: Write>(mut out: W, entries: &[BaseChainEntry]) -> Result<()> {
    for e in entries {
        serde_json::to_writer(&mut out, &ChainRecord::from(e))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads chain records; blank lines are skipped. Records may carry only
/// `theta` (an external chain).
pub fn read_chain_jsonl<R: BufRead>(input: R) -> Result<Vec<ChainRecord>> {
    let mut out = Vec::new();
    for (lineno, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ChainRecord = serde_json::from_str(&line)
            .map_err(|e| Error::invalid(format!("chain line {}: {e}", lineno + 1)))?;
        out.push(rec);
    }
    Ok(out)
}
