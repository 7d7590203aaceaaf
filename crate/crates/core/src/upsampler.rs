//! Tangent-bundle upsampling: mini-distributions around each base point,
//! projection–pullback to parameter space, closed-form Gaussian weights and
//! boundary correction.
//!
//! All routines assume a whitened ambient Gaussian (Σ = I).

use std::io::Write;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::basechain::BaseChainEntry;
use crate::compactness::SamplingRegion;
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::geometry::AmbientGaussian;
use crate::rng::{substream, StreamRng};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiniMode {
    /// `β = α_i + z/√c`, then pulled back through `J⁺`.
    #[default]
    AmbientProjection,
    /// `θ ~ N(θ_i, Γ⁻¹/c)` directly in parameter space.
    FisherPullback,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryPolicy {
    #[default]
    ReplaceWithBase,
    DiscardRaw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UpsampleConfig {
    pub m: usize,
    /// Overwritten from the master seed by the pipeline.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mini_mode: MiniMode,
    #[serde(default)]
    pub boundary_policy: BoundaryPolicy,
    #[serde(default)]
    pub keep_beta_perp: bool,
    #[serde(default)]
    pub execution: Execution,
}

impl UpsampleConfig {
    pub fn new(m: usize, seed: u64) -> Self {
        Self {
            m,
            seed,
            mini_mode: MiniMode::default(),
            boundary_policy: BoundaryPolicy::default(),
            keep_beta_perp: false,
            execution: Execution::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::invalid("mini-distribution size m must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightedSample {
    pub theta: Vec<f64>,
    pub weight: f64,
    pub base_index: usize,
    pub j: usize,
    pub boundary_replaced: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_perp: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpsampleReport {
    pub n_base: usize,
    pub m: usize,
    pub emitted: usize,
    pub boundary_replaced: usize,
    pub discarded_outside: usize,
    pub dropped_nonfinite: usize,
    pub flagged_entries: usize,
}

impl UpsampleReport {
    pub fn replacement_fraction(&self) -> f64 {
        if self.emitted == 0 {
            0.0
        } else {
            self.boundary_replaced as f64 / self.emitted as f64
        }
    }
}

#[derive(Clone, Debug)]
pub struct Upsampled {
    pub samples: Vec<WeightedSample>,
    pub report: UpsampleReport,
}

/// `m` ambient draws `β = α_i + z/√c_i`. Infinite compactness returns
/// copies of `α_i`.
pub fn draw_mini_ambient(entry: &BaseChainEntry, m: usize, rng: &mut StreamRng) -> Vec<DVector<f64>> {
    let d = entry.alpha.len();
    let scale = 1.0 / entry.compactness.sqrt();
    (0..m)
        .map(|_| {
            let mut beta = entry.alpha.clone();
            if scale > 0.0 {
                for x in beta.iter_mut() {
                    *x += scale * rng.sample::<f64, _>(StandardNormal);
                }
            } else {
                // Keep the stream position independent of c.
                for _ in 0..d {
                    let _: f64 = rng.sample(StandardNormal);
                }
            }
            beta
        })
        .collect()
}

/// `θ = θ_i + J⁺(β - α_i)`; flagged entries return `θ_i`.
pub fn project_pullback(entry: &BaseChainEntry, beta: &DVector<f64>) -> DVector<f64> {
    match &entry.geometry {
        Some(g) if !entry.is_flagged() => &entry.theta + &g.pseudoinverse * (beta - &entry.alpha),
        _ => entry.theta.clone(),
    }
}

/// `β⊥ = α_i + J_i(θ - θ_i)`.
pub fn pushforward(entry: &BaseChainEntry, theta: &DVector<f64>) -> DVector<f64> {
    &entry.alpha + &entry.jacobian * (theta - &entry.theta)
}

/// Normalization `N = ((1+c)/c)^{s/2}`; 1 in the infinite-compactness limit.
pub fn weight_normalizer(c: f64, s: usize) -> f64 {
    if c.is_infinite() {
        1.0
    } else {
        ((1.0 + c) / c).powf(0.5 * s as f64)
    }
}

/// Gaussian weight `N exp(-½ vᵀ P⊥ v / (1+c))` with `v = β⊥ - β*`.
///
/// The quadratic form is evaluated in tangent coordinates, `u = J⁺v`,
/// `vᵀP⊥v = uᵀ F_I u`, which never forms the d×d projector.
pub fn weight(entry: &BaseChainEntry, beta_perp: &DVector<f64>, beta_star: &DVector<f64>) -> Result<f64> {
    let c = entry.compactness;
    let g = match &entry.geometry {
        Some(g) if !entry.is_flagged() && c.is_finite() => g,
        _ => return Ok(1.0),
    };
    let u = &g.pseudoinverse * (beta_perp - beta_star);
    let w = tangent_weight(&g.metric, &u, c);
    if w.is_finite() && w > 0.0 {
        Ok(w)
    } else {
        Err(Error::Numeric(format!("non-finite weight {w}")))
    }
}

fn tangent_weight(metric: &DMatrix<f64>, u: &DVector<f64>, c: f64) -> f64 {
    let q = u.dot(&(metric * u));
    weight_normalizer(c, u.len()) * (-0.5 * q / (1.0 + c)).exp()
}

/// Draws `θ ~ N(θ_i, Γ_i⁻¹/c_i)`, with `Γ_i⁻¹` built from eigenvalue
/// magnitudes of the (possibly signed) metric. Flagged entries return
/// copies of `θ_i`.
pub fn draw_mini_fisher(entry: &BaseChainEntry, m: usize, rng: &mut StreamRng) -> Vec<DVector<f64>> {
    let s = entry.theta.len();
    let factor = match &entry.geometry {
        Some(g) if !entry.is_flagged() && entry.compactness.is_finite() => {
            let eig = SymmetricEigen::new(g.metric.clone());
            let sd = eig.eigenvalues.map(|l| (1.0 / (l.abs() * entry.compactness)).sqrt());
            Some(&eig.eigenvectors * DMatrix::from_diagonal(&sd))
        }
        _ => None,
    };
    (0..m)
        .map(|_| {
            let z = DVector::from_fn(s, |_, _| rng.sample::<f64, _>(StandardNormal));
            match &factor {
                Some(f) => &entry.theta + f * z,
                None => entry.theta.clone(),
            }
        })
        .collect()
}

/// Applies the boundary policy to samples of one base entry.
///
/// `ReplaceWithBase` swaps each out-of-region sample for `(θ_i, 1)` and
/// keeps the count; `DiscardRaw` drops it. Returns the number of affected
/// samples.
pub fn boundary_correct(
    samples: &mut Vec<WeightedSample>,
    base: &[BaseChainEntry],
    region: &SamplingRegion,
    policy: BoundaryPolicy,
) -> usize {
    let mut affected = 0;
    match policy {
        BoundaryPolicy::ReplaceWithBase => {
            for smp in samples.iter_mut() {
                if !region.contains(&smp.theta) {
                    smp.theta = base[smp.base_index].theta.iter().copied().collect();
                    smp.weight = 1.0;
                    smp.boundary_replaced = true;
                    smp.beta_perp = smp.beta_perp.as_ref().map(|_| base[smp.base_index].alpha.iter().copied().collect());
                    affected += 1;
                }
            }
        }
        BoundaryPolicy::DiscardRaw => {
            let before = samples.len();
            samples.retain(|smp| region.contains(&smp.theta));
            affected = before - samples.len();
        }
    }
    affected
}

struct EntryOutput {
    samples: Vec<WeightedSample>,
    dropped_nonfinite: usize,
    affected: usize,
}

fn upsample_entry(
    i: usize,
    entry: &BaseChainEntry,
    base: &[BaseChainEntry],
    gaussian: &AmbientGaussian,
    region: &SamplingRegion,
    cfg: &UpsampleConfig,
) -> EntryOutput {
    let mut rng = substream(cfg.seed, i as u64);
    let m = cfg.m;
    let theta_i: Vec<f64> = entry.theta.iter().copied().collect();
    let usable = entry.geometry.as_ref().filter(|_| !entry.is_flagged() && entry.compactness.is_finite());
    let Some(g) = usable else {
        let samples = (0..m)
            .map(|j| WeightedSample {
                theta: theta_i.clone(),
                weight: 1.0,
                base_index: i,
                j,
                boundary_replaced: false,
                beta_perp: cfg.keep_beta_perp.then(|| entry.alpha.iter().copied().collect()),
            })
            .collect();
        return EntryOutput {
            samples,
            dropped_nonfinite: 0,
            affected: 0,
        };
    };

    let thetas = match cfg.mini_mode {
        MiniMode::AmbientProjection => draw_mini_ambient(entry, m, &mut rng)
            .iter()
            .map(|b| project_pullback(entry, b))
            .collect::<Vec<_>>(),
        MiniMode::FisherPullback => draw_mini_fisher(entry, m, &mut rng),
    };
    // u = J⁺(β⊥ - β*) = J⁺(α_i - β*) + (θ - θ_i), since J⁺J = I.
    let u0 = &g.pseudoinverse * (&entry.alpha - &gaussian.beta_star);
    let c = entry.compactness;
    let mut samples = Vec::with_capacity(m);
    let mut dropped = 0;
    for (j, theta) in thetas.into_iter().enumerate() {
        let delta = &theta - &entry.theta;
        let w = tangent_weight(&g.metric, &(&u0 + &delta), c);
        if !(w.is_finite() && w > 0.0) || theta.iter().any(|x| !x.is_finite()) {
            dropped += 1;
            continue;
        }
        samples.push(WeightedSample {
            theta: theta.iter().copied().collect(),
            weight: w,
            base_index: i,
            j,
            boundary_replaced: false,
            beta_perp: cfg
                .keep_beta_perp
                .then(|| (&entry.alpha + &entry.jacobian * &delta).iter().copied().collect()),
        });
    }
    let affected = boundary_correct(&mut samples, base, region, cfg.boundary_policy);
    EntryOutput {
        samples,
        dropped_nonfinite: dropped,
        affected,
    }
}

/// Upsamples every base entry into `m` weighted samples.
///
/// Each entry draws from its own random substream keyed by its index, so
/// the output is identical under sequential and parallel execution.
pub fn upsample(
    base: &[BaseChainEntry],
    gaussian: &AmbientGaussian,
    region: &SamplingRegion,
    cfg: &UpsampleConfig,
) -> Result<Upsampled> {
    cfg.validate()?;
    if base.is_empty() {
        return Err(Error::invalid("base chain is empty"));
    }
    if !gaussian.is_whitened() {
        return Err(Error::invalid("upsampling requires a whitened ambient Gaussian"));
    }
    let d = gaussian.dim();
    if let Some(bad) = base.iter().position(|e| e.alpha.len() != d || e.theta.len() != region.dim()) {
        return Err(Error::shape(format!("base entry {bad} does not match the model dimensions")));
    }
    let outputs = exec::map_indexed(cfg.execution, base, |i, e| upsample_entry(i, e, base, gaussian, region, cfg));
    let mut report = UpsampleReport {
        n_base: base.len(),
        m: cfg.m,
        flagged_entries: base.iter().filter(|e| e.is_flagged()).count(),
        ..Default::default()
    };
    let mut samples = Vec::with_capacity(base.len() * cfg.m);
    for out in outputs {
        report.dropped_nonfinite += out.dropped_nonfinite;
        match cfg.boundary_policy {
            BoundaryPolicy::ReplaceWithBase => report.boundary_replaced += out.affected,
            BoundaryPolicy::DiscardRaw => report.discarded_outside += out.affected,
        }
        samples.extend(out.samples);
    }
    report.emitted = samples.len();
    if report.dropped_nonfinite > 0 {
        log::warn!("dropped {} samples with non-finite weights", report.dropped_nonfinite);
    }
    Ok(Upsampled { samples, report })
}

#[derive(Serialize, Deserialize)]
struct SampleRecord {
    i: usize,
    j: usize,
    theta: Vec<f64>,
    w: f64,
    replaced: bool,
}

/// One JSON object per line: `{"i", "j", "theta", "w", "replaced"}`.
pub fn write_samples_jsonl<W: Write>(mut out: W, samples: &[WeightedSample]) -> Result<()> {
    for smp in samples {
        let rec = SampleRecord {
            i: smp.base_index,
            j: smp.j,
            theta: smp.theta.clone(),
            w: smp.weight,
            replaced: smp.boundary_replaced,
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_samples_jsonl<R: std::io::BufRead>(input: R) -> Result<Vec<WeightedSample>> {
    let mut out = Vec::new();
    for (lineno, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord = serde_json::from_str(&line)
            .map_err(|e| Error::invalid(format!("sample line {}: {e}", lineno + 1)))?;
        out.push(WeightedSample {
            theta: rec.theta,
            weight: rec.w,
            base_index: rec.i,
            j: rec.j,
            boundary_replaced: rec.replaced,
            beta_perp: None,
        });
    }
    Ok(out)
}

/// CSV with columns `theta_0 … theta_{s-1}, weight`.
pub fn write_samples_csv<W: Write>(mut out: W, samples: &[WeightedSample]) -> Result<()> {
    let s = samples.first().map_or(0, |x| x.theta.len());
    let header: Vec<String> = (0..s).map(|k| format!("theta_{k}")).chain(["weight".to_string()]).collect();
    writeln!(out, "{}", header.join(","))?;
    for smp in samples {
        let row: Vec<String> = smp.theta.iter().chain([&smp.weight]).map(|x| format!("{x:e}")).collect();
        writeln!(out, "{}", row.join(","))?;
    }
    out.flush()?;
    Ok(())
}

/// General-covariance forms of the weight matrix and normalization, for
/// cross-checking the whitened closed forms on small problems.
pub mod general {
    use super::*;

    /// `M = Σ⁻¹ - (Σ + P⊥ C⁻¹ P⊥ᵀ)⁻¹` with `C = cI`.
    pub fn weight_matrix(projector: &DMatrix<f64>, sigma: &DMatrix<f64>, c: f64) -> Result<DMatrix<f64>> {
        let inv = |m: DMatrix<f64>| {
            m.try_inverse()
                .ok_or_else(|| Error::Factorization("singular matrix in general weight".into()))
        };
        let spread = sigma + projector * projector.transpose() / c;
        Ok(inv(sigma.clone())? - inv(spread)?)
    }

    /// `N = √(det(J⁺(Σ + C⁻¹)J⁺ᵀ) / det(J⁺ΣJ⁺ᵀ))` with `C = cI`.
    pub fn normalizer(jplus: &DMatrix<f64>, sigma: &DMatrix<f64>, c: f64) -> f64 {
        let d = sigma.nrows();
        let top = jplus * (sigma + DMatrix::identity(d, d) / c) * jplus.transpose();
        let bottom = jplus * sigma * jplus.transpose();
        (top.determinant() / bottom.determinant()).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basechain::build_base_chain;
    use crate::compactness::CompactnessConfig;
    use crate::examples;
    use crate::geometry::GeometryAtPoint;
    use approx::assert_relative_eq;

    fn parabola_entry(x: f64, cfg: &CompactnessConfig) -> BaseChainEntry {
        let ex = examples::parabola();
        BaseChainEntry::evaluate(&ex.model, &[x], &ex.region, cfg).unwrap()
    }

    fn with_c(mut e: BaseChainEntry, c: f64) -> BaseChainEntry {
        e.compactness = c;
        e
    }

    #[test]
    fn pullback_examples() {
        let e = parabola_entry(0.0, &CompactnessConfig::default());
        assert_relative_eq!(project_pullback(&e, &DVector::from_vec(vec![0.5, 0.3]))[0], 0.5, epsilon = 1e-15);
        assert_eq!(project_pullback(&e, &e.alpha.clone()), e.theta);
        let e1 = parabola_entry(1.0, &CompactnessConfig::default());
        let beta = &e1.alpha + DVector::from_vec(vec![0.1, 0.2]);
        assert_relative_eq!(project_pullback(&e1, &beta)[0], 1.1, epsilon = 1e-14);
    }

    #[test]
    fn pushforward_roundtrip() {
        let ex = examples::klein(2);
        let e = BaseChainEntry::evaluate(&ex.model, &[4.0, 1.0, 2.0], &ex.region, &CompactnessConfig::default()).unwrap();
        let g = e.geometry.as_ref().unwrap();
        let mut rng = substream(1, 0);
        for _ in 0..20 {
            let beta = DVector::from_fn(5, |_, _| rng.sample::<f64, _>(StandardNormal)) + &e.alpha;
            let back = pushforward(&e, &project_pullback(&e, &beta));
            let expected = &e.alpha + g.projector() * (&beta - &e.alpha);
            assert!((back - expected).amax() < 1e-10);
        }
        assert_eq!(pushforward(&e, &e.theta), e.alpha);
    }

    #[test]
    fn pushforward_exact_for_affine() {
        let ex = examples::synthetic_highd(&examples::SyntheticParams {
            amplitude: 0.0,
            ..Default::default()
        })
        .unwrap();
        let e = BaseChainEntry::evaluate(&ex.model, &[0.2, 0.1], &ex.region, &CompactnessConfig::default()).unwrap();
        let t = DVector::from_vec(vec![-0.3, 0.6]);
        let exact = ex.model.map(t.as_slice()).unwrap();
        assert!((pushforward(&e, &t) - exact).amax() < 1e-12);
    }

    #[test]
    fn weight_examples() {
        let e = with_c(parabola_entry(0.0, &CompactnessConfig::default()), 2.0);
        let beta_star = DVector::from_vec(vec![1.0, 2.0]);
        let w = weight(&e, &DVector::from_vec(vec![0.0, 0.0]), &beta_star).unwrap();
        let expected = 1.5f64.sqrt() * (-1.0f64 / 6.0).exp();
        assert_relative_eq!(w, expected, max_relative = 1e-14);
        assert!((w - 1.03672).abs() < 1e-5);
        assert_relative_eq!(weight(&e, &beta_star, &beta_star).unwrap(), 1.5f64.sqrt(), max_relative = 1e-15);
        let far = with_c(e.clone(), 1e15);
        assert!((weight(&far, &DVector::zeros(2), &beta_star).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tangent_form_matches_projector_form() {
        let ex = examples::klein(0);
        let e = BaseChainEntry::evaluate(&ex.model, &[5.0, 2.0, 4.0], &ex.region, &CompactnessConfig::default()).unwrap();
        let p = e.geometry.as_ref().unwrap().projector();
        let mut rng = substream(3, 0);
        for _ in 0..10 {
            let v = DVector::from_fn(5, |_, _| rng.sample::<f64, _>(StandardNormal));
            let beta_perp = &ex.gaussian.beta_star + &v;
            let w = weight(&e, &beta_perp, &ex.gaussian.beta_star).unwrap();
            let c = e.compactness;
            let direct = ((1.0 + c) / c).powf(1.5) * (-0.5 * v.dot(&(&p * &v)) / (1.0 + c)).exp();
            assert_relative_eq!(w, direct, max_relative = 1e-12);
        }
    }

    #[test]
    fn general_forms_reduce_to_whitened() {
        let ex = examples::klein(1);
        for t in [[3.0, 0.5, 1.0], [7.0, 5.0, 3.0]] {
            let g = GeometryAtPoint::evaluate(&ex.model, &t).unwrap();
            let c = 12.5;
            let m = general::weight_matrix(&g.projector(), &DMatrix::identity(5, 5), c).unwrap();
            assert!((m - g.projector() / (1.0 + c)).amax() < 1e-10);
            let n = general::normalizer(&g.pseudoinverse, &DMatrix::identity(5, 5), c);
            assert_relative_eq!(n, weight_normalizer(c, 3), max_relative = 1e-10);
        }
    }

    #[test]
    fn ambient_draw_covariance() {
        let e = with_c(parabola_entry(0.5, &CompactnessConfig::default()), 4.0);
        let mut rng = substream(11, 0);
        let draws = draw_mini_ambient(&e, 100_000, &mut rng);
        let n = draws.len() as f64;
        let mean = draws.iter().fold(DVector::zeros(2), |a, b| a + b) / n;
        let mut cov = DMatrix::<f64>::zeros(2, 2);
        for b in &draws {
            let v = b - &mean;
            cov += &v * v.transpose();
        }
        cov /= n;
        let target = DMatrix::<f64>::identity(2, 2) / 4.0;
        assert!((&cov - &target).norm() / target.norm() < 0.02);
        assert!((mean - &e.alpha).amax() < 4.0 * 0.5 / n.sqrt() * 2.0);
        let inf = with_c(e, f64::INFINITY);
        assert!(draw_mini_ambient(&inf, 3, &mut rng).iter().all(|b| *b == inf.alpha));
    }

    #[test]
    fn fisher_and_ambient_agree_in_distribution() {
        let ex = examples::klein(0);
        let e = BaseChainEntry::evaluate(&ex.model, &[4.0, 2.0, 3.0], &ex.region, &CompactnessConfig::with_epsilon(0.1))
            .unwrap();
        let n = 100_000;
        let a: Vec<DVector<f64>> = draw_mini_ambient(&e, n, &mut substream(1, 0))
            .iter()
            .map(|b| project_pullback(&e, b))
            .collect();
        let f = draw_mini_fisher(&e, n, &mut substream(2, 0));
        let moments = |xs: &[DVector<f64>]| {
            let mean = xs.iter().fold(DVector::zeros(3), |acc, x| acc + x) / n as f64;
            let mut cov = DMatrix::<f64>::zeros(3, 3);
            for x in xs {
                let v = x - &mean;
                cov += &v * v.transpose();
            }
            (mean, cov / n as f64)
        };
        let (ma, ca) = moments(&a);
        let (mf, cf) = moments(&f);
        assert!((&ca - &cf).norm() / ca.norm() < 0.02);
        let sd = ca.diagonal().map(f64::sqrt);
        for k in 0..3 {
            assert!((ma[k] - mf[k]).abs() < 0.02 * sd[k] * 10.0);
        }
    }

    #[test]
    fn fisher_parabola_variance() {
        let e = with_c(parabola_entry(0.0, &CompactnessConfig::default()), 2.0);
        let xs = draw_mini_fisher(&e, 100_000, &mut substream(4, 0));
        let var = xs.iter().map(|x| x[0] * x[0]).sum::<f64>() / xs.len() as f64;
        assert!((var - 0.5).abs() < 0.01);
        let inf = with_c(e, f64::INFINITY);
        let mut flagged = inf.clone();
        flagged.flag = Some(crate::basechain::EntryFlag::DegenerateCompactness);
        assert!(draw_mini_fisher(&flagged, 5, &mut substream(4, 0)).iter().all(|t| *t == flagged.theta));
    }

    #[test]
    fn boundary_rules() {
        let ex = examples::parabola();
        let base = build_base_chain(&[vec![2.9]], &ex.model, &ex.region, &CompactnessConfig::default(), Execution::Sequential)
            .unwrap();
        let mk = |t: f64, j| WeightedSample {
            theta: vec![t],
            weight: 0.7,
            base_index: 0,
            j,
            boundary_replaced: false,
            beta_perp: None,
        };
        let mut inside = vec![mk(1.0, 0), mk(-2.0, 1)];
        let copy = inside.clone();
        assert_eq!(boundary_correct(&mut inside, &base, &ex.region, BoundaryPolicy::ReplaceWithBase), 0);
        assert_eq!(inside, copy);
        let mut mixed = vec![mk(1.0, 0), mk(3.2, 1)];
        assert_eq!(boundary_correct(&mut mixed, &base, &ex.region, BoundaryPolicy::ReplaceWithBase), 1);
        assert_eq!(mixed.len(), 2);
        assert_eq!(mixed[1].theta, vec![2.9]);
        assert_eq!(mixed[1].weight, 1.0);
        assert!(mixed[1].boundary_replaced);
        let mut mixed = vec![mk(1.0, 0), mk(3.2, 1)];
        assert_eq!(boundary_correct(&mut mixed, &base, &ex.region, BoundaryPolicy::DiscardRaw), 1);
        assert_eq!(mixed.len(), 1);
    }

    #[test]
    fn single_infinite_sample() {
        let ex = examples::parabola();
        let base = build_base_chain(&[vec![0.4]], &ex.model, &ex.region, &CompactnessConfig::constant(f64::MAX), Execution::Sequential)
            .unwrap();
        let mut base = base;
        base[0].compactness = f64::INFINITY;
        let out = upsample(&base, &ex.gaussian, &ex.region, &UpsampleConfig::new(1, 0)).unwrap();
        assert_eq!(out.samples.len(), 1);
        assert_eq!(out.samples[0].theta, vec![0.4]);
        assert_eq!(out.samples[0].weight, 1.0);
    }

    #[test]
    fn high_compactness_limit() {
        let ex = examples::klein(0);
        let thetas = vec![vec![3.0, 1.0, 1.0], vec![5.0, 3.0, 4.0], vec![7.0, 5.0, 2.0]];
        let base = build_base_chain(&thetas, &ex.model, &ex.region, &CompactnessConfig::constant(1e12), Execution::Sequential)
            .unwrap();
        let out = upsample(&base, &ex.gaussian, &ex.region, &UpsampleConfig::new(200, 9)).unwrap();
        for smp in &out.samples {
            assert!((smp.weight - 1.0).abs() <= 1e-6);
            let ti = &thetas[smp.base_index];
            assert!(smp.theta.iter().zip(ti).all(|(a, b)| (a - b).abs() <= 1e-5));
        }
    }

    #[test]
    fn sequential_and_parallel_identical() {
        let ex = examples::parabola();
        let thetas: Vec<Vec<f64>> = (0..40).map(|k| vec![-2.0 + 0.1 * k as f64]).collect();
        let base = build_base_chain(&thetas, &ex.model, &ex.region, &CompactnessConfig::with_epsilon(0.07), Execution::Parallel)
            .unwrap();
        let mut cfg = UpsampleConfig::new(50, 17);
        cfg.execution = Execution::Sequential;
        let a = upsample(&base, &ex.gaussian, &ex.region, &cfg).unwrap();
        cfg.execution = Execution::Parallel;
        let b = crate::exec::with_threads(4, || upsample(&base, &ex.gaussian, &ex.region, &cfg).unwrap());
        assert_eq!(a.samples, b.samples);
        assert_eq!(a.report, b.report);
        assert_eq!(a.samples.len(), 2000);
        assert_eq!(a.samples[51].base_index, 1);
        assert_eq!(a.samples[51].j, 1);
    }

    #[test]
    fn samples_jsonl_and_csv() {
        let smp = vec![WeightedSample {
            theta: vec![0.5, -1.0],
            weight: 1.25,
            base_index: 3,
            j: 7,
            boundary_replaced: true,
            beta_perp: None,
        }];
        let mut buf = Vec::new();
        write_samples_jsonl(&mut buf, &smp).unwrap();
        let line = String::from_utf8(buf.clone()).unwrap();
        let v: serde_json::Value = serde_json::from_str(line.trim()).unwrap();
        assert_eq!(v["i"], 3);
        assert_eq!(v["j"], 7);
        assert_eq!(v["w"], 1.25);
        assert_eq!(v["replaced"], true);
        assert_eq!(read_samples_jsonl(std::io::Cursor::new(buf)).unwrap(), smp);
        let mut csv = Vec::new();
        write_samples_csv(&mut csv, &smp).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("theta_0,theta_1,weight\n"));
    }

    #[test]
    fn rejects_bad_input() {
        let ex = examples::parabola();
        assert!(upsample(&[], &ex.gaussian, &ex.region, &UpsampleConfig::new(1, 0)).is_err());
        let base = build_base_chain(&[vec![0.0]], &ex.model, &ex.region, &CompactnessConfig::default(), Execution::Sequential)
            .unwrap();
        assert!(upsample(&base, &ex.gaussian, &ex.region, &UpsampleConfig::new(0, 0)).is_err());
        let g = AmbientGaussian::new(DVector::from_vec(vec![1.0, 2.0]), DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0])))
            .unwrap();
        assert!(upsample(&base, &g, &ex.region, &UpsampleConfig::new(1, 0)).is_err());
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use crate::compactness::CompactnessConfig;
    use crate::examples;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn weights_positive_and_bounded(x in -1.9f64..1.9, b0 in -5.0f64..5.0, b1 in -5.0f64..5.0, eps in 0.01f64..1.0) {
            let ex = examples::parabola();
            let e = BaseChainEntry::evaluate(&ex.model, &[x], &ex.region, &CompactnessConfig::with_epsilon(eps)).unwrap();
            let beta = DVector::from_vec(vec![b0, b1]);
            let w = weight(&e, &pushforward(&e, &project_pullback(&e, &beta)), &ex.gaussian.beta_star).unwrap();
            prop_assert!(w > 0.0);
            prop_assert!(w <= weight_normalizer(e.compactness, 1) * (1.0 + 1e-12));
        }

        #[test]
        fn pullback_of_pushforward_is_identity(x in -1.9f64..1.9, t in -1.9f64..1.9) {
            let ex = examples::parabola();
            let e = BaseChainEntry::evaluate(&ex.model, &[x], &ex.region, &CompactnessConfig::default()).unwrap();
            let th = DVector::from_vec(vec![t]);
            prop_assert!((project_pullback(&e, &pushforward(&e, &th)) - th).amax() < 1e-10);
        }
    }
}
