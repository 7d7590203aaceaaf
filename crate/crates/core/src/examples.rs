//! Built-in models: parabola, Klein bottles, reparametrized parabola, beta
//! distribution and a synthetic high-dimensional embedding.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::compactness::SamplingRegion;
use crate::error::{Error, Result};
use crate::geometry::{AmbientGaussian, Embedding, Hessian, ManifoldModel};

/// A ready-to-run problem.
#[derive(Clone, Debug)]
pub struct Example {
    pub name: String,
    pub model: ManifoldModel,
    pub gaussian: AmbientGaussian,
    pub region: SamplingRegion,
}

/// Named example with its parameters, as used in run configurations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum ExampleSpec {
    Parabola,
    Klein {
        #[serde(default)]
        rotation_seed: u64,
    },
    Reparabola,
    Beta {
        a: f64,
        b: f64,
    },
    SyntheticHighd(SyntheticParams),
}

impl ExampleSpec {
    pub fn build(&self) -> Result<Example> {
        match self {
            ExampleSpec::Parabola => Ok(parabola()),
            ExampleSpec::Klein { rotation_seed } => Ok(klein(*rotation_seed)),
            ExampleSpec::Reparabola => Ok(reparabola()),
            ExampleSpec::Beta { a, b } => beta(*a, *b),
            ExampleSpec::SyntheticHighd(p) => synthetic_highd(p),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ExampleSpec::Parabola => "parabola",
            ExampleSpec::Klein { .. } => "klein",
            ExampleSpec::Reparabola => "reparabola",
            ExampleSpec::Beta { .. } => "beta",
            ExampleSpec::SyntheticHighd(_) => "synthetic_highd",
        }
    }
}

/// Names and one-line descriptions, for `list-examples`.
pub const CATALOGUE: &[(&str, &str)] = &[
    ("parabola", "α(x) = (x, x²), β* = (1, 2), x ∈ [-3, 3]; s = 1, d = 2"),
    (
        "klein",
        "rotated Klein-bottle family in R⁵, (r, ψ, φ) ∈ [2, 8] × [0, 2π]²; s = 3, d = 5 (rotation_seed)",
    ),
    (
        "reparabola",
        "α(ξ) = (√(ξ⁴ - 3ξ² - 2ξ + 5), 0), β* = 0; flat image with singular metric points; no Hessian",
    ),
    ("beta", "beta(a, b) density as a signed-metric restricted Gaussian on [δ, 1-δ]; s = 1, d = 3 (a, b)"),
    (
        "synthetic_highd",
        "α(θ) = Aθ + Σ b_k sin(ω_k·θ + φ_k) on [-1, 1]^s; default s = 2, d = 170 (s, d, seed, amplitude, terms)",
    ),
];

struct Parabola;

impl Embedding for Parabola {
    fn param_dim(&self) -> usize {
        1
    }
    fn ambient_dim(&self) -> usize {
        2
    }
    fn map(&self, t: &[f64]) -> Result<DVector<f64>> {
        Ok(DVector::from_vec(vec![t[0], t[0] * t[0]]))
    }
    fn jacobian(&self, t: &[f64]) -> Option<DMatrix<f64>> {
        Some(DMatrix::from_column_slice(2, 1, &[1.0, 2.0 * t[0]]))
    }
    fn hessian(&self, _t: &[f64]) -> Option<Hessian> {
        let mut h = Hessian::zeros(2, 1);
        h.set(1, 0, 0, 2.0);
        Some(h)
    }
    fn has_hessian(&self) -> bool {
        true
    }
}

pub fn parabola() -> Example {
    Example {
        name: "parabola".into(),
        model: ManifoldModel::new(Parabola).expect("valid dimensions"),
        gaussian: AmbientGaussian::identity(DVector::from_vec(vec![1.0, 2.0])),
        region: SamplingRegion::new(vec![-3.0], vec![3.0]).expect("valid region"),
    }
}

/// Unnormalized parabola log-density `-½(x⁴ - 3x² - 2x + 5)`.
pub fn parabola_log_density(x: f64) -> f64 {
    -0.5 * (x.powi(4) - 3.0 * x * x - 2.0 * x + 5.0)
}

struct Klein {
    rotation: DMatrix<f64>,
}

impl Klein {
    fn raw_map(t: &[f64]) -> DVector<f64> {
        let (r, psi, phi) = (t[0], t[1], t[2]);
        let ring = 1.0 + r * psi.cos();
        DVector::from_vec(vec![
            0.5 * ring * phi.cos(),
            0.5 * ring * phi.sin(),
            0.5 * r * psi.sin() * (0.5 * phi).cos(),
            0.5 * r * psi.sin() * (0.5 * phi).sin(),
            0.0,
        ])
    }

    fn raw_jacobian(t: &[f64]) -> DMatrix<f64> {
        let (r, psi, phi) = (t[0], t[1], t[2]);
        let (sp, cp) = psi.sin_cos();
        let (sf, cf) = phi.sin_cos();
        let (sh, ch) = (0.5 * phi).sin_cos();
        let ring = 1.0 + r * cp;
        DMatrix::from_row_slice(
            5,
            3,
            &[
                0.5 * cp * cf,
                -0.5 * r * sp * cf,
                -0.5 * ring * sf,
                0.5 * cp * sf,
                -0.5 * r * sp * sf,
                0.5 * ring * cf,
                0.5 * sp * ch,
                0.5 * r * cp * ch,
                -0.25 * r * sp * sh,
                0.5 * sp * sh,
                0.5 * r * cp * sh,
                0.25 * r * sp * ch,
                0.0,
                0.0,
                0.0,
            ],
        )
    }

    fn raw_hessian(t: &[f64]) -> Hessian {
        let (r, psi, phi) = (t[0], t[1], t[2]);
        let (sp, cp) = psi.sin_cos();
        let (sf, cf) = phi.sin_cos();
        let (sh, ch) = (0.5 * phi).sin_cos();
        let ring = 1.0 + r * cp;
        // Upper triangle per component: (rr, rψ, rφ, ψψ, ψφ, φφ).
        let rows: [[f64; 6]; 4] = [
            [0.0, -0.5 * sp * cf, -0.5 * cp * sf, -0.5 * r * cp * cf, 0.5 * r * sp * sf, -0.5 * ring * cf],
            [0.0, -0.5 * sp * sf, 0.5 * cp * cf, -0.5 * r * cp * sf, -0.5 * r * sp * cf, -0.5 * ring * sf],
            [0.0, 0.5 * cp * ch, -0.25 * sp * sh, -0.5 * r * sp * ch, -0.25 * r * cp * sh, -0.125 * r * sp * ch],
            [0.0, 0.5 * cp * sh, 0.25 * sp * ch, -0.5 * r * sp * sh, 0.25 * r * cp * ch, -0.125 * r * sp * sh],
        ];
        let pairs = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)];
        let mut h = Hessian::zeros(5, 3);
        for (nu, row) in rows.iter().enumerate() {
            for (k, &(a, b)) in pairs.iter().enumerate() {
                h.set(nu, a, b, row[k]);
            }
        }
        h
    }
}

impl Embedding for Klein {
    fn param_dim(&self) -> usize {
        3
    }
    fn ambient_dim(&self) -> usize {
        5
    }
    fn map(&self, t: &[f64]) -> Result<DVector<f64>> {
        Ok(&self.rotation * Self::raw_map(t))
    }
    fn jacobian(&self, t: &[f64]) -> Option<DMatrix<f64>> {
        Some(&self.rotation * Self::raw_jacobian(t))
    }
    fn hessian(&self, t: &[f64]) -> Option<Hessian> {
        Some(Self::raw_hessian(t).left_mul(&self.rotation))
    }
    fn has_hessian(&self) -> bool {
        true
    }
}

/// Deterministic rotation in SO(n): QR of a seeded standard-normal matrix
/// with the R factor's diagonal made positive.
pub fn seeded_rotation(n: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = a.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for k in 0..n {
        if r[(k, k)] < 0.0 {
            q.column_mut(k).neg_mut();
        }
    }
    if q.determinant() < 0.0 {
        q.column_mut(n - 1).neg_mut();
    }
    q
}

pub fn klein(rotation_seed: u64) -> Example {
    let rotation = seeded_rotation(5, rotation_seed);
    let beta_star = &rotation * Klein::raw_map(&[3.0, PI / 4.0, PI / 2.0]);
    Example {
        name: "klein".into(),
        model: ManifoldModel::new(Klein { rotation }).expect("valid dimensions"),
        gaussian: AmbientGaussian::identity(beta_star),
        region: SamplingRegion::new(vec![2.0, 0.0, 0.0], vec![8.0, 2.0 * PI, 2.0 * PI]).expect("valid region"),
    }
}

struct Reparabola;

impl Reparabola {
    fn radicand(x: f64) -> f64 {
        x.powi(4) - 3.0 * x * x - 2.0 * x + 5.0
    }
}

impl Embedding for Reparabola {
    fn param_dim(&self) -> usize {
        1
    }
    fn ambient_dim(&self) -> usize {
        2
    }
    fn map(&self, t: &[f64]) -> Result<DVector<f64>> {
        let g = Self::radicand(t[0]);
        if !(g >= 0.0) {
            return Err(Error::Numeric(format!("negative radicand {g} at ξ = {}", t[0])));
        }
        Ok(DVector::from_vec(vec![g.sqrt(), 0.0]))
    }
    fn jacobian(&self, t: &[f64]) -> Option<DMatrix<f64>> {
        let x = t[0];
        let a1 = Self::radicand(x).sqrt();
        Some(DMatrix::from_column_slice(2, 1, &[(2.0 * x.powi(3) - 3.0 * x - 1.0) / a1, 0.0]))
    }
}

pub fn reparabola() -> Example {
    Example {
        name: "reparabola".into(),
        model: ManifoldModel::new(Reparabola).expect("valid dimensions"),
        gaussian: AmbientGaussian::identity(DVector::zeros(2)),
        region: SamplingRegion::new(vec![-3.0], vec![3.0]).expect("valid region"),
    }
}

/// Stationary points of the parabola density, where the reparametrized
/// metric vanishes: `ξ = -1, (1 ± √3)/2`.
pub fn reparabola_singular_points() -> [f64; 3] {
    let r3 = 3f64.sqrt();
    [-1.0, 0.5 * (1.0 - r3), 0.5 * (1.0 + r3)]
}

struct Beta {
    a: f64,
    b: f64,
}

impl Beta {
    /// `h_k`, `h_k'`, `h_k''` for the three radicands.
    fn radicands(&self, x: f64) -> [(f64, f64, f64); 3] {
        let y = 1.0 - x;
        [
            (
                -2.0 * (x.ln() + y.ln()),
                -2.0 / x + 2.0 / y,
                2.0 / (x * x) + 2.0 / (y * y),
            ),
            (-2.0 * self.a * x.ln(), -2.0 * self.a / x, 2.0 * self.a / (x * x)),
            (-2.0 * self.b * y.ln(), 2.0 * self.b / y, 2.0 * self.b / (y * y)),
        ]
    }
}

impl Embedding for Beta {
    fn param_dim(&self) -> usize {
        1
    }
    fn ambient_dim(&self) -> usize {
        3
    }
    fn map(&self, t: &[f64]) -> Result<DVector<f64>> {
        let x = t[0];
        if !(x > 0.0 && x < 1.0) {
            return Err(Error::Numeric(format!("beta map undefined at ξ = {x}")));
        }
        Ok(DVector::from_iterator(3, self.radicands(x).iter().map(|(h, _, _)| h.sqrt())))
    }
    fn jacobian(&self, t: &[f64]) -> Option<DMatrix<f64>> {
        let v: Vec<f64> = self
            .radicands(t[0])
            .iter()
            .map(|(h, h1, _)| h1 / (2.0 * h.sqrt()))
            .collect();
        Some(DMatrix::from_column_slice(3, 1, &v))
    }
    fn hessian(&self, t: &[f64]) -> Option<Hessian> {
        let v: Vec<f64> = self
            .radicands(t[0])
            .iter()
            .map(|(h, h1, h2)| {
                let u = h.sqrt();
                h2 / (2.0 * u) - h1 * h1 / (4.0 * u * u * u)
            })
            .collect();
        Hessian::from_vec(3, 1, v).ok()
    }
    fn has_hessian(&self) -> bool {
        true
    }
}

pub const BETA_DELTA: f64 = 1e-6;

pub fn beta(a: f64, b: f64) -> Result<Example> {
    if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) {
        return Err(Error::invalid(format!("beta shape parameters must be positive, got ({a}, {b})")));
    }
    let model = ManifoldModel::new(Beta { a, b })?.with_signature(vec![-1.0, 1.0, 1.0])?;
    Ok(Example {
        name: "beta".into(),
        model,
        gaussian: AmbientGaussian::identity(DVector::zeros(3)),
        region: SamplingRegion::new(vec![BETA_DELTA], vec![1.0 - BETA_DELTA])?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticParams {
    #[serde(default = "default_s")]
    pub s: usize,
    #[serde(default = "default_d")]
    pub d: usize,
    #[serde(default)]
    pub seed: u64,
    /// Scale of the sinusoidal terms; 0 gives an affine map.
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
    #[serde(default = "default_terms")]
    pub terms: usize,
}

fn default_s() -> usize {
    2
}
fn default_d() -> usize {
    170
}
fn default_amplitude() -> f64 {
    0.3
}
fn default_terms() -> usize {
    32
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self {
            s: default_s(),
            d: default_d(),
            seed: 0,
            amplitude: default_amplitude(),
            terms: default_terms(),
        }
    }
}

struct Synthetic {
    linear: DMatrix<f64>,
    /// d × K amplitudes.
    amplitudes: DMatrix<f64>,
    /// K × s frequencies.
    frequencies: DMatrix<f64>,
    phases: DVector<f64>,
}

impl Synthetic {
    fn arguments(&self, t: &[f64]) -> DVector<f64> {
        &self.frequencies * DVector::from_column_slice(t) + &self.phases
    }
}

impl Embedding for Synthetic {
    fn param_dim(&self) -> usize {
        self.linear.ncols()
    }
    fn ambient_dim(&self) -> usize {
        self.linear.nrows()
    }
    fn map(&self, t: &[f64]) -> Result<DVector<f64>> {
        let theta = DVector::from_column_slice(t);
        let sines = self.arguments(t).map(f64::sin);
        Ok(&self.linear * theta + &self.amplitudes * sines)
    }
    fn jacobian(&self, t: &[f64]) -> Option<DMatrix<f64>> {
        let cos = self.arguments(t).map(f64::cos);
        let weighted = DMatrix::from_fn(self.frequencies.nrows(), self.frequencies.ncols(), |k, mu| {
            cos[k] * self.frequencies[(k, mu)]
        });
        Some(&self.linear + &self.amplitudes * weighted)
    }
    fn hessian(&self, t: &[f64]) -> Option<Hessian> {
        let sin = self.arguments(t).map(f64::sin);
        let (d, s) = self.linear.shape();
        let mut h = Hessian::zeros(d, s);
        for mu in 0..s {
            for mu2 in mu..s {
                let coef = DVector::from_fn(sin.len(), |k, _| {
                    -sin[k] * self.frequencies[(k, mu)] * self.frequencies[(k, mu2)]
                });
                let col = &self.amplitudes * coef;
                for nu in 0..d {
                    h.set(nu, mu, mu2, col[nu]);
                }
            }
        }
        Some(h)
    }
    fn has_hessian(&self) -> bool {
        true
    }
}

/// Seeded smooth embedding `Aθ + Σ_k b_k sin(ω_k·θ + φ_k)` on `[-1, 1]^s`
/// with `β* = α(0)`.
///
/// `A` has N(0, 100/d) entries, so the metric is close to `100·I` for any d;
/// `b_k` entries are N(0, 100·amplitude²/d), `ω_k` entries N(0, 4) and
/// phases N(0, π²).
pub fn synthetic_highd(p: &SyntheticParams) -> Result<Example> {
    if p.s == 0 || p.d <= p.s {
        return Err(Error::invalid(format!("synthetic model needs d > s ≥ 1, got s = {}, d = {}", p.s, p.d)));
    }
    if !(p.amplitude >= 0.0 && p.amplitude.is_finite()) {
        return Err(Error::invalid("synthetic amplitude must be finite and non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut normal = || rng.sample::<f64, _>(StandardNormal);
    let scale = 1.0 / (p.d as f64).sqrt();
    let linear = DMatrix::from_fn(p.d, p.s, |_, _| normal() * scale * 10.0);
    let amplitudes = DMatrix::from_fn(p.d, p.terms, |_, _| normal() * scale * p.amplitude * 10.0);
    let frequencies = DMatrix::from_fn(p.terms, p.s, |_, _| 2.0 * normal());
    let phases = DVector::from_fn(p.terms, |_, _| PI * normal());
    let emb = Synthetic {
        linear,
        amplitudes,
        frequencies,
        phases,
    };
    let region = SamplingRegion::new(vec![-1.0; p.s], vec![1.0; p.s])?;
    let beta_star = emb.map(&region.centroid())?;
    Ok(Example {
        name: "synthetic_highd".into(),
        model: ManifoldModel::new(emb)?,
        gaussian: AmbientGaussian::identity(beta_star),
        region,
    })
}
