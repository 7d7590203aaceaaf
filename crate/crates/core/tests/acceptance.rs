//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! stochastic criteria use five fixed master seeds and judge the median.

use std::path::PathBuf;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use std::io::Write;
use tangent_upsample::basechain::build_base_chain;
use tangent_upsample::compactness::CompactnessConfig;
use tangent_upsample::config::{load_config, RunConfig};
use tangent_upsample::diagnostics::error_weights;
use tangent_upsample::evaluation::{cluster_effective_sample_size, integrate, weighted_expectation_clustered};
use tangent_upsample::examples::{self, parabola_log_density, reparabola_singular_points, ExampleSpec, SyntheticParams};
use tangent_upsample::exec::{with_threads, Execution};
use tangent_upsample::geometry::check_derivatives;
use tangent_upsample::pipeline::{execute, RunArtifacts};
use tangent_upsample::upsampler::{upsample, write_samples_jsonl, UpsampleConfig};

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

fn config(name: &str, seed: u64, extra: &[(&str, &str)]) -> RunConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(format!("{name}.json"));
    let mut ov = vec![("seed".to_string(), seed.to_string())];
    ov.extend(extra.iter().map(|(k, v)| (k.to_string(), v.to_string())));
    load_config(&path, &ov).unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn run(name: &str, seed: u64, extra: &[(&str, &str)]) -> RunArtifacts {
    execute(&config(name, seed, extra), None).unwrap_or_else(|e| panic!("{name} seed {seed}: {e}"))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn d_h(a: &RunArtifacts) -> (f64, f64) {
    let h = a.evaluation.hellinger.as_ref().expect("reference configured");
    (h.upsampled, h.base)
}

struct Verdicts(Vec<(String, bool)>);

impl Verdicts {
    fn record(&mut self, id: &str, ok: bool, detail: String) {
        // Written to the raw handle so verdicts show without --nocapture.
        let line = format!("[{}] criterion {id}: {detail}\n", if ok { "PASS" } else { "FAIL" });
        let mut out = std::io::stdout().lock();
        let _ = out.write_all(line.as_bytes());
        let _ = out.flush();
        self.0.push((id.to_string(), ok));
    }
}

fn fmt(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.4}")).collect();
    format!("[{}]", parts.join(", "))
}

fn parabola_mean() -> f64 {
    let p = |x: f64| (parabola_log_density(x) - 2.0).exp();
    integrate(|x| x * p(x), -3.0, 3.0, 1e-12) / integrate(p, -3.0, 3.0, 1e-12)
}

fn criterion_1(v: &mut Verdicts) {
    let (mut up, mut base, mut secs) = (Vec::new(), Vec::new(), Vec::new());
    for seed in SEEDS {
        let t = Instant::now();
        let a = run("parabola", seed, &[]);
        secs.push(t.elapsed().as_secs_f64());
        assert_eq!(a.upsampled.report.emitted, 200 * 500);
        let (u, b) = d_h(&a);
        up.push(u);
        base.push(b);
    }
    let (mu, mb, ms) = (median(up.clone()), median(base.clone()), median(secs.clone()));
    v.record(
        "1",
        mu <= 0.08 && mb >= 0.12 && ms < 10.0,
        format!(
            "parabola d_H median {mu:.4} (<= 0.08) {}; base median {mb:.4} (>= 0.12) {}; runtime median {ms:.2}s (< 10s)",
            fmt(&up),
            fmt(&base)
        ),
    );
}

fn criteria_2_3(v: &mut Verdicts) {
    let names = ["parabola_eps0.007", "parabola", "parabola_eps0.7"];
    let truth = parabola_mean();
    let mut dh = vec![Vec::new(); 3];
    let mut bias = vec![Vec::new(); 3];
    let mut delta = vec![Vec::new(); 3];
    let mut ess = Vec::new();
    for seed in SEEDS {
        for (k, name) in names.iter().enumerate() {
            let a = run(name, seed, &[]);
            dh[k].push(d_h(&a).0);
            let e = &a.evaluation.expectations[0];
            bias[k].push((e.e_tau_w - truth).abs());
            delta[k].push(e.delta_e.expect("parabola has a Hessian").abs());
            if k == 0 {
                ess.push(cluster_effective_sample_size(&a.upsampled.samples, |t| t[0]).unwrap() / a.base.len() as f64);
            }
        }
    }
    let med_dh: Vec<f64> = dh.iter().cloned().map(median).collect();
    let med_ess = median(ess.clone());
    v.record(
        "2",
        med_dh.iter().all(|d| *d <= 0.15) && (1.0 / 3.0..=3.0).contains(&med_ess),
        format!(
            "ε = 0.007/0.07/0.7 median d_H {} (each <= 0.15); ε = 0.007 ESS/n median {med_ess:.3} {} (within 3x of 1)",
            fmt(&med_dh),
            fmt(&ess)
        ),
    );
    let med_bias: Vec<f64> = bias.iter().cloned().map(median).collect();
    let med_delta: Vec<f64> = delta.iter().cloned().map(median).collect();
    v.record(
        "3",
        (truth - 0.98).abs() < 0.005
            && med_bias[0] <= 0.1
            && med_bias[2] <= 0.3
            && med_delta[0] < med_delta[1]
            && med_delta[1] < med_delta[2],
        format!(
            "E[x] = {truth:.4}; median |E_q[xw] - E[x]| at ε = 0.007/0.7: {:.4} (<= 0.1), {:.4} (<= 0.3); median |ΔE| {} (increasing)",
            med_bias[0],
            med_bias[2],
            fmt(&med_delta)
        ),
    );
}

fn criterion_4(v: &mut Verdicts) {
    let t = Instant::now();
    let (mut s1, mut s2, mut b1) = (Vec::new(), Vec::new(), Vec::new());
    for seed in SEEDS {
        let a1 = run("klein_s1", seed, &[]);
        let a2 = run("klein_s2", seed, &[]);
        assert_eq!(a1.reference, a2.reference, "S1 and S2 share their reference chain");
        assert!(a1.upsampled.report.boundary_replaced > 0);
        assert_eq!(a1.upsampled.report.emitted, 100_000);
        s1.push(d_h(&a1).0);
        b1.push(d_h(&a1).1);
        s2.push(d_h(&a2).0);
    }
    let secs = t.elapsed().as_secs_f64();
    let (m1, m2, mb) = (median(s1.clone()), median(s2.clone()), median(b1.clone()));
    v.record(
        "4",
        m2 < m1 && m1 < mb && (m1 - 0.41).abs() <= 0.15 && (m2 - 0.33).abs() <= 0.15 && secs < 300.0,
        format!(
            "Klein median d_H S1 {m1:.4} {} S2 {m2:.4} {} B1 {mb:.4} {} (S2 < S1 < B1; S1 0.41±0.15, S2 0.33±0.15); {secs:.1}s for all seeds (< 300s)",
            fmt(&s1),
            fmt(&s2),
            fmt(&b1)
        ),
    );
}

fn criterion_5(v: &mut Verdicts) {
    let mut ok = true;
    let mut parts = Vec::new();
    for name in ["beta_0.8_0.8", "beta_2_4"] {
        let (mut up, mut base) = (Vec::new(), Vec::new());
        for seed in SEEDS {
            let (u, b) = d_h(&run(name, seed, &[]));
            up.push(u);
            base.push(b);
        }
        let every = up.iter().zip(&base).all(|(u, b)| u < b);
        let m = median(up.clone());
        ok &= m <= 0.06 && every;
        parts.push(format!("{name} median d_H {m:.4} {} vs base {} (<= 0.06, below base every seed: {every})", fmt(&up), fmt(&base)));
    }
    v.record("5", ok, parts.join("; "));
}

fn criterion_6(v: &mut Verdicts) {
    let (mut dh, mut flagged) = (Vec::new(), Vec::new());
    for seed in SEEDS {
        let a = run("reparabola", seed, &[]);
        dh.push(d_h(&a).0);
        // Same chain with base points placed on the singular points.
        let mut chain: Vec<Vec<f64>> = a.base.iter().map(|e| e.theta.as_slice().to_vec()).collect();
        let sing = reparabola_singular_points();
        for (k, xs) in sing.iter().enumerate() {
            chain[k * 50] = vec![*xs];
        }
        let b = execute(&config("reparabola", seed, &[]), Some(chain)).expect("no crash at singular points");
        assert_eq!(b.upsampled.report.emitted, 200 * 500);
        flagged.push(b.upsampled.report.flagged_entries as f64);
    }
    let m = median(dh.clone());
    let min_flag = flagged.iter().cloned().fold(f64::INFINITY, f64::min);
    v.record(
        "6",
        m <= 0.09 && min_flag >= 1.0,
        format!("reparabola median d_H {m:.4} {} (<= 0.09); flagged entries with injected ξ_s {} (>= 1)", fmt(&dh), fmt(&flagged)),
    );
}

fn criterion_7(v: &mut Verdicts) {
    let mut worst = Vec::new();
    let mut detail = Vec::new();
    for seed in SEEDS {
        let mut cfg = config("synthetic_affine", seed, &[]);
        cfg.evaluation.test_functions.clear();
        let ex = cfg.example.build().unwrap();
        let a_mat = ex.model.jacobian(&[0.0, 0.0]).unwrap();
        let offset = ex.model.map(&[0.0, 0.0]).unwrap();
        // Off-centre target so the posterior mean is not zero.
        let theta0 = DVector::from_vec(vec![0.3, -0.2]);
        let mut art = {
            let mut ex2 = cfg.example.build().unwrap();
            ex2.gaussian.beta_star = &offset + &a_mat * &theta0;
            let target = tangent_upsample::basechain::TargetDensity::new(&ex2.model, &ex2.gaussian, &ex2.region);
            let mut chain_cfg = cfg.chain.clone();
            chain_cfg.seed = seed;
            let thetas = tangent_upsample::basechain::metropolis_hastings(&target, &chain_cfg).unwrap().samples;
            let base = build_base_chain(&thetas, &ex2.model, &ex2.region, &cfg.compactness, Execution::Parallel).unwrap();
            let up = upsample(&base, &ex2.gaussian, &ex2.region, &UpsampleConfig::new(cfg.upsample.m, seed)).unwrap();
            (ex2, up)
        };
        // Closed form: N(Γ⁻¹Aᵀ(β* - b), Γ⁻¹) with Γ = AᵀA.
        let gamma = a_mat.transpose() * &a_mat;
        let cov: DMatrix<f64> = gamma.clone().try_inverse().unwrap();
        let mean = &cov * a_mat.transpose() * (&art.0.gaussian.beta_star - &offset);
        let truths = [mean[0], mean[1], cov[(0, 1)] + mean[0] * mean[1]];
        let taus: [&dyn Fn(&[f64]) -> f64; 3] = [&|t| t[0], &|t| t[1], &|t| t[0] * t[1]];
        let samples = std::mem::take(&mut art.1.samples);
        let mut z = Vec::new();
        for (tau, truth) in taus.iter().zip(truths) {
            let est = weighted_expectation_clustered(&samples, tau).unwrap();
            z.push((est.mean - truth).abs() / est.mc_error);
        }
        worst.push(z.iter().cloned().fold(0.0, f64::max));
        detail.push(fmt(&z));
    }
    let m = median(worst.clone());
    v.record(
        "7",
        m <= 3.0,
        format!("affine synthetic: median over seeds of max |E_q - exact|/SE across θ₁, θ₂, θ₁θ₂ = {m:.3} (<= 3); per seed {}", detail.join(" ")),
    );
}

fn criterion_8(v: &mut Verdicts) {
    let ex = examples::parabola();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let thetas: Vec<Vec<f64>> = (0..200).map(|_| vec![rng.random_range(-2.5..2.5)]).collect();
    let base = build_base_chain(&thetas, &ex.model, &ex.region, &CompactnessConfig::constant(1e12), Execution::Parallel).unwrap();
    let up = upsample(&base, &ex.gaussian, &ex.region, &UpsampleConfig::new(50, 8)).unwrap();
    let w_dev = up.samples.iter().map(|s| (s.weight - 1.0).abs()).fold(0.0, f64::max);
    let t_dev = up
        .samples
        .iter()
        .map(|s| (s.theta[0] - thetas[s.base_index][0]).abs())
        .fold(0.0, f64::max);

    let affine = ExampleSpec::SyntheticHighd(SyntheticParams {
        amplitude: 0.0,
        ..Default::default()
    })
    .build()
    .unwrap();
    let thetas: Vec<Vec<f64>> = (0..100)
        .map(|_| vec![rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)])
        .collect();
    let base = build_base_chain(&thetas, &affine.model, &affine.region, &CompactnessConfig::with_epsilon(0.1), Execution::Parallel)
        .unwrap();
    let up2 = upsample(&base, &affine.gaussian, &affine.region, &UpsampleConfig::new(50, 9)).unwrap();
    let dw = error_weights(&base, &up2.samples, &affine.gaussian.beta_star, None, Execution::Parallel).unwrap();
    let all_zero = dw.values.iter().all(|x| *x == Some(0.0));
    v.record(
        "8",
        w_dev <= 1e-6 && t_dev <= 1e-5 && all_zero,
        format!("c = 1e12: max |w - 1| {w_dev:.2e} (<= 1e-6), max |θ_ij - θ_i| {t_dev:.2e} (<= 1e-5); H = 0: all Δw exactly 0: {all_zero}"),
    );
}

fn criterion_9(v: &mut Verdicts) {
    let specs = [
        ExampleSpec::Parabola,
        ExampleSpec::Klein { rotation_seed: 0 },
        ExampleSpec::Reparabola,
        ExampleSpec::Beta { a: 0.8, b: 0.8 },
        ExampleSpec::Beta { a: 2.0, b: 4.0 },
        ExampleSpec::SyntheticHighd(SyntheticParams::default()),
    ];
    let mut ok = true;
    let mut parts = Vec::new();
    for spec in specs {
        let ex = spec.build().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let (mut jmax, mut hmax) = (0.0f64, 0.0f64);
        for _ in 0..100 {
            let t: Vec<f64> = ex
                .region
                .lower()
                .iter()
                .zip(ex.region.upper())
                .map(|(l, u)| rng.random_range(*l..*u))
                .collect();
            if spec == ExampleSpec::Reparabola && ex.model.map(&t).is_err() {
                continue;
            }
            let c = check_derivatives(&ex.model, &t, ex.region.lower(), ex.region.upper()).unwrap();
            jmax = jmax.max(c.jacobian_rel_err);
            hmax = hmax.max(c.hessian_rel_err.unwrap_or(0.0));
        }
        ok &= jmax <= 1e-5 && hmax <= 1e-4;
        parts.push(format!("{} J {jmax:.1e} H {hmax:.1e}", spec.name()));
    }
    v.record("9", ok, format!("finite-difference checks at 100 points (J <= 1e-5, H <= 1e-4): {}", parts.join(", ")));
}

fn criterion_10(v: &mut Verdicts) {
    let mut ok = true;
    let mut parts = Vec::new();
    for name in ["parabola", "klein_s2", "beta_2_4"] {
        let cfg = config(name, 3, &[]);
        let bytes = |threads: usize, exec: Execution| {
            let mut cfg = cfg.clone();
            cfg.upsample.execution = exec;
            let a = with_threads(threads, || execute(&cfg, None).unwrap());
            let mut buf = Vec::new();
            write_samples_jsonl(&mut buf, &a.upsampled.samples).unwrap();
            buf
        };
        let one = bytes(1, Execution::Parallel);
        let four = bytes(4, Execution::Parallel);
        let seq = bytes(1, Execution::Sequential);
        let same = one == four && one == seq;
        ok &= same;
        parts.push(format!("{name}: {same}"));
    }
    v.record("10", ok, format!("byte-identical sample JSONL under 1 vs 4 threads and sequential mode: {}", parts.join(", ")));
}

#[test]
fn acceptance() {
    let mut v = Verdicts(Vec::new());
    criterion_1(&mut v);
    criteria_2_3(&mut v);
    criterion_4(&mut v);
    criterion_5(&mut v);
    criterion_6(&mut v);
    criterion_7(&mut v);
    criterion_8(&mut v);
    criterion_9(&mut v);
    criterion_10(&mut v);
    let failed: Vec<&str> = v.0.iter().filter(|(_, ok)| !ok).map(|(id, _)| id.as_str()).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
