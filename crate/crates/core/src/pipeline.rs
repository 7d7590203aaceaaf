//! End-to-end runs: chain, decorate, upsample, evaluate, persist.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::basechain::{
    build_base_chain, downsample, metropolis_hastings, read_chain_jsonl, write_chain_jsonl, BaseChainEntry,
    ChainConfig, TargetDensity,
};
use crate::config::{ReferenceSpec, RunConfig, CONFIG_VERSION};
use crate::diagnostics::{error_weights, expectation_error, prior_reweight, ErrorWeights};
use crate::error::{Error, Result};
use crate::evaluation::{
    density_histogram_1d, gaussian_blur, hellinger, point_histogram, weighted_expectation_clustered,
    weighted_histogram, HistogramND,
};
use crate::examples::Example;
use crate::geometry::CallSnapshot;
use crate::rng::{derive_seed, tags};
use crate::upsampler::{read_samples_jsonl, upsample, write_samples_csv, write_samples_jsonl, UpsampleReport, Upsampled, WeightedSample};

pub const BASE_CHAIN_FILE: &str = "base_chain.jsonl";
pub const SAMPLES_FILE: &str = "samples.jsonl";
pub const SAMPLES_CSV_FILE: &str = "samples.csv";
pub const HISTOGRAM_FILE: &str = "histogram.csv";
pub const BASE_HISTOGRAM_FILE: &str = "histogram_base.csv";
pub const REFERENCE_FILE: &str = "reference.csv";
pub const BLURRED_FILE: &str = "histogram_blurred.csv";
pub const REPORT_FILE: &str = "report.json";
pub const CONFIG_FILE: &str = "config.json";

/// Package version, with the git revision when it was known at build time.
pub fn source_version() -> String {
    match option_env!("TANGENT_UPSAMPLE_GIT_REV") {
        Some(rev) if !rev.is_empty() => format!("{}+{rev}", env!("CARGO_PKG_VERSION")),
        _ => env!("CARGO_PKG_VERSION").to_string(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainSummary {
    pub acceptance_rate: f64,
    pub retained: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub chain_ms: f64,
    pub decorate_ms: f64,
    pub upsample_ms: f64,
    pub reference_ms: f64,
    pub evaluate_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginalDistance {
    pub axes: Vec<usize>,
    pub upsampled: f64,
    pub base: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HellingerReport {
    pub upsampled: f64,
    pub base: f64,
    pub marginals: Vec<MarginalDistance>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpectationReport {
    pub name: String,
    #[serde(rename = "E_tau_w")]
    pub e_tau_w: f64,
    /// Cluster-robust Monte Carlo error (clusters are base entries).
    pub mc_error: f64,
    pub ess: f64,
    #[serde(rename = "Delta_E")]
    pub delta_e: Option<f64>,
    pub base_mean: f64,
}

/// Everything computed from the base chain, the samples and the reference.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub histogram: HistogramND,
    pub base_histogram: HistogramND,
    pub marginals: Vec<(Vec<usize>, HistogramND, HistogramND)>,
    pub hellinger: Option<HellingerReport>,
    pub expectations: Vec<ExpectationReport>,
    pub error_weights_flagged: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub version: u32,
    pub source_version: String,
    pub seed: u64,
    pub example: String,
    pub n_base: usize,
    pub m: usize,
    pub emitted: usize,
    pub boundary_replacement_fraction: f64,
    pub upsample: UpsampleReport,
    pub chain: Option<ChainSummary>,
    pub hellinger: Option<HellingerReport>,
    pub expectations: Vec<ExpectationReport>,
    pub error_weights_flagged: Option<usize>,
    pub timings_ms: Timings,
    /// Model evaluations made while decorating the base chain.
    pub calls: CallSnapshot,
}

pub struct RunArtifacts {
    pub config: RunConfig,
    pub example: Example,
    pub chain: Option<ChainSummary>,
    pub base: Vec<BaseChainEntry>,
    pub upsampled: Upsampled,
    pub reference: Option<HistogramND>,
    pub evaluation: Evaluation,
    pub timings: Timings,
    pub calls: CallSnapshot,
}

impl RunArtifacts {
    pub fn report(&self) -> RunReport {
        RunReport {
            version: CONFIG_VERSION,
            source_version: source_version(),
            seed: self.config.seed,
            example: self.example.name.clone(),
            n_base: self.base.len(),
            m: self.config.upsample.m,
            emitted: self.upsampled.report.emitted,
            boundary_replacement_fraction: self.upsampled.report.replacement_fraction(),
            upsample: self.upsampled.report.clone(),
            chain: self.chain,
            hellinger: self.evaluation.hellinger.clone(),
            expectations: self.evaluation.expectations.clone(),
            error_weights_flagged: self.evaluation.error_weights_flagged,
            timings_ms: self.timings,
            calls: self.calls,
        }
    }
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Copy of the config with stage seeds derived from the master seed.
pub fn seeded(cfg: &RunConfig) -> RunConfig {
    let mut out = cfg.clone();
    out.chain.seed = derive_seed(cfg.seed, tags::CHAIN);
    out.upsample.seed = derive_seed(cfg.seed, tags::UPSAMPLE);
    if let ReferenceSpec::Chain(c) = &mut out.evaluation.reference {
        c.seed = derive_seed(cfg.seed, tags::REFERENCE);
    }
    out
}

/// Parameter vectors from a base-chain JSONL file.
pub fn read_chain_thetas(path: &Path) -> Result<Vec<Vec<f64>>> {
    let file = File::open(path).map_err(|e| Error::Config(format!("cannot open chain {}: {e}", path.display())))?;
    Ok(read_chain_jsonl(BufReader::new(file))?.into_iter().map(|r| r.theta).collect())
}

fn run_chain(chain: &ChainConfig, example: &Example) -> Result<(Vec<Vec<f64>>, ChainSummary)> {
    let target = TargetDensity::new(&example.model, &example.gaussian, &example.region);
    let out = metropolis_hastings(&target, chain)?;
    let summary = ChainSummary {
        acceptance_rate: out.acceptance_rate,
        retained: out.samples.len(),
    };
    Ok((out.samples, summary))
}

fn thin_to_base(chain: &ChainConfig, retained: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    match chain.n_base {
        Some(n) => downsample(retained, n),
        None => Ok(retained.to_vec()),
    }
}

/// Reference histogram over the full parameter box, normalized.
/// `retained` is the chain the base chain was downsampled from.
pub fn reference_histogram(
    cfg: &RunConfig,
    example: &Example,
    retained: Option<&[Vec<f64>]>,
) -> Result<Option<HistogramND>> {
    let region = &example.region;
    let bins = cfg.evaluation.bins;
    let axes: Vec<usize> = (0..region.dim()).collect();
    let hist = match &cfg.evaluation.reference {
        ReferenceSpec::None => return Ok(None),
        ReferenceSpec::Quadrature => {
            if region.dim() != 1 {
                return Err(Error::Config("quadrature reference needs a one-dimensional model".into()));
            }
            let lp = |x: f64| {
                example
                    .model
                    .log_density(&example.gaussian, &[x])
                    .unwrap_or(f64::NEG_INFINITY)
            };
            density_histogram_1d(lp, region, bins)?
        }
        ReferenceSpec::Chain(chain) => {
            let (retained, _) = run_chain(chain, example)?;
            let thetas = thin_to_base(chain, &retained)?;
            point_histogram(&thetas, None, region, bins, None, cfg.upsample.execution)?.normalized()?
        }
        ReferenceSpec::Retained => {
            let thetas = retained.ok_or_else(|| Error::Config("no retained chain to use as reference".into()))?;
            point_histogram(thetas, None, region, bins, None, cfg.upsample.execution)?.normalized()?
        }
        ReferenceSpec::Histogram { path } => {
            let file =
                File::open(path).map_err(|e| Error::Config(format!("cannot open reference {}: {e}", path.display())))?;
            let h = HistogramND::read_csv(BufReader::new(file))?;
            if !h.same_binning(&HistogramND::empty(region, bins, &axes)?) {
                return Err(Error::Config(format!(
                    "reference {} does not match the configured binning",
                    path.display()
                )));
            }
            if h.normalized {
                h
            } else {
                h.normalized()?
            }
        }
    };
    Ok(Some(hist))
}

/// Histograms, distances and expectations for a finished upsampling.
pub fn evaluate(
    cfg: &RunConfig,
    example: &Example,
    base: &[BaseChainEntry],
    samples: &[WeightedSample],
    reference: Option<&HistogramND>,
) -> Result<Evaluation> {
    let ev = &cfg.evaluation;
    let exec = cfg.upsample.execution;
    let region = &example.region;

    let prior_weights = ev.prior.as_ref().map(|p| prior_reweight(samples, p)).transpose()?;
    let weighted: Vec<WeightedSample> = match &prior_weights {
        Some(w) => samples
            .iter()
            .zip(w)
            .map(|(s, w)| WeightedSample {
                weight: *w,
                ..s.clone()
            })
            .collect(),
        None => samples.to_vec(),
    };

    let histogram = weighted_histogram(&weighted, region, ev.bins, None, exec)?.normalized()?;
    let base_thetas: Vec<Vec<f64>> = base.iter().map(|e| e.theta.as_slice().to_vec()).collect();
    let base_histogram = point_histogram(&base_thetas, None, region, ev.bins, None, exec)?.normalized()?;
    let marginals = ev
        .marginals
        .iter()
        .map(|m| Ok((m.clone(), histogram.marginalize(m)?, base_histogram.marginalize(m)?)))
        .collect::<Result<Vec<_>>>()?;

    let hellinger = match reference {
        Some(r) => Some(HellingerReport {
            upsampled: hellinger(&histogram, r)?,
            base: hellinger(&base_histogram, r)?,
            marginals: marginals
                .iter()
                .map(|(axes, h, b)| {
                    let rm = r.marginalize(axes)?;
                    Ok(MarginalDistance {
                        axes: axes.clone(),
                        upsampled: hellinger(h, &rm)?,
                        base: hellinger(b, &rm)?,
                    })
                })
                .collect::<Result<_>>()?,
        }),
        None => None,
    };

    let errors = if ev.error_weights && !ev.test_functions.is_empty() {
        match error_weights(base, samples, &example.gaussian.beta_star, example.model.signature(), exec) {
            Ok(e) => Some(e),
            Err(Error::NotAvailable(what)) => {
                log::info!("error weights skipped: {what} not available");
                None
            }
            Err(e) => return Err(e),
        }
    } else {
        None
    };
    // Δw is linear in w, so prior reweighting rescales it sample by sample.
    let errors = match (errors, &prior_weights) {
        (Some(e), Some(pw)) => Some(ErrorWeights {
            values: e
                .values
                .iter()
                .zip(samples)
                .zip(pw)
                .map(|((dw, s), w)| dw.map(|dw| if s.weight != 0.0 { dw * w / s.weight } else { 0.0 }))
                .collect(),
            flagged: e.flagged,
        }),
        (e, _) => e,
    };

    let expectations = ev
        .test_functions
        .iter()
        .map(|tf| {
            let tau = |t: &[f64]| tf.eval(t);
            let est = weighted_expectation_clustered(&weighted, tau)?;
            let delta_e = match &errors {
                Some(e) => Some(expectation_error(&weighted, e, tau)?.delta_e),
                None => None,
            };
            let base_mean = base_thetas.iter().map(|t| tau(t)).sum::<f64>() / base_thetas.len() as f64;
            Ok(ExpectationReport {
                name: tf.name(),
                e_tau_w: est.mean,
                mc_error: est.mc_error,
                ess: est.ess,
                delta_e,
                base_mean,
            })
        })
        .collect::<Result<_>>()?;

    Ok(Evaluation {
        histogram,
        base_histogram,
        marginals,
        hellinger,
        expectations,
        error_weights_flagged: errors.map(|e| e.flagged),
    })
}

/// Runs the full pipeline in memory. `external` replaces the
/// Metropolis-Hastings stage with a given chain (before downsampling).
pub fn execute(cfg: &RunConfig, external: Option<Vec<Vec<f64>>>) -> Result<RunArtifacts> {
    cfg.validate()?;
    let cfg = seeded(cfg);
    let example = cfg.example.build().map_err(|e| Error::Config(format!("example: {e}")))?;
    let s = example.model.param_dim();
    cfg.validate_for_dim(s)?;
    let mut timings = Timings::default();

    let t = Instant::now();
    let external = match (external, &cfg.external_chain) {
        (Some(x), _) => Some(x),
        (None, Some(path)) => Some(read_chain_thetas(path)?),
        (None, None) => None,
    };
    let (retained, chain) = match external {
        Some(chain) => {
            if let Some(bad) = chain.iter().position(|t| t.len() != s) {
                return Err(Error::shape(format!(
                    "chain entry {bad} has {} coordinates but the model has s = {s}",
                    chain[bad].len()
                )));
            }
            (chain, None)
        }
        None => {
            let (retained, summary) = run_chain(&cfg.chain, &example)?;
            (retained, Some(summary))
        }
    };
    let thetas = thin_to_base(&cfg.chain, &retained)?;
    timings.chain_ms = ms(t);

    let t = Instant::now();
    let before = example.model.calls();
    let base = build_base_chain(&thetas, &example.model, &example.region, &cfg.compactness, cfg.upsample.execution)?;
    let calls = example.model.calls().since(before);
    timings.decorate_ms = ms(t);
    let mut scales: Vec<f64> = base
        .iter()
        .filter_map(|e| e.lambda_sq.map(|l| l.max(e.kappa.unwrap_or(0.0))))
        .collect();
    if !scales.is_empty() {
        scales.sort_by(f64::total_cmp);
        log::info!(
            "median max(λ², κ) over the base chain is {:.3e}; a conservative ε is at or below this (using ε = {})",
            scales[scales.len() / 2],
            cfg.compactness.epsilon
        );
    }
    let flagged = base.iter().filter(|e| e.is_flagged()).count();
    if flagged > 0 {
        log::warn!("{flagged} of {} base entries are flagged and fall back to their base point", base.len());
    }

    let t = Instant::now();
    let upsampled = upsample(&base, &example.gaussian, &example.region, &cfg.upsample)?;
    timings.upsample_ms = ms(t);

    let t = Instant::now();
    let reference = reference_histogram(&cfg, &example, Some(&retained))?;
    timings.reference_ms = ms(t);

    let t = Instant::now();
    let evaluation = evaluate(&cfg, &example, &base, &upsampled.samples, reference.as_ref())?;
    timings.evaluate_ms = ms(t);

    Ok(RunArtifacts {
        config: cfg,
        example,
        chain,
        base,
        upsampled,
        reference,
        evaluation,
        timings,
        calls,
    })
}

/// Files written into the output directory; removed again unless the run
/// completes.
struct OutputSet {
    dir: PathBuf,
    created: Vec<PathBuf>,
    files: Vec<PathBuf>,
    keep: bool,
}

impl OutputSet {
    fn create(dir: &Path) -> Result<Self> {
        let mut created = Vec::new();
        let mut cur = Some(dir);
        while let Some(p) = cur {
            if p.as_os_str().is_empty() || p.exists() {
                break;
            }
            created.push(p.to_path_buf());
            cur = p.parent();
        }
        fs::create_dir_all(dir)
            .map_err(|e| Error::Config(format!("cannot create output directory {}: {e}", dir.display())))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            created,
            files: Vec::new(),
            keep: false,
        })
    }

    fn write(&mut self, name: &str, body: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
        let path = self.dir.join(name);
        let file = File::create(&path).map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))?;
        self.files.push(path);
        let mut w = BufWriter::new(file);
        body(&mut w)?;
        w.flush()?;
        Ok(())
    }
}

impl Drop for OutputSet {
    fn drop(&mut self) {
        if self.keep {
            return;
        }
        for f in &self.files {
            let _ = fs::remove_file(f);
        }
        for d in &self.created {
            let _ = fs::remove_dir(d);
        }
    }
}

fn marginal_name(axes: &[usize], suffix: &str) -> String {
    let tag: Vec<String> = axes.iter().map(|a| a.to_string()).collect();
    format!("marginal_{}{suffix}.csv", tag.join("_"))
}

/// Writes every output of a run; on failure nothing is left behind.
pub fn persist(art: &RunArtifacts) -> Result<RunReport> {
    let cfg = &art.config;
    let mut out = OutputSet::create(&cfg.output_dir)?;
    let report = art.report();
    out.write(CONFIG_FILE, |w| Ok(serde_json::to_writer_pretty(w, cfg)?))?;
    out.write(BASE_CHAIN_FILE, |w| write_chain_jsonl(w, &art.base))?;
    out.write(SAMPLES_FILE, |w| write_samples_jsonl(w, &art.upsampled.samples))?;
    if cfg.evaluation.samples_csv {
        out.write(SAMPLES_CSV_FILE, |w| write_samples_csv(w, &art.upsampled.samples))?;
    }
    let ev = &art.evaluation;
    out.write(HISTOGRAM_FILE, |w| ev.histogram.write_csv(w))?;
    out.write(BASE_HISTOGRAM_FILE, |w| ev.base_histogram.write_csv(w))?;
    if let Some(r) = &art.reference {
        out.write(REFERENCE_FILE, |w| r.write_csv(w))?;
    }
    for (axes, h, b) in &ev.marginals {
        out.write(&marginal_name(axes, ""), |w| h.write_csv(w))?;
        out.write(&marginal_name(axes, "_base"), |w| b.write_csv(w))?;
        if let Some(r) = &art.reference {
            let rm = r.marginalize(axes)?;
            out.write(&marginal_name(axes, "_reference"), |w| rm.write_csv(w))?;
        }
    }
    if let Some(sigma) = cfg.evaluation.blur_sigma_bins {
        out.write(BLURRED_FILE, |w| gaussian_blur(&ev.histogram, sigma).write_csv(w))?;
    }
    out.write(REPORT_FILE, |w| {
        serde_json::to_writer_pretty(&mut *w, &report)?;
        w.write_all(b"\n")?;
        Ok(())
    })?;
    out.keep = true;
    Ok(report)
}

/// `run`: execute and persist.
pub fn run(cfg: &RunConfig) -> Result<RunReport> {
    persist(&execute(cfg, None)?)
}

/// Decorates and upsamples a stored chain instead of running the sampler.
pub fn upsample_post_hoc(cfg: &RunConfig, chain_path: &Path) -> Result<RunReport> {
    let thetas = read_chain_thetas(chain_path)?;
    persist(&execute(cfg, Some(thetas))?)
}

/// Re-runs the evaluation from the files a run left in its output
/// directory.
pub fn reevaluate(output_dir: &Path) -> Result<(RunConfig, Evaluation)> {
    let open = |name: &str| {
        let p = output_dir.join(name);
        File::open(&p)
            .map(BufReader::new)
            .map_err(|e| Error::Config(format!("cannot open {}: {e}", p.display())))
    };
    let cfg: RunConfig = serde_json::from_reader(open(CONFIG_FILE)?)?;
    let example = cfg.example.build()?;
    let thetas: Vec<Vec<f64>> = read_chain_jsonl(open(BASE_CHAIN_FILE)?)?.into_iter().map(|r| r.theta).collect();
    let base = build_base_chain(&thetas, &example.model, &example.region, &cfg.compactness, cfg.upsample.execution)?;
    let samples = read_samples_jsonl(open(SAMPLES_FILE)?)?;
    let reference = if output_dir.join(REFERENCE_FILE).exists() {
        Some(HistogramND::read_csv(open(REFERENCE_FILE)?)?)
    } else {
        None
    };
    let evaluation = evaluate(&cfg, &example, &base, &samples, reference.as_ref())?;
    Ok((cfg, evaluation))
}

/// Hellinger distance between two histogram CSV files.
pub fn compare_files(a: &Path, b: &Path) -> Result<f64> {
    let load = |p: &Path| {
        let f = File::open(p).map_err(|e| Error::Config(format!("cannot open {}: {e}", p.display())))?;
        HistogramND::read_csv(BufReader::new(f))
    };
    hellinger(&load(a)?, &load(b)?)
}
