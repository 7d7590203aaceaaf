//! Run configuration: a versioned JSON schema with dotted-path overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::basechain::ChainConfig;
use crate::compactness::CompactnessConfig;
use crate::diagnostics::PriorSpec;
use crate::error::{Error, Result};
use crate::examples::ExampleSpec;
use crate::upsampler::UpsampleConfig;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub example: ExampleSpec,
    /// JSONL base chain to upsample instead of running Metropolis-Hastings.
    #[serde(default)]
    pub external_chain: Option<PathBuf>,
    pub chain: ChainConfig,
    pub upsample: UpsampleConfig,
    #[serde(default)]
    pub compactness: CompactnessConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    pub output_dir: PathBuf,
    /// Master seed; chain, upsampling and reference seeds derive from it.
    pub seed: u64,
}

/// Scalar test function τ(θ).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TestFunction {
    Coordinate { index: usize },
    Product { indices: Vec<usize> },
    Power { index: usize, exponent: i32 },
}

impl TestFunction {
    pub fn name(&self) -> String {
        match self {
            TestFunction::Coordinate { index } => format!("theta_{index}"),
            TestFunction::Product { indices } => indices
                .iter()
                .map(|i| format!("theta_{i}"))
                .collect::<Vec<_>>()
                .join("*"),
            TestFunction::Power { index, exponent } => format!("theta_{index}^{exponent}"),
        }
    }

    pub fn eval(&self, theta: &[f64]) -> f64 {
        match self {
            TestFunction::Coordinate { index } => theta[*index],
            TestFunction::Product { indices } => indices.iter().map(|i| theta[*i]).product(),
            TestFunction::Power { index, exponent } => theta[*index].powi(*exponent),
        }
    }

    fn max_index(&self) -> usize {
        match self {
            TestFunction::Coordinate { index } | TestFunction::Power { index, .. } => *index,
            TestFunction::Product { indices } => indices.iter().copied().max().unwrap_or(0),
        }
    }
}

/// Target histogram that distances are measured against.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReferenceSpec {
    #[default]
    None,
    /// Per-bin quadrature of the target density (one-dimensional models).
    Quadrature,
    /// Long Metropolis-Hastings run on the same target.
    Chain(ChainConfig),
    /// Every retained draw of the run's own chain (or of the external
    /// chain), before downsampling to the base chain.
    Retained,
    /// Histogram CSV written by an earlier run.
    Histogram { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    #[serde(default = "default_bins")]
    pub bins: usize,
    /// Extra marginal histograms, each a list of coordinate indices.
    #[serde(default)]
    pub marginals: Vec<Vec<usize>>,
    #[serde(default)]
    pub test_functions: Vec<TestFunction>,
    #[serde(default)]
    pub reference: ReferenceSpec,
    /// Second-order error weights (skipped when the model has no Hessian).
    #[serde(default = "yes")]
    pub error_weights: bool,
    /// Post hoc prior applied to the sample weights before evaluation.
    #[serde(default)]
    pub prior: Option<PriorSpec>,
    /// Writes an extra blurred copy of the histogram for plotting.
    #[serde(default)]
    pub blur_sigma_bins: Option<f64>,
    #[serde(default)]
    pub samples_csv: bool,
}

fn default_bins() -> usize {
    30
}

fn yes() -> bool {
    true
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            bins: default_bins(),
            marginals: Vec::new(),
            test_functions: Vec::new(),
            reference: ReferenceSpec::None,
            error_weights: true,
            prior: None,
            blur_sigma_bins: None,
            samples_csv: false,
        }
    }
}

impl RunConfig {
    /// Checks everything that can be checked without running.
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        let wrap = |what: &str, r: Result<()>| r.map_err(|e| Error::Config(format!("{what}: {e}")));
        wrap("chain", self.chain.validate())?;
        wrap("upsample", self.upsample.validate())?;
        wrap("compactness", self.compactness.validate())?;
        let ev = &self.evaluation;
        if ev.bins == 0 {
            return Err(Error::Config("evaluation.bins must be at least 1".into()));
        }
        if let ReferenceSpec::Chain(c) = &ev.reference {
            wrap("evaluation.reference", c.validate())?;
        }
        if let Some(b) = ev.blur_sigma_bins {
            if !(b > 0.0 && b.is_finite()) {
                return Err(Error::Config("evaluation.blur_sigma_bins must be positive".into()));
            }
        }
        Ok(())
    }

    /// Checks indices against the model's parameter dimension.
    pub fn validate_for_dim(&self, s: usize) -> Result<()> {
        let ev = &self.evaluation;
        if let Some(m) = ev.marginals.iter().find(|m| m.is_empty() || m.iter().any(|i| *i >= s)) {
            return Err(Error::Config(format!("evaluation.marginals entry {m:?} is invalid for s = {s}")));
        }
        if let Some(t) = ev.test_functions.iter().find(|t| t.max_index() >= s) {
            return Err(Error::Config(format!("test function {} refers past s = {s}", t.name())));
        }
        if let Some(init) = &self.chain.initial {
            if init.len() != s {
                return Err(Error::Config(format!("chain.initial has {} entries, s = {s}", init.len())));
            }
        }
        Ok(())
    }
}

/// Sets `path` (dot-separated; numeric segments index arrays) in `root` to
/// `raw`, parsed as JSON when possible and as a string otherwise.
pub fn apply_override(root: &mut Value, path: &str, raw: &str) -> Result<()> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let segments: Vec<&str> = path.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(Error::Config(format!("malformed override path '{path}'")));
    }
    let mut cur = root;
    for (k, seg) in segments.iter().enumerate() {
        let last = k + 1 == segments.len();
        cur = match cur {
            Value::Object(map) => {
                if last {
                    map.insert(seg.to_string(), value);
                    return Ok(());
                }
                map.entry(seg.to_string()).or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let idx: usize = seg
                    .parse()
                    .map_err(|_| Error::Config(format!("'{seg}' in '{path}' must index an array")))?;
                let len = items.len();
                let slot = items
                    .get_mut(idx)
                    .ok_or_else(|| Error::Config(format!("index {idx} in '{path}' out of range (length {len})")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => {
                return Err(Error::Config(format!(
                    "cannot descend into '{seg}' of '{path}': parent is not an object"
                )))
            }
        };
    }
    unreachable!("loop returns on the last segment")
}

/// Splits `key=value`.
pub fn parse_assignment(s: &str) -> Result<(String, String)> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.to_string()))
        .ok_or_else(|| Error::Config(format!("override '{s}' is not of the form path=value")))
}

pub fn config_from_value(mut value: Value, overrides: &[(String, String)]) -> Result<RunConfig> {
    for (path, raw) in overrides {
        apply_override(&mut value, path, raw)?;
    }
    let cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Reads a config file and applies overrides in order.
pub fn load_config(path: &Path, overrides: &[(String, String)]) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    let value: Value =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    config_from_value(value, overrides).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn base() -> Value {
        json!({
            "version": 1,
            "example": {"name": "parabola"},
            "chain": {"n_steps": 4000, "burn_in": 0, "thinning": 20},
            "upsample": {"m": 500},
            "compactness": {"epsilon": 0.07},
            "evaluation": {"bins": 100, "reference": {"kind": "quadrature"},
                           "test_functions": [{"kind": "coordinate", "index": 0}]},
            "output_dir": "out/parabola",
            "seed": 1
        })
    }

    #[test]
    fn parses_and_validates() {
        let cfg = config_from_value(base(), &[]).unwrap();
        assert_eq!(cfg.upsample.m, 500);
        assert_eq!(cfg.evaluation.reference, ReferenceSpec::Quadrature);
        assert!(cfg.evaluation.error_weights);
        let back: RunConfig = serde_json::from_value(serde_json::to_value(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_apply_in_order() {
        let ov = vec![
            ("upsample.m".to_string(), "50".to_string()),
            ("compactness.epsilon".to_string(), "0.7".to_string()),
            ("output_dir".to_string(), "elsewhere".to_string()),
            ("evaluation.test_functions.0.index".to_string(), "0".to_string()),
            ("upsample.m".to_string(), "60".to_string()),
            ("example".to_string(), r#"{"name":"beta","a":2,"b":4}"#.to_string()),
        ];
        let cfg = config_from_value(base(), &ov).unwrap();
        assert_eq!(cfg.upsample.m, 60);
        assert_eq!(cfg.compactness.epsilon, 0.7);
        assert_eq!(cfg.output_dir, PathBuf::from("elsewhere"));
        assert_eq!(cfg.example, ExampleSpec::Beta { a: 2.0, b: 4.0 });
    }

    #[test]
    fn reference_chain_accepts_chain_fields() {
        let mut v = base();
        apply_override(
            &mut v,
            "evaluation.reference",
            r#"{"kind":"chain","n_steps":1000,"thinning":2,"n_base":100}"#,
        )
        .unwrap();
        let cfg = config_from_value(v, &[]).unwrap();
        match cfg.evaluation.reference {
            ReferenceSpec::Chain(c) => assert_eq!(c.n_base, Some(100)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rejects_bad_configs() {
        let bad = |path: &str, raw: &str| {
            let r = config_from_value(base(), &[(path.to_string(), raw.to_string())]);
            assert!(matches!(r, Err(Error::Config(_))), "{path}={raw} gave {r:?}");
        };
        bad("upsample.mm", "3");
        bad("version", "2");
        bad("upsample.m", "0");
        bad("compactness.epsilon", "-1");
        bad("evaluation.bins", "0");
        bad("chain.burn_in", "5000");
        bad("chain.n_base", "1000");
        bad("example.name", "torus");
        bad("upsample.m.x", "1");
        assert!(apply_override(&mut base(), "a..b", "1").is_err());
        assert!(apply_override(&mut base(), "evaluation.test_functions.3.index", "1").is_err());
        assert!(parse_assignment("novalue").is_err());
        assert_eq!(parse_assignment("a.b=c=d").unwrap(), ("a.b".into(), "c=d".into()));
    }

    #[test]
    fn dimension_checks() {
        let mut cfg = config_from_value(base(), &[]).unwrap();
        cfg.validate_for_dim(1).unwrap();
        cfg.evaluation.marginals = vec![vec![1]];
        assert!(cfg.validate_for_dim(1).is_err());
        cfg.evaluation.marginals.clear();
        cfg.evaluation.test_functions.push(TestFunction::Product { indices: vec![0, 2] });
        assert!(cfg.validate_for_dim(2).is_err());
        assert!(cfg.validate_for_dim(3).is_ok());
    }

    #[test]
    fn test_function_values() {
        let t = [2.0, 3.0];
        assert_eq!(TestFunction::Coordinate { index: 1 }.eval(&t), 3.0);
        assert_eq!(TestFunction::Product { indices: vec![0, 1] }.eval(&t), 6.0);
        assert_eq!(TestFunction::Power { index: 0, exponent: 3 }.eval(&t), 8.0);
        assert_eq!(TestFunction::Product { indices: vec![0, 1] }.name(), "theta_0*theta_1");
    }
}
