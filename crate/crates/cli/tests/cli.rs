use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tangent-upsample"))
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn report(o: &Output) -> serde_json::Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&o.stderr)))
}

#[test]
fn list_examples_names_every_model() {
    let o = run(&["list-examples"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    for name in ["parabola", "klein", "beta", "synthetic_highd"] {
        assert!(text.contains(name), "{name} missing from:\n{text}");
    }
}

#[test]
fn run_with_both_override_styles() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("p");
    let cfg = config("parabola.json");
    let o = run(&[
        "--threads",
        "2",
        "run",
        cfg.to_str().unwrap(),
        "--set",
        &format!("output_dir={}", out.display()),
        "-s",
        "upsample.m=40",
        "--seed",
        "9",
        "--compactness.epsilon=0.1",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = report(&o);
    assert_eq!(r["m"], 40);
    assert_eq!(r["seed"], 9);
    assert_eq!(r["emitted"].as_u64().unwrap(), 40 * r["n_base"].as_u64().unwrap());
    assert!(r["hellinger"]["upsampled"].as_f64().unwrap() < 1.0);
    for f in ["samples.jsonl", "histogram.csv", "reference.csv", "report.json", "config.json"] {
        assert!(out.join(f).exists(), "{f}");
    }

    // Identical histograms compare to zero.
    let h = out.join("histogram.csv");
    let c = run(&["compare", h.to_str().unwrap(), h.to_str().unwrap()]);
    assert_eq!(code(&c), 0);
    let d: f64 = String::from_utf8(c.stdout).unwrap().trim().parse().unwrap();
    assert!(d.abs() < 1e-12);
    let c = run(&["compare", h.to_str().unwrap(), out.join("reference.csv").to_str().unwrap()]);
    let d: f64 = String::from_utf8(c.stdout).unwrap().trim().parse().unwrap();
    assert!((d - report(&o)["hellinger"]["upsampled"].as_f64().unwrap()).abs() < 1e-9);

    // The written base chain upsamples post hoc.
    let out2 = dir.path().join("q");
    let o2 = run(&[
        "upsample-post-hoc",
        out.join("base_chain.jsonl").to_str().unwrap(),
        cfg.to_str().unwrap(),
        "--output_dir",
        out2.to_str().unwrap(),
        "--upsample.m",
        "5",
        "--chain.n_base",
        "null",
    ]);
    assert_eq!(code(&o2), 0, "{}", String::from_utf8_lossy(&o2.stderr));
    let r2 = report(&o2);
    assert_eq!(r2["n_base"], r["n_base"]);
    assert_eq!(r2["m"], 5);
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("parabola.json");
    let out = format!("output_dir={}", dir.path().join("x").display());
    for bad in [
        vec!["run", cfg.to_str().unwrap(), "-s", &out, "-s", "upsample.mm=3"],
        vec!["run", cfg.to_str().unwrap(), "-s", &out, "-s", "compactness.epsilon=-1"],
        vec!["run", cfg.to_str().unwrap(), "-s", &out, "stray"],
        vec!["run", "/nonexistent/config.json"],
        vec!["compare", "/nonexistent/a.csv", "/nonexistent/b.csv"],
    ] {
        let o = run(&bad);
        assert_eq!(code(&o), 2, "{bad:?}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(String::from_utf8_lossy(&o.stderr).contains("error"));
    }
    assert!(!dir.path().join("x").exists());
}

#[test]
fn numeric_failure_exits_3_and_leaves_no_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("n");
    let cfg = config("parabola.json");
    // A prior with no mass anywhere near the samples.
    let o = run(&[
        "run",
        cfg.to_str().unwrap(),
        "-s",
        &format!("output_dir={}", out.display()),
        "-s",
        r#"evaluation.prior={"kind":"gaussian","mean":[1e4],"cov":[[1e-6]]}"#,
    ]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!out.join("report.json").exists());
}
