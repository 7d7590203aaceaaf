use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tangent_upsample::config::{load_config, parse_assignment};
use tangent_upsample::examples::CATALOGUE;
use tangent_upsample::exec::with_threads;
use tangent_upsample::pipeline::{self, RunReport};
use tangent_upsample::{Error, Result};

/// Tangent-bundle projection upsampling of Markov chains.
#[derive(Parser, Debug)]
#[command(name = "tangent-upsample", version)]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run chain, upsampling and evaluation from a config file.
    Run {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Decorate and upsample an existing base chain (JSONL with a `theta` field per line).
    UpsamplePostHoc {
        chain: PathBuf,
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Hellinger distance between two histogram CSV files.
    Compare { a: PathBuf, b: PathBuf },
    /// List the built-in example models.
    ListExamples,
}

/// Config overrides: `--set chain.n_steps=5000`, or trailing
/// `--chain.n_steps 5000` / `--chain.n_steps=5000`.
#[derive(clap::Args, Debug)]
struct Overrides {
    #[arg(short, long = "set", value_name = "PATH=VALUE")]
    set: Vec<String>,
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, hide = true)]
    rest: Vec<String>,
}

impl Overrides {
    fn pairs(&self) -> Result<Vec<(String, String)>> {
        let mut out = self.set.iter().map(|s| parse_assignment(s)).collect::<Result<Vec<_>>>()?;
        let mut it = self.rest.iter();
        while let Some(tok) = it.next() {
            let key = tok
                .strip_prefix("--")
                .ok_or_else(|| Error::Config(format!("unexpected argument '{tok}'; overrides look like --path.to.field value")))?;
            match key.split_once('=') {
                Some((k, v)) => out.push((k.to_string(), v.to_string())),
                None => {
                    let v = it
                        .next()
                        .ok_or_else(|| Error::Config(format!("override --{key} is missing a value")))?;
                    out.push((key.to_string(), v.clone()));
                }
            }
        }
        Ok(out)
    }
}

fn print_report(report: &RunReport, dir: &Path) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(report)?);
    eprintln!("outputs written to {}", dir.display());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, overrides } => {
            let cfg = load_config(&config, &overrides.pairs()?)?;
            let report = pipeline::run(&cfg)?;
            print_report(&report, &cfg.output_dir)
        }
        Command::UpsamplePostHoc {
            chain,
            config,
            overrides,
        } => {
            let cfg = load_config(&config, &overrides.pairs()?)?;
            let report = pipeline::upsample_post_hoc(&cfg, &chain)?;
            print_report(&report, &cfg.output_dir)
        }
        Command::Compare { a, b } => {
            let d = pipeline::compare_files(&a, &b)?;
            println!("{d}");
            Ok(())
        }
        Command::ListExamples => {
            for (name, desc) in CATALOGUE {
                println!("{name:<16} {desc}");
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.threads {
        Some(n) => with_threads(n, || dispatch(cli)),
        None => dispatch(cli),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
