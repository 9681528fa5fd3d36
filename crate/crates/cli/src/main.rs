use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vramsim_cli::config::DEFAULT_RACE_WINDOW;
use vramsim_cli::{run, write_artifacts, Config, ConfigError, ScenarioName};

#[derive(Parser)]
#[command(name = "vramsim", version, about = "GPU memory-subsystem attack simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario and write report.json, latency.csv and events.jsonl.
    Run(RunArgs),
    /// List every config key with its default.
    Keys,
}

#[derive(clap::Args)]
struct RunArgs {
    scenario: ScenarioName,
    /// Flat key = value file applied before command-line overrides.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    trials: Option<u64>,
    #[arg(long)]
    jobs: Option<usize>,
    /// Let the host driver wake after GSP messages with this probability.
    #[arg(long, num_args = 0..=1, default_missing_value = DEFAULT_RACE_WINDOW)]
    race_window: Option<f64>,
    /// Further `--key value` config overrides.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

fn configure(a: &RunArgs) -> Result<Config, ConfigError> {
    let mut cfg = Config::default();
    if let Some(p) = &a.config {
        cfg.merge_file(p)?;
    }
    if let Some(v) = a.seed {
        cfg.set("seed", &v.to_string())?;
    }
    if let Some(v) = &a.out {
        cfg.set("out", &v.display().to_string())?;
    }
    if let Some(v) = a.trials {
        cfg.set("trials", &v.to_string())?;
    }
    if let Some(v) = a.jobs {
        cfg.set("jobs", &v.to_string())?;
    }
    if let Some(v) = a.race_window {
        cfg.set("race_window", &v.to_string())?;
    }
    cfg.merge_args(&a.overrides)?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let a = match cli.cmd {
        Cmd::Keys => {
            for (k, v, doc) in vramsim_cli::config::KEYS {
                println!("{k} = {v:<20} # {doc}");
            }
            return ExitCode::SUCCESS;
        }
        Cmd::Run(a) => a,
    };
    let cfg = match configure(&a) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let artifacts = match run(a.scenario, &cfg) {
        Ok(x) => x,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let out = PathBuf::from(cfg.raw("out"));
    if let Err(e) = write_artifacts(&out, &artifacts) {
        eprintln!("error: writing {}: {e}", out.display());
        return ExitCode::from(1);
    }
    let r = &artifacts.report;
    println!(
        "{}: {}/{} trials verified -> {}",
        a.scenario.as_str(),
        r["passed_trials"],
        r["trials"].as_array().map_or(0, |t| t.len()),
        out.display()
    );
    if artifacts.verified {
        ExitCode::SUCCESS
    } else {
        for f in r["failed_checks"].as_array().into_iter().flatten() {
            eprintln!("failed: {}", f.as_str().unwrap_or_default());
        }
        ExitCode::from(1)
    }
}
