use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use genfun::experiment::{run_with_threads, ExperimentConfig, ExperimentError};

#[derive(Parser)]
#[command(name = "genfun", version, about = "Runs generating-function verification experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a JSON config.
    Run {
        config: PathBuf,
        /// CSV output path; the JSON summary goes next to it.
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        samples: Option<usize>,
    },
}

fn threads_from_env() -> Result<Option<usize>, ExperimentError> {
    match std::env::var("GENFUN_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map(Some)
            .map_err(|_| ExperimentError::ConfigInvalid(format!("GENFUN_THREADS: not a thread count: {v:?}"))),
        Err(_) => Ok(None),
    }
}

fn run(config: PathBuf, output: Option<PathBuf>, seed: Option<u64>, samples: Option<usize>) -> Result<bool, ExperimentError> {
    let mut cfg = ExperimentConfig::load(&config)?;
    if let Some(o) = output {
        cfg.output = Some(o);
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(n) = samples {
        cfg.samples = n;
    }
    let out = cfg
        .output
        .clone()
        .ok_or_else(|| ExperimentError::ConfigInvalid("missing field `output` (or pass --output)".into()))?;
    let report = run_with_threads(&cfg, threads_from_env()?)?;
    let summary_path = report.write(&out)?;
    let s = &report.summary;
    eprintln!(
        "{}: {} (max {}, threshold {:e}, {} failed of {}) -> {}, {}",
        s.experiment,
        if s.pass { "pass" } else { "FAIL" },
        s.max.map_or("n/a".to_string(), |m| format!("{m:e}")),
        s.threshold,
        s.failures,
        s.evaluations,
        out.display(),
        summary_path.display(),
    );
    Ok(s.pass)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            config,
            output,
            seed,
            samples,
        } => match run(config, output, seed, samples) {
            Ok(true) => ExitCode::SUCCESS,
            Ok(false) => ExitCode::from(2),
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(1)
            }
        },
    }
}
