//! Command-line driver: `spechomog <experiment> --config <path> [--out <dir>] [--threads <k>]`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use spechomog::config::RunConfig;
use spechomog::experiment::{output_dir, run_experiment, EXPERIMENTS};

#[derive(Debug, Parser)]
#[command(name = "spechomog", version, about = "Spectral homogenization experiments for nonlocal convolution operators")]
struct Cli {
    /// One of: cell-h, effective, direct, asymptotics, hj, end-to-end, verify.
    #[arg(value_parser = clap::builder::PossibleValuesParser::new(EXPERIMENTS))]
    experiment: String,
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides the config's `output`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; `SPECHOMOG_THREADS` takes precedence.
    #[arg(long)]
    threads: Option<usize>,
}

fn thread_count(cli: Option<usize>) -> Result<Option<usize>, String> {
    match std::env::var("SPECHOMOG_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .map(Some)
            .ok_or_else(|| format!("SPECHOMOG_THREADS must be a positive integer, got `{v}`")),
        Err(_) => Ok(cli),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match thread_count(cli.threads) {
        Ok(Some(n)) => {
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                eprintln!("error: could not start thread pool: {e}");
                return ExitCode::from(3);
            }
        }
        Ok(None) => {}
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(2);
        }
    }
    let cfg = match RunConfig::load(&cli.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let dir = output_dir(cli.out.as_deref(), &cfg);
    match run_experiment(&cli.experiment, &cfg, &dir) {
        Ok(outcome) => {
            let code = outcome.exit_code();
            match &outcome.error {
                Some(e) => eprintln!("error: {e}"),
                None => {
                    println!("{}: {} ({})", cli.experiment, outcome.manifest.status, dir.display());
                    for (k, v) in &outcome.manifest.scalars {
                        println!("  {k} = {v}");
                    }
                }
            }
            ExitCode::from(code as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}
