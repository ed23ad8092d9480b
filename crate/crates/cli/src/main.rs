use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use unilab_core::ensembles::EnsembleTag;
use unilab_core::experiments::{default_class_report, run_config_file, with_thread_pool};
use unilab_core::selftest::run_selftest;
use unilab_core::Error;

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_TOLERANCE: u8 = 3;

#[derive(Parser)]
#[command(name = "unilab", version, about = "Spectral universality experiments for regularized least squares")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a TOML config.
    Run {
        config: PathBuf,
        /// Exit with status 3 when a summary check fails.
        #[arg(long)]
        check: bool,
    },
    /// Print the class report of one ensemble draw as JSON.
    ClassReport {
        #[arg(long)]
        ensemble: EnsembleTag,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the built-in invariant checks.
    Selftest,
}

fn fail(e: Error) -> ExitCode {
    eprintln!("error: {e}");
    match e {
        Error::Config { .. }
        | Error::BadAspect { .. }
        | Error::NonPowerOfTwo(_)
        | Error::InvalidL(_)
        | Error::ExplicitTooLarge { .. }
        | Error::UnsupportedEnsemble(_) => ExitCode::from(EXIT_CONFIG),
        _ => ExitCode::from(EXIT_FAILURE),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, check } => match run_config_file(&config) {
            Ok((out, written)) => {
                for p in &written {
                    log::info!("wrote {}", p.display());
                }
                for c in &out.summary.checks {
                    println!("{} {} value={:e} threshold={:e}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.value, c.threshold);
                }
                if check && !out.summary.pass {
                    ExitCode::from(EXIT_TOLERANCE)
                } else {
                    ExitCode::SUCCESS
                }
            }
            Err(e) => fail(e),
        },
        Command::ClassReport { ensemble, n, seed } => {
            match with_thread_pool(|| default_class_report(ensemble, n, seed)) {
                Ok(rep) => {
                    println!("{}", serde_json::to_string_pretty(&rep).expect("report serializes"));
                    if rep.pass {
                        ExitCode::SUCCESS
                    } else {
                        ExitCode::from(EXIT_TOLERANCE)
                    }
                }
                Err(e) => fail(e),
            }
        }
        Command::Selftest => {
            let checks = with_thread_pool(run_selftest);
            for c in &checks {
                println!("{} {} value={:e}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.value);
            }
            if checks.iter().all(|c| c.pass) {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_TOLERANCE)
            }
        }
    }
}
