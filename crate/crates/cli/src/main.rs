use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use harq_effcap_cli::{run, ExperimentConfig, Scenario};

/// Outage effective capacity experiments for HARQ links and diamond relay networks.
#[derive(Debug, Parser)]
#[command(name = "harq-effcap", version)]
struct Args {
    scenario: Scenario,
    /// TOML experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides `estimator.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let result = ExperimentConfig::from_file(&args.config).and_then(|c| run(args.scenario, &c, args.seed, &args.out));
    match result {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
