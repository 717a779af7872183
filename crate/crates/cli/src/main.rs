use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pourl_cli::{describe, inspect_file, run_experiment, verify_file, CliError, ExperimentConfig, Verdict};

#[derive(Parser)]
#[command(name = "pourl", version, about = "Proof-of-useful-work chain simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides `out` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Seed for both the network and the agents; overrides the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Check a .chain dump against the oracle recorded in its header.
    Verify { file: PathBuf },
    /// Print a dump block by block.
    Inspect {
        file: PathBuf,
        /// One JSON object per block.
        #[arg(long)]
        json: bool,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("POURL_LOG", "warn")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn execute(command: Command) -> Result<ExitCode, CliError> {
    match command {
        Command::Run { config, out, seed } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(seed) = seed {
                cfg.override_seed(seed);
            }
            let out = out.or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from("pourl-out"));
            let outcome = run_experiment(&cfg, &out)?;
            println!("{}", describe(&outcome, &out));
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify { file } => match verify_file(&file)? {
            Verdict::Valid { blocks, tip } => {
                println!("OK {blocks} blocks, tip {tip}");
                Ok(ExitCode::SUCCESS)
            }
            Verdict::Invalid { height, cause } => {
                println!("INVALID at height {height}: {cause}");
                Ok(ExitCode::from(1))
            }
        },
        Command::Inspect { file, json } => {
            print!("{}", inspect_file(&file, json)?);
            Ok(ExitCode::SUCCESS)
        }
    }
}
