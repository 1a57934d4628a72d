use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedfm_cli::{commands, ExperimentFile};

/// Federated feature-matching experiments on synthetic or CSV data.
#[derive(Parser)]
#[command(name = "fedfm", version)]
struct Cli {
    /// Root for relative `output_dir` values.
    #[arg(long, env = "FEDFM_OUTPUT_ROOT", global = true)]
    output_root: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write rounds.csv, ledger.csv, features.csv and summary.json.
    Run { config: PathBuf },
    /// Run several experiments and write a joined comparison table.
    Compare {
        #[arg(required = true, num_args = 2..)]
        configs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the gradient, anchor, monotonicity and ledger checks.
    Check {
        config: Option<PathBuf>,
        /// Corrupt the analytic side of the named check.
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Print the default experiment file.
    Preset,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let root = cli.output_root.as_deref();
    let result = match cli.command {
        Command::Run { config } => commands::cmd_run(&config, root).map(drop),
        Command::Compare { configs, out } => {
            let out = match root {
                Some(r) if out.is_relative() => r.join(out),
                _ => out,
            };
            commands::cmd_compare(&configs, &out).map(drop)
        }
        Command::Check { config, inject_fault } => commands::cmd_check(config.as_deref(), inject_fault),
        Command::Preset => {
            print!("{}", ExperimentFile::preset().to_toml());
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
