use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;
use spvi::error::CliError;

#[derive(Parser)]
#[command(name = "spvi", version, about = "Score-prior variational imaging experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a TOML config.
    Run { config: PathBuf },
    /// Check a config and its input files without running.
    Validate { config: PathBuf },
    /// Write plot-ready series for a completed run directory.
    Export { rundir: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let out = spvi::init_threads().and_then(|()| match &cli.command {
        Command::Run { config } => spvi::run(config).map(|m| {
            json!({"status": "ok", "run_id": m.run_id, "artifacts": m.artifacts.len()})
        }),
        Command::Validate { config } => {
            spvi::validate(config).map(|c| json!({"status": "ok", "experiment": c.experiment.name()}))
        }
        Command::Export { rundir } => spvi::export::export_plots(rundir).map(|files| json!({"status": "ok", "files": files})),
    });
    match out {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => fail(&e),
    }
}

fn fail(e: &CliError) -> ExitCode {
    eprintln!("{}", serde_json::to_string(&e.record()).expect("error record serializes"));
    ExitCode::from(e.exit_code() as u8)
}
