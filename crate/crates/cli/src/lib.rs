//! Config-driven runner for score-prior variational imaging experiments.

pub mod artifacts;
pub mod config;
pub mod error;
pub mod experiments;
pub mod export;

use std::path::Path;

use artifacts::{Manifest, RunDir};
use config::RunConfig;
use error::{CliError, CliResult};

/// Execute the experiment in `config_path`. Input files are checked before
/// the run directory is touched, so a missing input leaves no artifacts.
/// A failed run still writes error.json and an incomplete manifest.
pub fn run(config_path: &Path) -> CliResult<Manifest> {
    let cfg = RunConfig::load(config_path)?;
    cfg.check_inputs()?;
    let mut rd = RunDir::create(&cfg.output_dir)?;
    match experiments::execute(&cfg, &mut rd) {
        Ok(()) => rd.finish(&cfg, true),
        Err(e) => {
            rd.record_dir("", "partial")?;
            rd.write_json("error.json", &e.record(), "error")?;
            rd.finish(&cfg, false)?;
            Err(e)
        }
    }
}

/// Parse and validate a config without running it.
pub fn validate(config_path: &Path) -> CliResult<RunConfig> {
    let cfg = RunConfig::load(config_path)?;
    cfg.check_inputs()?;
    Ok(cfg)
}

/// Size the global thread pool from `SPVI_THREADS` when set.
pub fn init_threads() -> CliResult<()> {
    let Ok(v) = std::env::var("SPVI_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CliError::validation(format!("SPVI_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::validation(e.to_string()))
}
