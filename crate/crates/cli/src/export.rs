//! Plot-ready series from a completed run. Rendering is left to external
//! tools.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;
use spvi_core::baselines::SweepPoint;
use spvi_core::io::{read_json, write_atomic, write_json, DirLock, Tensor};
use spvi_core::prior::BoundGapRow;

use crate::artifacts::{Artifact, Manifest};
use crate::config::Experiment;
use crate::error::{CliError, CliResult};

#[derive(Serialize)]
struct ImageSeries {
    dims: Vec<usize>,
    data: Vec<f64>,
}

/// Write `plots/` for the run in `dir` and list the files in its manifest.
/// Returns the relative paths written.
pub fn export_plots(dir: &Path) -> CliResult<Vec<String>> {
    if !dir.is_dir() {
        return Err(CliError::Missing(dir.to_path_buf()));
    }
    let mut manifest = Manifest::read(dir)?;
    if !manifest.complete {
        return Err(CliError::validation(format!("run in {} did not complete", dir.display())));
    }
    let _lock = DirLock::acquire(dir)?;
    std::fs::create_dir_all(dir.join("plots"))?;
    let mut out: Vec<(String, String)> = Vec::new();
    let mut put = |rel: &str, bytes: Vec<u8>, kind: &str| -> CliResult<()> {
        write_atomic(&dir.join(rel), &bytes)?;
        out.push((rel.to_string(), kind.to_string()));
        Ok(())
    };
    match manifest.experiment {
        Experiment::TrainScore | Experiment::Infer => {
            let text = std::fs::read_to_string(dir.join("history.csv"))?;
            put("plots/loss.csv", loss_series(&text)?.into_bytes(), "plot_loss")?;
        }
        Experiment::BaselineSweep => {
            let pts: Vec<SweepPoint> = read_json(&dir.join("sweep.json"))?;
            let mut s = String::from("method,weight,kl,kl_se,n_samples\n");
            for p in &pts {
                let _ = writeln!(s, "{},{},{},{},{}", p.method.name(), p.weight, p.kl, p.kl_se, p.n_samples);
            }
            put("plots/kl_vs_weight.csv", s.into_bytes(), "plot_kl_vs_weight")?;
        }
        Experiment::ProbeBound => {
            let rows: Vec<BoundGapRow> = read_json(&dir.join("bound_gap.json"))?;
            let mut s = String::from("sample_id,repeat,b_value,ode_value\n");
            for r in &rows {
                let _ = writeln!(s, "{},{},{},{}", r.sample_id, r.repeat, r.b_value, r.ode_value);
            }
            put("plots/boundgap.csv", s.into_bytes(), "plot_boundgap")?;
        }
        Experiment::MakeMeasurements => {
            let clean = Tensor::read(&dir.join("clean.spvi"))?.to_f64();
            let y: spvi_core::forward::Measurement = read_json(&dir.join("measurement.json"))?;
            let mut s = String::from("index,value,noiseless,sigma\n");
            for (i, ((v, c), sg)) in y.values.iter().zip(&clean).zip(&y.noise_sigma).enumerate() {
                let _ = writeln!(s, "{i},{v},{c},{sg}");
            }
            put("plots/measurement.csv", s.into_bytes(), "plot_measurement")?;
        }
        Experiment::Evaluate => {}
    }
    if matches!(manifest.experiment, Experiment::Infer | Experiment::Evaluate) {
        for (src, rel) in [("mean.spvi", "plots/posterior_mean.json"), ("std.spvi", "plots/posterior_std.json")] {
            let t = Tensor::read(&dir.join(src))?;
            let series = ImageSeries {
                dims: t.dims.clone(),
                data: t.to_f64(),
            };
            write_json(&dir.join(rel), &series)?;
            out.push((rel.to_string(), "plot_image".to_string()));
        }
    }
    let written: Vec<String> = out.iter().map(|(p, _)| p.clone()).collect();
    for (path, kind) in out {
        manifest.upsert(Artifact { path, kind });
    }
    manifest.exported = true;
    manifest.write(dir)?;
    Ok(written)
}

/// `step,loss[,loss_smoothed]` columns of a history table.
fn loss_series(history: &str) -> CliResult<String> {
    let mut lines = history.lines();
    let header: Vec<&str> = lines.next().unwrap_or_default().split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name);
    let (Some(step), Some(loss)) = (col("step"), col("loss")) else {
        return Err(CliError::validation("history.csv lacks step/loss columns"));
    };
    let smooth = col("loss_smoothed");
    let mut s = String::from(if smooth.is_some() { "step,loss,loss_smoothed\n" } else { "step,loss\n" });
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        let get = |i: usize| f.get(i).copied().ok_or_else(|| CliError::validation("short history row"));
        match smooth {
            Some(k) => writeln!(s, "{},{},{}", get(step)?, get(loss)?, get(k)?),
            None => writeln!(s, "{},{}", get(step)?, get(loss)?),
        }
        .expect("writing to a string");
    }
    Ok(s)
}
