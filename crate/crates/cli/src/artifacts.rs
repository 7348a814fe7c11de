//! Run directories: the lock, the manifest listing every file, and
//! metrics.csv.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use spvi_core::io::{read_json, write_atomic, write_json, DirLock, Tensor};

use crate::config::{Experiment, RunConfig};
use crate::error::{CliError, CliResult};

pub const MANIFEST: &str = "manifest.json";
pub const MANIFEST_FORMAT: &str = "spvi-run/1";
pub const METRICS: &str = "metrics.csv";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Artifact {
    /// Relative to the run directory, `/`-separated.
    pub path: String,
    pub kind: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub run_id: String,
    pub experiment: Experiment,
    pub code_version: String,
    pub config: RunConfig,
    pub seeds: BTreeMap<String, u64>,
    pub artifacts: Vec<Artifact>,
    pub complete: bool,
    #[serde(default)]
    pub notes: BTreeMap<String, String>,
    #[serde(default)]
    pub exported: bool,
}

impl Manifest {
    pub fn read(dir: &Path) -> CliResult<Self> {
        let p = dir.join(MANIFEST);
        if !p.exists() {
            return Err(CliError::validation(format!("{} holds no run manifest", dir.display())));
        }
        let m: Manifest = read_json(&p)?;
        if m.format != MANIFEST_FORMAT {
            return Err(CliError::validation(format!("unsupported manifest format {}", m.format)));
        }
        Ok(m)
    }

    pub fn write(&self, dir: &Path) -> CliResult<()> {
        write_json(&dir.join(MANIFEST), self)?;
        Ok(())
    }

    /// Replace or append an artifact entry.
    pub fn upsert(&mut self, a: Artifact) {
        match self.artifacts.iter_mut().find(|x| x.path == a.path) {
            Some(x) => *x = a,
            None => self.artifacts.push(a),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct MetricRow {
    metric: String,
    value: f64,
    n: usize,
    seed: u64,
}

/// A run directory owned by this process for the lifetime of the value.
pub struct RunDir {
    root: PathBuf,
    artifacts: Vec<Artifact>,
    metrics: Vec<MetricRow>,
    seeds: BTreeMap<String, u64>,
    notes: BTreeMap<String, String>,
    _lock: DirLock,
}

impl RunDir {
    /// Create and lock `dir`. A directory that already holds a manifest is
    /// refused rather than overwritten.
    pub fn create(dir: &Path) -> CliResult<Self> {
        std::fs::create_dir_all(dir)?;
        let lock = DirLock::acquire(dir)?;
        if dir.join(MANIFEST).exists() {
            return Err(CliError::validation(format!("{} already holds a run", dir.display())));
        }
        Ok(Self {
            root: dir.to_path_buf(),
            artifacts: Vec::new(),
            metrics: Vec::new(),
            seeds: BTreeMap::new(),
            notes: BTreeMap::new(),
            _lock: lock,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Directory under the run root, created if needed.
    pub fn subdir(&self, rel: &str) -> CliResult<PathBuf> {
        let p = self.path(rel);
        std::fs::create_dir_all(&p)?;
        Ok(p)
    }

    pub fn record(&mut self, rel: &str, kind: &str) {
        if !self.artifacts.iter().any(|a| a.path == rel) {
            self.artifacts.push(Artifact {
                path: rel.to_string(),
                kind: kind.to_string(),
            });
        }
    }

    /// Record every file below `rel` that is not yet listed.
    pub fn record_dir(&mut self, rel: &str, kind: &str) -> CliResult<()> {
        let mut files = Vec::new();
        walk(&self.root, &self.path(rel), &mut files)?;
        files.sort();
        for f in files.into_iter().filter(|f| f != DirLock::FILE && f != MANIFEST) {
            self.record(&f, kind);
        }
        Ok(())
    }

    pub fn write_bytes(&mut self, rel: &str, bytes: &[u8], kind: &str) -> CliResult<()> {
        write_atomic(&self.path(rel), bytes)?;
        self.record(rel, kind);
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T, kind: &str) -> CliResult<()> {
        write_json(&self.path(rel), value)?;
        self.record(rel, kind);
        Ok(())
    }

    pub fn write_tensor(&mut self, rel: &str, t: &Tensor, kind: &str) -> CliResult<()> {
        t.write(&self.path(rel))?;
        self.record(rel, kind);
        Ok(())
    }

    pub fn metric(&mut self, metric: &str, value: f64, n: usize, seed: u64) {
        self.metrics.push(MetricRow {
            metric: metric.to_string(),
            value,
            n,
            seed,
        });
    }

    pub fn seed(&mut self, name: &str, value: u64) {
        self.seeds.insert(name.to_string(), value);
    }

    pub fn note(&mut self, key: &str, value: &str) {
        self.notes.insert(key.to_string(), value.to_string());
    }

    fn metrics_csv(&self, run_id: &str) -> String {
        let mut s = String::from("run_id,metric,value,n,seed\n");
        for m in &self.metrics {
            let _ = writeln!(s, "{run_id},{},{},{},{}", m.metric, m.value, m.n, m.seed);
        }
        s
    }

    /// Write metrics.csv and the manifest, then release the lock.
    pub fn finish(mut self, cfg: &RunConfig, complete: bool) -> CliResult<Manifest> {
        let run_id = cfg.run_id();
        if complete || !self.metrics.is_empty() {
            let csv = self.metrics_csv(&run_id);
            self.write_bytes(METRICS, csv.as_bytes(), "metrics")?;
        }
        let m = Manifest {
            format: MANIFEST_FORMAT.into(),
            run_id,
            experiment: cfg.experiment,
            code_version: env!("CARGO_PKG_VERSION").into(),
            config: cfg.clone(),
            seeds: std::mem::take(&mut self.seeds),
            artifacts: std::mem::take(&mut self.artifacts),
            complete,
            notes: std::mem::take(&mut self.notes),
            exported: false,
        };
        m.write(&self.root)?;
        Ok(m)
    }
}

fn walk(root: &Path, dir: &Path, out: &mut Vec<String>) -> CliResult<()> {
    if !dir.exists() {
        return Ok(());
    }
    for entry in std::fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_dir() {
            walk(root, &p, out)?;
        } else {
            let rel = p.strip_prefix(root).expect("walk stays below root");
            let parts: Vec<_> = rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect();
            out.push(parts.join("/"));
        }
    }
    Ok(())
}

/// Files present but not listed (orphans) and files listed but absent.
pub fn check_manifest(dir: &Path) -> CliResult<(Vec<String>, Vec<String>)> {
    let m = Manifest::read(dir)?;
    let mut files = Vec::new();
    walk(dir, dir, &mut files)?;
    files.sort();
    let listed: std::collections::BTreeSet<&str> = m.artifacts.iter().map(|a| a.path.as_str()).collect();
    let orphans = files
        .iter()
        .filter(|f| f.as_str() != MANIFEST && f.as_str() != DirLock::FILE && !listed.contains(f.as_str()))
        .cloned()
        .collect();
    let missing = m
        .artifacts
        .iter()
        .filter(|a| !dir.join(&a.path).exists())
        .map(|a| a.path.clone())
        .collect();
    Ok((orphans, missing))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::OperatorSpec;

    fn cfg(dir: &Path) -> RunConfig {
        toml::from_str::<RunConfig>(&format!(
            "experiment = \"make-measurements\"\noutput_dir = \"{}\"\nseed = 3\n\
             [measure]\ntruth = \"x\"\n[measure.operator]\nkind = \"denoise\"\ndim = 2\n",
            dir.display()
        ))
        .unwrap()
    }

    #[test]
    fn manifest_lists_everything_and_detects_orphans() {
        let tmp = tempfile::tempdir().unwrap();
        let c = cfg(tmp.path());
        assert!(matches!(c.measure.as_ref().unwrap().operator, OperatorSpec::Denoise { dim: 2 }));
        let mut rd = RunDir::create(tmp.path()).unwrap();
        rd.write_bytes("a.txt", b"a", "note").unwrap();
        std::fs::create_dir_all(tmp.path().join("checkpoints")).unwrap();
        std::fs::write(tmp.path().join("checkpoints/x.bin"), b"x").unwrap();
        rd.record_dir("checkpoints", "checkpoint").unwrap();
        rd.metric("m", 0.5, 1, 3);
        rd.finish(&c, true).unwrap();
        let (orphans, missing) = check_manifest(tmp.path()).unwrap();
        assert!(orphans.is_empty() && missing.is_empty(), "{orphans:?} {missing:?}");
        assert!(!tmp.path().join(DirLock::FILE).exists());

        std::fs::write(tmp.path().join("stray.txt"), b"s").unwrap();
        std::fs::remove_file(tmp.path().join("a.txt")).unwrap();
        let (orphans, missing) = check_manifest(tmp.path()).unwrap();
        assert_eq!(orphans, vec!["stray.txt".to_string()]);
        assert_eq!(missing, vec!["a.txt".to_string()]);

        let csv = std::fs::read_to_string(tmp.path().join(METRICS)).unwrap();
        assert_eq!(csv, "run_id,metric,value,n,seed\nmake-measurements,m,0.5,1,3\n");
    }

    #[test]
    fn runs_do_not_overwrite_or_share_directories() {
        let tmp = tempfile::tempdir().unwrap();
        let held = RunDir::create(tmp.path()).unwrap();
        assert_eq!(RunDir::create(tmp.path()).err().unwrap().exit_code(), 3);
        held.finish(&cfg(tmp.path()), true).unwrap();
        assert_eq!(RunDir::create(tmp.path()).err().unwrap().exit_code(), 3);
    }
}
