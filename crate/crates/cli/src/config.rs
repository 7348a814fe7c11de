//! Run configuration: a strict TOML schema whose relative paths resolve
//! against the config file's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use spvi_core::baselines::{Method, SamplerConfig};
use spvi_core::diffusion::DiffusionSpec;
use spvi_core::prior::{OdeConfig, SurrogateConfig};
use spvi_core::score::{GaussianPriorSpec, GmmPriorSpec, ScoreNetSpec, TrainSchedule};
use spvi_core::variational::FamilyConfig;
use spvi_core::vi::{PriorKind, ViConfig};

use crate::error::{require_file, CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    TrainScore,
    Infer,
    BaselineSweep,
    ProbeBound,
    Evaluate,
    MakeMeasurements,
}

impl Experiment {
    pub fn name(&self) -> &'static str {
        match self {
            Experiment::TrainScore => "train-score",
            Experiment::Infer => "infer",
            Experiment::BaselineSweep => "baseline-sweep",
            Experiment::ProbeBound => "probe-bound",
            Experiment::Evaluate => "evaluate",
            Experiment::MakeMeasurements => "make-measurements",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: Experiment,
    pub output_dir: PathBuf,
    pub seed: u64,
    /// Label written into metrics.csv; defaults to the experiment name.
    #[serde(default)]
    pub run_id: Option<String>,
    #[serde(default)]
    pub diffusion: Option<DiffusionSpec>,
    #[serde(default)]
    pub prior: Option<PriorSource>,
    #[serde(default)]
    pub problem: Option<ProblemConfig>,
    #[serde(default)]
    pub family: Option<FamilyConfig>,
    #[serde(default)]
    pub vi: Option<ViConfig>,
    #[serde(default)]
    pub objective: Option<PriorKind>,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
    #[serde(default)]
    pub probe: Option<ProbeConfig>,
    #[serde(default)]
    pub evaluate: Option<EvaluateConfig>,
    #[serde(default)]
    pub measure: Option<MeasureConfig>,
}

/// Where the score comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum PriorSource {
    Gaussian(GaussianPriorSpec),
    Gmm(GmmPriorSpec),
    /// Manifest written by a train-score run.
    Checkpoint { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    /// Measurement bundle (JSON) written by a make-measurements run.
    pub measurement: PathBuf,
    /// Ground-truth image tensor, enabling image metrics.
    #[serde(default)]
    pub truth: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Tensor of shape `[n, dim]`.
    pub dataset: PathBuf,
    pub net: ScoreNetSpec,
    pub schedule: TrainSchedule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default = "all_methods")]
    pub methods: Vec<Method>,
    pub samples_per_value: usize,
    #[serde(default)]
    pub sampler: SamplerConfig,
    /// Replaces the reference 100-point grid of every method.
    #[serde(default)]
    pub values: Option<Vec<f64>>,
}

fn all_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    /// Family manifest to draw the probe points from.
    pub checkpoint: PathBuf,
    #[serde(default = "default_probe_samples")]
    pub n_samples: usize,
    #[serde(default = "default_probe_repeats")]
    pub n_repeats: usize,
    #[serde(default = "default_probe_surrogate")]
    pub surrogate: SurrogateConfig,
    #[serde(default)]
    pub ode: OdeConfig,
    /// Pooled standard errors allowed in the validity check.
    #[serde(default = "default_k")]
    pub k: f64,
}

fn default_probe_samples() -> usize {
    128
}

fn default_probe_repeats() -> usize {
    20
}

fn default_probe_surrogate() -> SurrogateConfig {
    SurrogateConfig { n_time: 2048, n_noise: 1 }
}

fn default_k() -> f64 {
    3.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateConfig {
    pub checkpoint: PathBuf,
    #[serde(default = "default_eval_samples")]
    pub n_samples: usize,
    #[serde(default = "default_range")]
    pub data_range: f64,
}

fn default_eval_samples() -> usize {
    1024
}

fn default_range() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasureConfig {
    pub operator: OperatorSpec,
    /// Tensor holding the image to measure.
    pub truth: PathBuf,
    /// Noise level of every measurement; ignored by the closure operator,
    /// which takes its noise from the coverage file.
    #[serde(default)]
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OperatorSpec {
    Denoise { dim: usize },
    Dense { rows: usize, cols: usize, matrix: Vec<f64> },
    LowFreq { height: usize, width: usize, fraction: f64 },
    Mri { height: usize, width: usize, accel: f64 },
    Vlbi { height: usize, width: usize, fov_uas: f64, coverage: PathBuf },
}

impl RunConfig {
    /// Parse and validate `path`, resolving relative paths.
    pub fn load(path: &Path) -> CliResult<Self> {
        require_file(path)?;
        let text = std::fs::read_to_string(path)?;
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| CliError::validation(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn run_id(&self) -> String {
        self.run_id.clone().unwrap_or_else(|| self.experiment.name().to_string())
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        if let Some(PriorSource::Checkpoint { path }) = &mut self.prior {
            fix(path);
        }
        if let Some(p) = &mut self.problem {
            fix(&mut p.measurement);
            if let Some(t) = &mut p.truth {
                fix(t);
            }
        }
        if let Some(t) = &mut self.train {
            fix(&mut t.dataset);
        }
        if let Some(p) = &mut self.probe {
            fix(&mut p.checkpoint);
        }
        if let Some(e) = &mut self.evaluate {
            fix(&mut e.checkpoint);
        }
        if let Some(m) = &mut self.measure {
            fix(&mut m.truth);
            if let OperatorSpec::Vlbi { coverage, .. } = &mut m.operator {
                fix(coverage);
            }
        }
    }

    /// Every path the experiment reads.
    pub fn inputs(&self) -> Vec<&Path> {
        let mut v: Vec<&Path> = Vec::new();
        if let Some(PriorSource::Checkpoint { path }) = &self.prior {
            v.push(path);
        }
        if let Some(p) = &self.problem {
            v.push(&p.measurement);
            if let Some(t) = &p.truth {
                v.push(t);
            }
        }
        if let Some(t) = &self.train {
            v.push(&t.dataset);
        }
        if let Some(p) = &self.probe {
            v.push(&p.checkpoint);
        }
        if let Some(e) = &self.evaluate {
            v.push(&e.checkpoint);
        }
        if let Some(m) = &self.measure {
            v.push(&m.truth);
            if let OperatorSpec::Vlbi { coverage, .. } = &m.operator {
                v.push(coverage);
            }
        }
        v
    }

    /// Sections each experiment needs, checked before anything runs.
    pub fn validate(&self) -> CliResult<()> {
        let need = |ok: bool, what: &str| -> CliResult<()> {
            if ok {
                Ok(())
            } else {
                Err(CliError::validation(format!("{} needs a [{what}] section", self.experiment.name())))
            }
        };
        match self.experiment {
            Experiment::TrainScore => {
                need(self.diffusion.is_some(), "diffusion")?;
                need(self.train.is_some(), "train")?;
            }
            Experiment::Infer => {
                need(self.diffusion.is_some() || matches!(self.objective, Some(PriorKind::Tv { .. })), "diffusion")?;
                need(self.problem.is_some(), "problem")?;
                need(self.vi.is_some(), "vi")?;
                need(self.objective.is_some(), "objective")?;
                if !matches!(self.objective, Some(PriorKind::Tv { .. })) {
                    need(self.prior.is_some(), "prior")?;
                }
            }
            Experiment::BaselineSweep => {
                need(self.diffusion.is_some(), "diffusion")?;
                need(matches!(self.prior, Some(PriorSource::Gmm(_))), "prior (gmm)")?;
                need(self.problem.is_some(), "problem")?;
                need(self.sweep.is_some(), "sweep")?;
            }
            Experiment::ProbeBound => {
                need(self.diffusion.is_some(), "diffusion")?;
                need(self.prior.is_some(), "prior")?;
                need(self.probe.is_some(), "probe")?;
            }
            Experiment::Evaluate => {
                need(self.evaluate.is_some(), "evaluate")?;
                need(self.problem.as_ref().is_some_and(|p| p.truth.is_some()), "problem (with truth)")?;
            }
            Experiment::MakeMeasurements => need(self.measure.is_some(), "measure")?,
        }
        if let Some(d) = &self.diffusion {
            d.validate()?;
        }
        if let Some(v) = &self.vi {
            v.validate()?;
        }
        if let Some(s) = &self.sweep {
            s.sampler.validate()?;
            if s.methods.is_empty() {
                return Err(CliError::validation("sweep needs at least one method"));
            }
        }
        if let Some(p) = &self.probe {
            p.surrogate.validate()?;
            if p.n_samples == 0 || p.n_repeats < 2 {
                return Err(CliError::validation("probe needs samples and at least two repeats"));
            }
        }
        if let Some(m) = &self.measure {
            if !(m.sigma >= 0.0 && m.sigma.is_finite()) {
                return Err(CliError::validation("measurement sigma must be non-negative"));
            }
        }
        if let Some(e) = &self.evaluate {
            if e.n_samples < 2 || !(e.data_range > 0.0) {
                return Err(CliError::validation("evaluation needs two samples and a positive data range"));
            }
        }
        Ok(())
    }

    /// Fail with exit status 2 on the first missing input file.
    pub fn check_inputs(&self) -> CliResult<()> {
        self.inputs().into_iter().try_for_each(require_file)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> CliResult<RunConfig> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| CliError::validation(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let base = "experiment = \"make-measurements\"\noutput_dir = \"o\"\nseed = 1\n\
                    [measure]\ntruth = \"x.spvi\"\nsigma = 0.1\n[measure.operator]\nkind = \"denoise\"\ndim = 4\n";
        assert!(parse(base).is_ok());
        let typo = base.replace("sigma = 0.1", "sgima = 0.1");
        assert_eq!(parse(&typo).unwrap_err().exit_code(), 3);
        let bad_kind = base.replace("make-measurements", "make-coffee");
        assert_eq!(parse(&bad_kind).unwrap_err().exit_code(), 3);
    }

    #[test]
    fn missing_sections_are_validation_errors() {
        let s = "experiment = \"infer\"\noutput_dir = \"o\"\nseed = 1\n";
        let e = parse(s).unwrap_err();
        assert_eq!(e.exit_code(), 3);
        assert!(e.to_string().contains("problem") || e.to_string().contains("diffusion"));
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(
            &p,
            "experiment = \"make-measurements\"\noutput_dir = \"out\"\nseed = 1\n\
             [measure]\ntruth = \"x.spvi\"\n[measure.operator]\nkind = \"denoise\"\ndim = 4\n",
        )
        .unwrap();
        let cfg = RunConfig::load(&p).unwrap();
        assert_eq!(cfg.output_dir, dir.path().join("out"));
        let e = cfg.check_inputs().unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }
}
