//! Variational families with reparameterized sampling and exact densities.
//!
//! A family is a map `x = T_φ(ε)` from standard-normal base noise, with
//! `log q(x) = log N(ε; 0, I) - log|det ∂T/∂ε|`.

mod gaussian;
mod realnvp;

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_json, write_atomic, write_json};
use crate::linalg::std_normal_logpdf;
use crate::rng::{normal_vec, stream};

pub use gaussian::DiagGaussian;
pub use realnvp::{RealNvp, RealNvpConfig};

/// Samples used for the representative mean of families without an
/// analytic one.
pub const SNAPSHOT_SAMPLES: usize = 1024;

pub trait Variational: Send + Sync {
    fn dim(&self) -> usize;
    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];

    /// `(T(ε), log|det ∂T/∂ε|)`.
    fn transform(&self, eps: &[f64]) -> (Vec<f64>, f64);

    /// `(ε, log|det ∂T/∂ε|)` for `x = T(ε)`.
    fn inverse(&self, x: &[f64]) -> Result<(Vec<f64>, f64)>;

    /// Parameter and base-noise gradients of `⟨gx, T(ε)⟩ + c·log|det ∂T/∂ε|`.
    fn transform_vjp(&self, eps: &[f64], gx: &[f64], c: f64) -> (Vec<f64>, Vec<f64>);

    /// Hook run after each optimizer update with the base noise of the batch.
    fn after_step(&mut self, _eps: &[Vec<f64>]) {}

    fn n_params(&self) -> usize {
        self.params().len()
    }

    fn sample(&self, rng: &mut dyn rand::RngCore, n: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut xs = Vec::with_capacity(n);
        let mut lq = Vec::with_capacity(n);
        for _ in 0..n {
            let eps = normal_vec(rng, self.dim());
            let (x, ld) = self.transform(&eps);
            lq.push(std_normal_logpdf(&eps) - ld);
            xs.push(x);
        }
        (xs, lq)
    }

    fn log_density(&self, x: &[f64]) -> Result<f64> {
        crate::error::check_dim(self.dim(), x.len())?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("log-density argument".into()));
        }
        let (eps, ld) = self.inverse(x)?;
        Ok(std_normal_logpdf(&eps) - ld)
    }

    /// Analytic mean where available, else the mean of [`SNAPSHOT_SAMPLES`]
    /// draws from a fixed stream of `seed`.
    fn representative_mean(&self, seed: u64) -> Vec<f64> {
        let mut rng = stream(seed, 0);
        let (xs, _) = self.sample(&mut rng, SNAPSHOT_SAMPLES);
        let mut m = vec![0.0; self.dim()];
        for x in &xs {
            crate::linalg::axpy(1.0 / xs.len() as f64, x, &mut m);
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FamilyConfig {
    DiagGaussian {
        #[serde(default = "default_mean")]
        mean_init: f64,
        #[serde(default = "default_std")]
        std_init: f64,
    },
    RealNvp(RealNvpConfig),
}

fn default_mean() -> f64 {
    0.5
}

fn default_std() -> f64 {
    0.1
}

impl Default for FamilyConfig {
    fn default() -> Self {
        FamilyConfig::DiagGaussian {
            mean_init: default_mean(),
            std_init: default_std(),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Family {
    DiagGaussian(DiagGaussian),
    RealNvp(RealNvp),
}

impl Family {
    pub fn init<R: Rng + ?Sized>(cfg: &FamilyConfig, dim: usize, rng: &mut R) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter("family dimension must be at least 1".into()));
        }
        Ok(match cfg {
            FamilyConfig::DiagGaussian { mean_init, std_init } => {
                Family::DiagGaussian(DiagGaussian::new(vec![*mean_init; dim], vec![*std_init; dim])?)
            }
            FamilyConfig::RealNvp(c) => Family::RealNvp(RealNvp::init(c.clone(), dim, rng)?),
        })
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Family::DiagGaussian(_) => "diag_gaussian",
            Family::RealNvp(_) => "real_nvp",
        }
    }

    fn inner(&self) -> &dyn Variational {
        match self {
            Family::DiagGaussian(g) => g,
            Family::RealNvp(f) => f,
        }
    }

    fn inner_mut(&mut self) -> &mut dyn Variational {
        match self {
            Family::DiagGaussian(g) => g,
            Family::RealNvp(f) => f,
        }
    }

    /// Write `<stem>.bin` (f32 LE parameters followed by any normalization
    /// state) and `<stem>.json`.
    pub fn save(&self, dir: &Path, stem: &str, step: usize) -> Result<()> {
        let bin = format!("{stem}.bin");
        let (state, flow) = match self {
            Family::DiagGaussian(_) => (Vec::new(), None),
            Family::RealNvp(f) => (f.norm_state(), Some(f.manifest_info())),
        };
        let bytes: Vec<u8> = self
            .params()
            .iter()
            .chain(&state)
            .flat_map(|&p| (p as f32).to_le_bytes())
            .collect();
        write_atomic(&dir.join(&bin), &bytes)?;
        let m = FamilyManifest {
            format: FAMILY_FORMAT.into(),
            kind: self.kind().into(),
            dim: self.dim(),
            step,
            n_params: self.n_params(),
            n_state: state.len(),
            dtype: "f32le".into(),
            params_file: bin,
            flow,
        };
        write_json(&dir.join(format!("{stem}.json")), &m)
    }

    pub fn load(manifest: &Path) -> Result<(Self, usize)> {
        let m: FamilyManifest = read_json(manifest)?;
        if m.format != FAMILY_FORMAT || m.dtype != "f32le" {
            return Err(Error::Format(format!("unsupported family format {} / {}", m.format, m.dtype)));
        }
        let dir = manifest.parent().unwrap_or(Path::new("."));
        let bytes = std::fs::read(dir.join(&m.params_file))?;
        if bytes.len() != 4 * (m.n_params + m.n_state) {
            return Err(Error::Format("family blob length disagrees with manifest".into()));
        }
        let vals: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let (p, s) = vals.split_at(m.n_params);
        let fam = match (m.kind.as_str(), m.flow) {
            ("diag_gaussian", None) => {
                if m.n_params != 2 * m.dim {
                    return Err(Error::Format("diag Gaussian parameter count".into()));
                }
                Family::DiagGaussian(DiagGaussian::new(p[..m.dim].to_vec(), p[m.dim..].to_vec())?)
            }
            ("real_nvp", Some(info)) => Family::RealNvp(RealNvp::from_parts(info, m.dim, p.to_vec(), s)?),
            (k, _) => return Err(Error::Format(format!("unknown family kind {k}"))),
        };
        Ok((fam, m.step))
    }
}

const FAMILY_FORMAT: &str = "spvi-family-v1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FamilyManifest {
    format: String,
    kind: String,
    dim: usize,
    step: usize,
    n_params: usize,
    n_state: usize,
    dtype: String,
    params_file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    flow: Option<realnvp::FlowInfo>,
}

impl Variational for Family {
    fn dim(&self) -> usize {
        self.inner().dim()
    }
    fn params(&self) -> &[f64] {
        self.inner().params()
    }
    fn params_mut(&mut self) -> &mut [f64] {
        self.inner_mut().params_mut()
    }
    fn transform(&self, eps: &[f64]) -> (Vec<f64>, f64) {
        self.inner().transform(eps)
    }
    fn inverse(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.inner().inverse(x)
    }
    fn transform_vjp(&self, eps: &[f64], gx: &[f64], c: f64) -> (Vec<f64>, Vec<f64>) {
        self.inner().transform_vjp(eps, gx, c)
    }
    fn after_step(&mut self, eps: &[Vec<f64>]) {
        self.inner_mut().after_step(eps)
    }
    fn representative_mean(&self, seed: u64) -> Vec<f64> {
        self.inner().representative_mean(seed)
    }
}
