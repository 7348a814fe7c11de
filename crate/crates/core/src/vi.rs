//! Variational optimization: Monte-Carlo objective, Adam steps, snapshot
//! convergence and checkpointing.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{flux_penalty, Measurement};
use crate::io::write_atomic;
use crate::linalg::{norm, std_normal_logpdf, sub};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::prior::{elbo_estimate_grad, ode_logprob_grad, tv_penalty, OdeConfig, SurrogateConfig};
use crate::rng::{derive_seed, normal_vec, stream};
use crate::score::ScoreField;
use crate::variational::{Family, Variational};

/// Which log-prior enters the objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PriorKind {
    Surrogate {
        #[serde(default = "one")]
        n_time: usize,
        #[serde(default = "one")]
        n_noise: usize,
    },
    Exact(OdeConfig),
    Tv {
        weight: f64,
    },
}

fn one() -> usize {
    1
}

impl PriorKind {
    pub fn name(&self) -> &'static str {
        match self {
            PriorKind::Surrogate { .. } => "surrogate",
            PriorKind::Exact(_) => "exact",
            PriorKind::Tv { .. } => "tv",
        }
    }

    /// Default learning rate for the prior kind.
    pub fn default_lr(&self) -> f64 {
        match self {
            PriorKind::Surrogate { .. } => 1e-5,
            PriorKind::Exact(_) | PriorKind::Tv { .. } => 2e-4,
        }
    }
}

/// A log-prior ready for evaluation.
#[derive(Clone, Copy)]
pub enum PriorTerm<'a> {
    Surrogate {
        score: &'a dyn ScoreField,
        cfg: SurrogateConfig,
    },
    Exact {
        score: &'a dyn ScoreField,
        cfg: OdeConfig,
    },
    Tv {
        weight: f64,
        shape: Option<(usize, usize)>,
    },
}

impl<'a> PriorTerm<'a> {
    pub fn new(kind: &PriorKind, score: Option<&'a dyn ScoreField>, shape: Option<(usize, usize)>) -> Result<Self> {
        let need = || score.ok_or_else(|| Error::InvalidParameter("score-based prior needs a score model".into()));
        Ok(match *kind {
            PriorKind::Surrogate { n_time, n_noise } => {
                let cfg = SurrogateConfig { n_time, n_noise };
                cfg.validate()?;
                PriorTerm::Surrogate { score: need()?, cfg }
            }
            PriorKind::Exact(cfg) => {
                let score = need()?;
                cfg.validate(score.dim())?;
                PriorTerm::Exact { score, cfg }
            }
            PriorKind::Tv { weight } => {
                if !(weight >= 0.0 && weight.is_finite()) {
                    return Err(Error::InvalidParameter("TV weight must be non-negative".into()));
                }
                PriorTerm::Tv { weight, shape }
            }
        })
    }

    /// Log-prior value (or surrogate) and its gradient at `x`.
    pub fn log_prior_grad(&self, x: &[f64], rng: &mut crate::rng::SpviRng) -> Result<(f64, Vec<f64>)> {
        match self {
            PriorTerm::Surrogate { score, cfg } => elbo_estimate_grad(*score, x, rng, cfg),
            PriorTerm::Exact { score, cfg } => {
                let r = ode_logprob_grad(*score, x, rng, cfg)?;
                Ok((r.value, r.grad.expect("gradient requested")))
            }
            PriorTerm::Tv { weight, shape } => {
                if *weight == 0.0 {
                    return Ok((0.0, vec![0.0; x.len()]));
                }
                let (v, g) = tv_penalty(x, *shape, *weight)?;
                Ok((-v, g.into_iter().map(|gi| -gi).collect()))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FluxConfig {
    pub target: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViConfig {
    /// Defaults to the prior kind's learning rate.
    #[serde(default)]
    pub lr: Option<f64>,
    #[serde(default = "default_clip")]
    pub clip: Option<f64>,
    pub batch_size: usize,
    pub max_steps: usize,
    pub snapshot_interval: usize,
    pub epsilon: f64,
    pub seed: u64,
    #[serde(default)]
    pub snapshot_seed: Option<u64>,
    #[serde(default)]
    pub flux: Option<FluxConfig>,
}

fn default_clip() -> Option<f64> {
    Some(1.0)
}

impl ViConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.snapshot_interval == 0 {
            return Err(Error::InvalidParameter("batch size and snapshot interval must be positive".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::InvalidParameter("epsilon must lie in (0, 1)".into()));
        }
        if let Some(lr) = self.lr {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::InvalidParameter("learning rate must be positive".into()));
            }
        }
        if let Some(c) = self.clip {
            if !(c > 0.0) {
                return Err(Error::InvalidParameter("gradient clip must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn snapshot_seed(&self) -> u64 {
        self.snapshot_seed.unwrap_or_else(|| derive_seed(self.seed, 0x5A4B))
    }
}

/// Batch objective and its parameter gradient.
#[derive(Debug, Clone)]
pub struct Objective {
    pub loss: f64,
    pub grad: Vec<f64>,
    /// Base noise of each batch member.
    pub eps: Vec<Vec<f64>>,
}

const OBJECTIVE_CHUNK: usize = 8;

/// `mean_i [-log p(y|x_i) - log p̂(x_i) + log q(x_i)]` with `x_i = T(ε_i)`.
/// The likelihood includes its normalizing constant. Batch member `i` at
/// step `step` draws from its own stream, so results do not depend on
/// thread scheduling.
pub fn objective(
    family: &dyn Variational,
    y: &Measurement,
    prior: &PriorTerm,
    flux: Option<&FluxConfig>,
    seed: u64,
    step: u64,
    batch: usize,
) -> Result<Objective> {
    let d = family.dim();
    let step_seed = derive_seed(seed, step);
    let log_norm = y.log_normalizer();
    let w = 1.0 / batch as f64;
    let one = |i: usize| -> Result<(f64, Vec<f64>, Vec<f64>)> {
        let mut rng = stream(step_seed, i as u64);
        let eps = normal_vec(&mut rng, d);
        let (x, ld) = family.transform(&eps);
        let (ll, gll) = y.log_likelihood_grad(&x)?;
        let (lp, glp) = prior.log_prior_grad(&x, &mut rng)?;
        let lq = std_normal_logpdf(&eps) - ld;
        let mut loss = -(ll + log_norm) - lp + lq;
        let mut gx: Vec<f64> = gll.iter().zip(&glp).map(|(a, b)| -a - b).collect();
        if let Some(f) = flux {
            let (v, g) = flux_penalty(&x, f.target, f.weight);
            loss += v;
            gx.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "objective at step {step}, sample {i}: log-lik {ll}, log-prior {lp}, log q {lq}"
            )));
        }
        let (gp, _) = family.transform_vjp(&eps, &gx, -1.0);
        Ok((loss, gp, eps))
    };
    // Fixed chunks reduced in order keep the result independent of the
    // thread count without holding one gradient per sample.
    let chunks: Vec<Result<(f64, Vec<f64>, Vec<Vec<f64>>)>> = (0..batch.div_ceil(OBJECTIVE_CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut loss = 0.0;
            let mut grad = vec![0.0; family.n_params()];
            let mut eps = Vec::with_capacity(OBJECTIVE_CHUNK);
            for i in c * OBJECTIVE_CHUNK..((c + 1) * OBJECTIVE_CHUNK).min(batch) {
                let (l, g, e) = one(i)?;
                loss += w * l;
                grad.iter_mut().zip(&g).for_each(|(a, b)| *a += w * b);
                eps.push(e);
            }
            Ok((loss, grad, eps))
        })
        .collect();
    let mut loss = 0.0;
    let mut grad = vec![0.0; family.n_params()];
    let mut all_eps = Vec::with_capacity(batch);
    for r in chunks {
        let (l, g, e) = r?;
        loss += l;
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        all_eps.extend(e);
    }
    Ok(Objective {
        loss,
        grad,
        eps: all_eps,
    })
}

/// Relative changes `‖μ_k - μ_{k-1}‖ / ‖μ_{k-1}‖` between consecutive
/// snapshots.
pub fn snapshot_deltas(snapshots: &[Vec<f64>]) -> Result<Vec<f64>> {
    snapshots
        .windows(2)
        .map(|w| {
            let n = norm(&w[0]);
            if n == 0.0 {
                return Err(Error::InvalidParameter("relative change undefined for a zero-norm snapshot".into()));
            }
            Ok(norm(&sub(&w[1], &w[0])) / n)
        })
        .collect()
}

/// True iff there are at least three snapshots and the last two relative
/// changes are both below `eps`.
pub fn converged(snapshots: &[Vec<f64>], eps: f64) -> Result<bool> {
    if snapshots.len() < 3 {
        return Ok(false);
    }
    let d = snapshot_deltas(&snapshots[snapshots.len() - 3..])?;
    Ok(d[0] < eps && d[1] < eps)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub smoothed: f64,
    pub ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotRecord {
    pub step: usize,
    pub delta: Option<f64>,
    pub checkpoint: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub steps: Vec<StepRecord>,
    pub snapshots: Vec<SnapshotRecord>,
    pub converged: bool,
}

/// Smoothing window of the reported loss trace.
pub const LOSS_WINDOW: usize = 100;

impl RunHistory {
    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }

    pub fn mean_ms_per_step(&self) -> f64 {
        if self.steps.is_empty() {
            return 0.0;
        }
        self.steps.iter().map(|s| s.ms).sum::<f64>() / self.steps.len() as f64
    }

    /// `step,loss,loss_smoothed,delta,ms_per_step`; `delta` is filled on
    /// snapshot steps.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss,loss_smoothed,delta,ms_per_step\n");
        let mut snaps = self.snapshots.iter().filter(|r| r.delta.is_some()).peekable();
        for r in &self.steps {
            let mut delta = String::new();
            if let Some(sn) = snaps.peek() {
                if sn.step == r.step {
                    delta = format!("{:e}", sn.delta.unwrap());
                    snaps.next();
                }
            }
            let _ = writeln!(s, "{},{:e},{:e},{},{:.4}", r.step, r.loss, r.smoothed, delta, r.ms);
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }
}

/// Optimize `family` in place until convergence or `max_steps`. When
/// `checkpoint_dir` is given, the family is saved there at every snapshot
/// as `step_N`.
pub fn fit(
    y: &Measurement,
    prior: &PriorTerm,
    prior_kind: &PriorKind,
    family: &mut Family,
    cfg: &ViConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<RunHistory> {
    cfg.validate()?;
    crate::error::check_dim(crate::forward::Forward::input_dim(&y.op), family.dim())?;
    let mut hist = RunHistory::default();
    if cfg.max_steps == 0 {
        return Ok(hist);
    }
    let adam = AdamConfig::new(cfg.lr.unwrap_or_else(|| prior_kind.default_lr()), cfg.clip);
    let mut state = AdamState::new(family.n_params());
    let snap_seed = cfg.snapshot_seed();
    let mut snaps = vec![family.representative_mean(snap_seed)];
    let save = |family: &Family, step: usize| -> Result<Option<String>> {
        match checkpoint_dir {
            Some(dir) => {
                let stem = format!("step_{step}");
                family.save(dir, &stem, step)?;
                Ok(Some(PathBuf::from(format!("{stem}.json")).display().to_string()))
            }
            None => Ok(None),
        }
    };
    hist.snapshots.push(SnapshotRecord {
        step: 0,
        delta: None,
        checkpoint: save(family, 0)?,
    });
    let alpha = 2.0 / (LOSS_WINDOW as f64 + 1.0);
    let mut ema = f64::NAN;
    for k in 0..cfg.max_steps {
        let t0 = Instant::now();
        let mut obj = objective(&*family, y, prior, cfg.flux.as_ref(), cfg.seed, k as u64, cfg.batch_size)?;
        adam_step(&adam, &mut state, family.params_mut(), &mut obj.grad).map_err(|e| match e {
            Error::NonFinite(m) => Error::NonFinite(format!("{m} at step {}", k + 1)),
            e => e,
        })?;
        family.after_step(&obj.eps);
        let ms = t0.elapsed().as_secs_f64() * 1e3;
        ema = if ema.is_nan() { obj.loss } else { alpha * obj.loss + (1.0 - alpha) * ema };
        let step = k + 1;
        hist.steps.push(StepRecord {
            step,
            loss: obj.loss,
            smoothed: ema,
            ms,
        });
        if step % cfg.snapshot_interval == 0 {
            snaps.push(family.representative_mean(snap_seed));
            let delta = snapshot_deltas(&snaps[snaps.len() - 2..])?[0];
            hist.snapshots.push(SnapshotRecord {
                step,
                delta: Some(delta),
                checkpoint: save(family, step)?,
            });
            if converged(&snaps, cfg.epsilon)? {
                hist.converged = true;
                break;
            }
        }
    }
    Ok(hist)
}
