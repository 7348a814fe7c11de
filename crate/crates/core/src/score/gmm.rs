use serde::{Deserialize, Serialize};

use super::gaussian::{Diffused, EigenGaussian};
use super::{check_score_time, ScoreField, ScoreKind};
use crate::diffusion::DiffusionSpec;
use crate::error::{check_dim, Error, Result};
use crate::linalg::dot;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmPriorSpec {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub covariances: Vec<Vec<Vec<f64>>>,
}

impl GmmPriorSpec {
    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.weights.len();
        if k == 0 {
            return Err(Error::InvalidParameter("mixture needs at least one component".into()));
        }
        check_dim(k, self.means.len())?;
        check_dim(k, self.covariances.len())?;
        if self.weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::InvalidParameter("negative mixture weight".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParameter(format!("mixture weights sum to {total}")));
        }
        Ok(())
    }
}

/// Exact score of a diffused Gaussian mixture.
#[derive(Debug, Clone)]
pub struct GmmScore {
    prior: GmmPriorSpec,
    log_w: Vec<f64>,
    comps: Vec<EigenGaussian>,
    spec: DiffusionSpec,
}

struct MixtureEval {
    score: Vec<f64>,
    resp: Vec<f64>,
    comp_scores: Vec<Vec<f64>>,
    log_density: f64,
}

impl GmmScore {
    pub fn new(prior: GmmPriorSpec, spec: DiffusionSpec) -> Result<Self> {
        spec.validate()?;
        prior.validate()?;
        let comps = prior
            .means
            .iter()
            .zip(&prior.covariances)
            .map(|(m, c)| {
                check_dim(spec.dim, m.len())?;
                EigenGaussian::new(m, c)
            })
            .collect::<Result<Vec<_>>>()?;
        let log_w = prior.weights.iter().map(|w| w.ln()).collect();
        Ok(Self {
            prior,
            log_w,
            comps,
            spec,
        })
    }

    pub fn prior(&self) -> &GmmPriorSpec {
        &self.prior
    }

    /// Override the log-weights directly, bypassing the simplex round trip.
    /// Useful for mixtures whose weights underflow in linear scale.
    pub fn with_log_weights(mut self, log_w: Vec<f64>) -> Result<Self> {
        check_dim(self.comps.len(), log_w.len())?;
        let lse = crate::linalg::log_sum_exp(&log_w);
        if !lse.is_finite() {
            return Err(Error::InvalidParameter("log-weights do not normalize".into()));
        }
        self.log_w = log_w.iter().map(|l| l - lse).collect();
        Ok(self)
    }

    /// Log-density of the diffused marginal; `t = 0` gives the prior.
    pub fn log_density(&self, x: &[f64], t: f64) -> Result<f64> {
        check_dim(self.spec.dim, x.len())?;
        let (a, r) = self.spec.kernel_params(t)?;
        Ok(self.eval_at(x, a, r).0.log_density)
    }

    /// Posterior component probabilities under the diffused marginal.
    pub fn responsibilities(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        check_dim(self.spec.dim, x.len())?;
        let (a, r) = self.spec.kernel_params(t)?;
        Ok(self.eval_at(x, a, r).0.resp)
    }

    fn eval_at(&self, x: &[f64], alpha: f64, rho: f64) -> (MixtureEval, Vec<Diffused<'_>>) {
        let diffs: Vec<Diffused<'_>> = self.comps.iter().map(|c| c.diffused(alpha, rho)).collect();
        let mut comp_scores = Vec::with_capacity(diffs.len());
        let mut logits = Vec::with_capacity(diffs.len());
        for (d, lw) in diffs.iter().zip(&self.log_w) {
            let (s, lp) = d.score_logpdf(x);
            comp_scores.push(s);
            logits.push(lw + lp);
        }
        let lse = crate::linalg::log_sum_exp(&logits);
        let resp: Vec<f64> = logits.iter().map(|l| (l - lse).exp()).collect();
        let mut score = vec![0.0; x.len()];
        for (r, s) in resp.iter().zip(&comp_scores) {
            if *r > 0.0 {
                crate::linalg::axpy(*r, s, &mut score);
            }
        }
        (
            MixtureEval {
                score,
                resp,
                comp_scores,
                log_density: lse,
            },
            diffs,
        )
    }

    fn eval(&self, x: &[f64], t: f64) -> Result<(MixtureEval, Vec<Diffused<'_>>)> {
        check_dim(self.spec.dim, x.len())?;
        check_score_time(&self.spec, t)?;
        let (a, r) = self.spec.kernel_unchecked(t);
        Ok(self.eval_at(x, a, r))
    }

    /// `Jᵀc` with `J = Σ r_k J_k + Σ r_k s_k s_kᵀ - s sᵀ` (symmetric).
    fn pullback(ev: &MixtureEval, diffs: &[Diffused<'_>], c: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; c.len()];
        for ((r, sk), d) in ev.resp.iter().zip(&ev.comp_scores).zip(diffs) {
            if *r == 0.0 {
                continue;
            }
            let pc = d.apply_precision(c);
            crate::linalg::axpy(-r, &pc, &mut out);
            crate::linalg::axpy(r * dot(sk, c), sk, &mut out);
        }
        crate::linalg::axpy(-dot(&ev.score, c), &ev.score, &mut out);
        out
    }
}

impl ScoreField for GmmScore {
    fn dim(&self) -> usize {
        self.spec.dim
    }

    fn kind(&self) -> ScoreKind {
        ScoreKind::GmmAnalytic
    }

    fn diffusion(&self) -> &DiffusionSpec {
        &self.spec
    }

    fn score(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        Ok(self.eval(x, t)?.0.score)
    }

    fn score_and_pullback(
        &self,
        x: &[f64],
        t: f64,
        cot: &mut dyn FnMut(&[f64]) -> Vec<f64>,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let (ev, diffs) = self.eval(x, t)?;
        let c = cot(&ev.score);
        let v = Self::pullback(&ev, &diffs, &c);
        Ok((ev.score, v))
    }

    fn score_vjps(&self, x: &[f64], t: f64, cots: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let (ev, diffs) = self.eval(x, t)?;
        let v = cots.iter().map(|c| Self::pullback(&ev, &diffs, c)).collect();
        Ok((ev.score, v))
    }
}
