//! Score fields `s(x, t) ≈ ∇ₓ log p_t(x)` of diffused priors.
//!
//! Besides the score itself every provider supplies vector-Jacobian products
//! of the score with respect to `x`; the prior evaluators build all of their
//! gradients from those.

mod gaussian;
mod gmm;
mod network;

pub use gaussian::{GaussianPriorSpec, GaussianScore};
pub use gmm::{GmmPriorSpec, GmmScore};
pub use network::{train_dsm, ScoreNet, ScoreNetSpec, TrainOutcome, TrainSchedule};

use serde::{Deserialize, Serialize};

use crate::diffusion::{DiffusionSpec, HORIZON};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreKind {
    GaussianAnalytic,
    GmmAnalytic,
    Network,
}

pub trait ScoreField: Send + Sync {
    fn dim(&self) -> usize;

    fn kind(&self) -> ScoreKind;

    fn diffusion(&self) -> &DiffusionSpec;

    fn score(&self, x: &[f64], t: f64) -> Result<Vec<f64>>;

    /// Score together with `J(x)ᵀc` where `J = ∂s/∂x` and the cotangent `c`
    /// is computed from the score by `cot`.
    fn score_and_pullback(
        &self,
        x: &[f64],
        t: f64,
        cot: &mut dyn FnMut(&[f64]) -> Vec<f64>,
    ) -> Result<(Vec<f64>, Vec<f64>)>;

    /// Score together with `J(x)ᵀc` for each of the given cotangents.
    fn score_vjps(&self, x: &[f64], t: f64, cots: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<Vec<f64>>)>;

    /// Gradient `∇ₓ(εᵀJ(x)ε)` of a Jacobian quadratic form. This is the
    /// derivative of the pullback `J(x)ᵀε` along `ε`; the default takes a
    /// central difference of it (exact for affine scores).
    fn quad_form_grad(&self, x: &[f64], t: f64, eps: &[f64]) -> Result<Vec<f64>> {
        let h = 1e-3 / crate::linalg::norm(eps).max(1e-300);
        let xp: Vec<f64> = x.iter().zip(eps).map(|(a, e)| a + h * e).collect();
        let xm: Vec<f64> = x.iter().zip(eps).map(|(a, e)| a - h * e).collect();
        let c = vec![eps.to_vec()];
        let (_, vp) = self.score_vjps(&xp, t, &c)?;
        let (_, vm) = self.score_vjps(&xm, t, &c)?;
        Ok(vp[0].iter().zip(&vm[0]).map(|(a, b)| (a - b) / (2.0 * h)).collect())
    }
}

pub(crate) fn check_score_time(spec: &DiffusionSpec, t: f64) -> Result<()> {
    if !(t >= spec.t_eps && t <= HORIZON) {
        return Err(Error::TimeOutOfRange {
            t,
            lo: spec.t_eps,
            hi: HORIZON,
        });
    }
    Ok(())
}
