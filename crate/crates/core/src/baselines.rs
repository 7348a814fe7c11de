//! Diffusion-guidance baselines for low-dimensional studies: reverse SDE with
//! measurement projection, annealed Langevin with likelihood guidance, and
//! posterior-mean (Tweedie) guided sampling. Each is driven by one scalar
//! guidance weight and swept over a grid.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::DiffusionSpec;
use crate::error::{check_dim, Error, Result};
use crate::eval::{gmm_fit_kl, gmm_log_density, gmm_posterior};
use crate::forward::{DenseOp, Forward, ForwardOp, Measurement};
use crate::linalg::norm;
use crate::rng::{derive_seed, normal_vec, stream};
use crate::score::{GmmPriorSpec, GmmScore, ScoreField};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    SdeProj,
    ScoreAld,
    Dps,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::SdeProj, Method::ScoreAld, Method::Dps];

    pub fn name(&self) -> &'static str {
        match self {
            Method::SdeProj => "sde_proj",
            Method::ScoreAld => "score_ald",
            Method::Dps => "dps",
        }
    }
}

/// How the single annealed-Langevin weight enters the sampler.
pub const ALD_MAPPING: &str = "guided score s(x,t) + (1/gamma_T) * A^T (alpha(t) y - A x) / (alpha(t)^2 sigma_y^2 + rho(t)^2); \
n_steps_each Langevin steps per noise level with step size 2 (1 - beta(t) dt) (snr |z| / |g|)^2 from batch-mean norms; \
output is the final noise-free update";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    /// Uniform reverse-time steps (noise levels for Langevin).
    #[serde(default = "default_steps")]
    pub n_steps: usize,
    #[serde(default = "default_steps_each")]
    pub n_steps_each: usize,
    #[serde(default = "default_snr")]
    pub snr: f64,
}

fn default_steps() -> usize {
    1000
}
fn default_steps_each() -> usize {
    3
}
fn default_snr() -> f64 {
    0.212
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_steps: default_steps(),
            n_steps_each: default_steps_each(),
            snr: default_snr(),
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 || self.n_steps_each == 0 || !(self.snr > 0.0) {
            return Err(Error::InvalidParameter("sampler steps and snr must be positive".into()));
        }
        Ok(())
    }
}

/// One Euler–Maruyama step of the reverse SDE from `t` to `t - dt`.
fn reverse_em(spec: &DiffusionSpec, x: &mut [f64], s: &[f64], t: f64, dt: f64, z: &[f64]) {
    let b = spec.g2(t);
    let sd = (b * dt).sqrt();
    for i in 0..x.len() {
        x[i] += (0.5 * b * x[i] + b * s[i]) * dt + sd * z[i];
    }
}

fn run_parallel<F>(n: usize, seed: u64, f: F) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut crate::rng::SpviRng) -> Result<Vec<f64>> + Sync,
{
    (0..n)
        .into_par_iter()
        .map(|j| f(&mut stream(seed, j as u64)))
        .collect()
}

/// Unconditional reverse-SDE samples.
pub fn reverse_sde_sample(score: &dyn ScoreField, n: usize, cfg: &SamplerConfig, seed: u64) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    let spec = *score.diffusion();
    let grid = spec.reverse_grid(cfg.n_steps);
    run_parallel(n, seed, |rng| {
        let mut x = normal_vec(rng, spec.dim);
        for w in grid.windows(2) {
            let s = score.score(&x, w[0])?;
            let z = normal_vec(rng, spec.dim);
            reverse_em(&spec, &mut x, &s, w[0], w[0] - w[1], &z);
        }
        Ok(x)
    })
}

fn linear_check(op: &ForwardOp) -> Result<()> {
    if op.is_linear() {
        Ok(())
    } else {
        Err(Error::Unsupported(format!("{} is not a linear operator", op.model_id())))
    }
}

/// Reverse SDE where, at every level, the state moves a fraction `lambda`
/// of the way toward the affine set `{x : A x = ŷ_t}` with the noised
/// measurement `ŷ_t = α(t) y + ρ(t) A ξ`.
pub fn sde_proj_sample(
    score: &dyn ScoreField,
    y: &Measurement,
    lambda: f64,
    n: usize,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    let a = match &y.op {
        ForwardOp::Dense(a) => a.clone(),
        ForwardOp::Denoise(d) => DenseOp::identity(d.dim),
        op => return Err(Error::Unsupported(format!("projection needs a dense linear operator, got {}", op.model_id()))),
    };
    check_dim(score.dim(), a.cols)?;
    let pinv = a.pseudo_inverse()?;
    let spec = *score.diffusion();
    let grid = spec.reverse_grid(cfg.n_steps);
    run_parallel(n, seed, |rng| {
        let mut x = normal_vec(rng, spec.dim);
        for w in grid.windows(2) {
            let t = w[0];
            if lambda != 0.0 {
                let (al, rh) = spec.kernel_unchecked(t);
                let xi = normal_vec(rng, spec.dim);
                let axi = a.apply(&xi);
                let ax = a.apply(&x);
                let r: Vec<f64> = (0..a.rows).map(|k| al * y.values[k] + rh * axi[k] - ax[k]).collect();
                let corr = pinv.apply(&r);
                x.iter_mut().zip(&corr).for_each(|(xi, c)| *xi += lambda * c);
            }
            let s = score.score(&x, t)?;
            let z = normal_vec(rng, spec.dim);
            reverse_em(&spec, &mut x, &s, t, t - w[1], &z);
        }
        Ok(x)
    })
}

/// Annealed Langevin dynamics over the reverse-time levels with likelihood
/// guidance weighted by `1/gamma_t`; `gamma_t = ∞` is unguided.
///
/// The batch moves in lockstep: each Langevin step uses one step size
/// `2a (snr ‖z‖ / ‖g‖)²` from batch-averaged norms, with `a = 1 - β(t)Δt`.
/// The returned state is the last noise-free update.
pub fn ald_sample(
    score: &dyn ScoreField,
    y: &Measurement,
    gamma_t: f64,
    n: usize,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    linear_check(&y.op)?;
    check_dim(score.dim(), y.op.input_dim())?;
    if !(gamma_t > 0.0) {
        return Err(Error::InvalidParameter("gamma_T must be positive".into()));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let weight = 1.0 / gamma_t;
    let spec = *score.diffusion();
    let grid = spec.reverse_grid(cfg.n_steps);
    let dt = grid[0] - grid[1];
    let s2: Vec<f64> = y.noise_sigma.iter().map(|s| s * s).collect();
    let mut rngs: Vec<_> = (0..n).map(|j| stream(seed, j as u64)).collect();
    let mut xs: Vec<Vec<f64>> = rngs.iter_mut().map(|r| normal_vec(r, spec.dim)).collect();
    let mut means = xs.clone();
    for &t in &grid[1..] {
        let (al, rh) = spec.kernel_unchecked(t);
        let a = 1.0 - spec.g2(t) * dt;
        for _ in 0..cfg.n_steps_each {
            let gz: Vec<(Vec<f64>, Vec<f64>)> = xs
                .par_iter()
                .zip(rngs.par_iter_mut())
                .map(|(x, rng)| {
                    let mut g = score.score(x, t)?;
                    if weight != 0.0 {
                        let ax = y.op.forward(x)?;
                        let c: Vec<f64> = (0..ax.len())
                            .map(|k| weight * (al * y.values[k] - ax[k]) / (al * al * s2[k] + rh * rh))
                            .collect();
                        let gl = y.op.vjp(x, &c)?;
                        g.iter_mut().zip(&gl).for_each(|(a, b)| *a += b);
                    }
                    Ok((g, normal_vec(rng, spec.dim)))
                })
                .collect::<Result<_>>()?;
            let gn = gz.iter().map(|(g, _)| norm(g)).sum::<f64>() / n as f64;
            let zn = gz.iter().map(|(_, z)| norm(z)).sum::<f64>() / n as f64;
            if !(gn > 0.0 && gn.is_finite()) {
                return Err(Error::NonFinite(format!("Langevin gradient norm {gn} at t = {t}")));
            }
            let eta = 2.0 * a * (cfg.snr * zn / gn).powi(2);
            let sd = (2.0 * eta).sqrt();
            for ((x, m), (g, z)) in xs.iter_mut().zip(means.iter_mut()).zip(&gz) {
                for i in 0..x.len() {
                    m[i] = x[i] + eta * g[i];
                    x[i] = m[i] + sd * z[i];
                }
            }
        }
    }
    Ok(means)
}

/// Reverse SDE with a correction `-ζ ∇ₓ‖y - F(x̂₀(x))‖` at every step, where
/// `x̂₀ = (x + ρ² s)/α` is the posterior-mean estimate. Works for nonlinear
/// operators.
pub fn dps_sample(
    score: &dyn ScoreField,
    y: &Measurement,
    zeta: f64,
    n: usize,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    check_dim(score.dim(), y.op.input_dim())?;
    let spec = *score.diffusion();
    let grid = spec.reverse_grid(cfg.n_steps);
    run_parallel(n, seed, |rng| {
        let mut x = normal_vec(rng, spec.dim);
        for w in grid.windows(2) {
            let t = w[0];
            let (al, rh) = spec.kernel_unchecked(t);
            let (s, guide) = if zeta == 0.0 {
                (score.score(&x, t)?, None)
            } else {
                // Cotangent g = ∂‖r‖/∂x̂₀ evaluated from the score; the pullback
                // supplies ρ²Jᵀg for the chain rule through x̂₀.
                let mut err = None;
                let mut g_keep = Vec::new();
                let (s, jt) = score.score_and_pullback(&x, t, &mut |s: &[f64]| {
                    let x0: Vec<f64> = x.iter().zip(s).map(|(xi, si)| (xi + rh * rh * si) / al).collect();
                    let g = y.op.forward(&x0).and_then(|fx| {
                        let r = y.op.residual(&y.values, &fx);
                        let rn = norm(&r);
                        if rn == 0.0 {
                            return Ok(vec![0.0; x0.len()]);
                        }
                        let c: Vec<f64> = r.iter().map(|v| -v / rn).collect();
                        y.op.vjp(&x0, &c)
                    });
                    match g {
                        Ok(g) => {
                            g_keep = g.clone();
                            g
                        }
                        Err(e) => {
                            err = Some(e);
                            vec![0.0; x.len()]
                        }
                    }
                })?;
                if let Some(e) = err {
                    return Err(e);
                }
                let gx: Vec<f64> = g_keep.iter().zip(&jt).map(|(g, j)| (g + rh * rh * j) / al).collect();
                (s, Some(gx))
            };
            let z = normal_vec(rng, spec.dim);
            reverse_em(&spec, &mut x, &s, t, t - w[1], &z);
            if let Some(gx) = guide {
                x.iter_mut().zip(&gx).for_each(|(xi, g)| *xi -= zeta * g);
            }
        }
        Ok(x)
    })
}

pub fn sample(
    method: Method,
    score: &dyn ScoreField,
    y: &Measurement,
    weight: f64,
    n: usize,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    match method {
        Method::SdeProj => sde_proj_sample(score, y, weight, n, cfg, seed),
        Method::ScoreAld => ald_sample(score, y, weight, n, cfg, seed),
        Method::Dps => dps_sample(score, y, weight, n, cfg, seed),
    }
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![a];
    }
    let mut v: Vec<f64> = (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect();
    v[n - 1] = b;
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub method: Method,
    pub values: Vec<f64>,
    pub samples_per_value: usize,
}

impl SweepGrid {
    /// Reference 100-point grids: projection weight `λ ∈ [0.001, 0.5]`,
    /// `γ_T` from 100 down to 0.8, and log-spaced `ζ ∈ [0.001, 0.15]`.
    pub fn reference(method: Method, samples_per_value: usize) -> Self {
        let values = match method {
            Method::SdeProj => linspace(0.001, 0.5, 100),
            Method::ScoreAld => linspace(100.0, 0.8, 100),
            Method::Dps => linspace(0.001f64.ln(), 0.15f64.ln(), 100).into_iter().map(f64::exp).collect(),
        };
        Self {
            method,
            values,
            samples_per_value,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() || self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("sweep grid must be nonempty and finite".into()));
        }
        if self.samples_per_value < 100 {
            return Err(Error::InvalidParameter("sweeps need at least 100 samples per value".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub method: Method,
    pub weight: f64,
    /// Infinite when the sample set is degenerate (see `degenerate`).
    #[serde(with = "nonfinite")]
    pub kl: f64,
    #[serde(with = "nonfinite")]
    pub kl_se: f64,
    pub n_samples: usize,
    pub seed: u64,
    /// The samples collapsed onto a lower-dimensional set, so no mixture
    /// density fits them and the reverse KL is infinite.
    #[serde(default)]
    pub degenerate: bool,
}

/// JSON has no infinities; non-finite values are written as strings.
mod nonfinite {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str(&v.to_string())
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub points: Vec<SweepPoint>,
    pub samples: Vec<Vec<Vec<f64>>>,
}

impl SweepResult {
    /// Index of the grid value with the smallest KL.
    pub fn oracle(&self) -> usize {
        self.points
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.kl.total_cmp(&b.1.kl))
            .map(|(i, _)| i)
            .expect("nonempty sweep")
    }

    /// False when the best value sits at either end of the grid, i.e. the
    /// grid may not bracket the optimum.
    pub fn interior_minimum(&self) -> bool {
        let i = self.oracle();
        i != 0 && i + 1 != self.points.len()
    }
}

/// Sample at every grid value and score each sample set by the GMM-fit
/// reverse KL against `posterior`.
pub fn run_sweep(
    grid: &SweepGrid,
    score: &dyn ScoreField,
    y: &Measurement,
    posterior: &GmmPriorSpec,
    cfg: &SamplerConfig,
    seed: u64,
    keep_samples: bool,
) -> Result<SweepResult> {
    grid.validate()?;
    let mut points = Vec::with_capacity(grid.values.len());
    let mut samples = Vec::new();
    for (k, &v) in grid.values.iter().enumerate() {
        let ps = derive_seed(seed, k as u64);
        let xs = sample(grid.method, score, y, v, grid.samples_per_value, cfg, ps)?;
        let fit = gmm_fit_kl(&xs, |x| gmm_log_density(posterior, x).unwrap_or(f64::NAN), &mut stream(ps, u64::MAX));
        let (kl, se, degenerate) = match fit {
            Ok((kl, se)) => (kl, se, false),
            Err(Error::DegenerateFit(_)) => (f64::INFINITY, f64::NAN, true),
            Err(e) => return Err(e),
        };
        points.push(SweepPoint {
            method: grid.method,
            weight: v,
            kl,
            kl_se: se,
            n_samples: xs.len(),
            seed: ps,
            degenerate,
        });
        if keep_samples {
            samples.push(xs);
        }
    }
    Ok(SweepResult { points, samples })
}

/// Mixture prior with a linear-Gaussian measurement; the posterior is again
/// a mixture in closed form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureProblem {
    pub prior: GmmPriorSpec,
    pub op: DenseOp,
    pub y: Vec<f64>,
    pub sigma_y: f64,
}

impl MixtureProblem {
    /// `0.65·N([-1.5, 0], 0.09 I) + 0.35·N([1.5, 0], 0.09 I)` observed through
    /// the first coordinate with `σ_y = 0.7` at `y = 0.25`. The posterior
    /// keeps both modes, with the weight shifted toward the smaller prior
    /// component.
    pub fn canonical_bimodal() -> Self {
        let c = vec![vec![0.09, 0.0], vec![0.0, 0.09]];
        Self {
            prior: GmmPriorSpec {
                weights: vec![0.65, 0.35],
                means: vec![vec![-1.5, 0.0], vec![1.5, 0.0]],
                covariances: vec![c.clone(), c],
            },
            op: DenseOp::new(1, 2, vec![1.0, 0.0]).expect("valid operator"),
            y: vec![0.25],
            sigma_y: 0.7,
        }
    }

    /// Single-Gaussian variant with the same measurement.
    pub fn unimodal() -> Self {
        Self {
            prior: GmmPriorSpec {
                weights: vec![1.0],
                means: vec![vec![0.0, 0.0]],
                covariances: vec![vec![vec![1.0, 0.0], vec![0.0, 1.0]]],
            },
            ..Self::canonical_bimodal()
        }
    }

    pub fn measurement(&self) -> Result<Measurement> {
        Measurement::new(self.y.clone(), vec![self.sigma_y; self.y.len()], ForwardOp::Dense(self.op.clone()))
    }

    pub fn posterior(&self) -> Result<GmmPriorSpec> {
        gmm_posterior(&self.prior, &self.op, &self.y, &[self.sigma_y])
    }

    pub fn score(&self, spec: DiffusionSpec) -> Result<GmmScore> {
        GmmScore::new(self.prior.clone(), spec)
    }

    /// Exact prior draws.
    pub fn sample_prior<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Vec<f64>> {
        sample_gmm(&self.prior, n, rng)
    }
}

/// Exact draws from a Gaussian mixture.
pub fn sample_gmm<R: Rng + ?Sized>(spec: &GmmPriorSpec, n: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let chols: Vec<_> = spec
        .covariances
        .iter()
        .map(|c| crate::linalg::to_dmatrix(c).cholesky().expect("SPD component"))
        .collect();
    (0..n)
        .map(|_| {
            let u: f64 = rng.random();
            let mut k = 0;
            let mut acc = spec.weights[0];
            while u >= acc && k + 1 < spec.weights.len() {
                k += 1;
                acc += spec.weights[k];
            }
            let z = nalgebra::DVector::from_vec(normal_vec(rng, spec.dim()));
            let x = chols[k].l() * z;
            x.iter().zip(&spec.means[k]).map(|(a, m)| a + m).collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{energy_test, sample_moments};

    fn setup() -> (MixtureProblem, GmmScore, Measurement) {
        let p = MixtureProblem::canonical_bimodal();
        let score = p.score(DiffusionSpec::new(0.1, 20.0, 2).unwrap()).unwrap();
        let m = p.measurement().unwrap();
        (p, score, m)
    }

    #[test]
    fn canonical_posterior_is_bimodal_with_unequal_weights() {
        let (p, _, _) = setup();
        let post = p.posterior().unwrap();
        assert_eq!(post.weights.len(), 2);
        assert!(post.weights.iter().all(|w| *w > 0.2));
        assert!((post.weights[0] - post.weights[1]).abs() > 0.2);
    }

    #[test]
    fn reference_grids() {
        for m in Method::ALL {
            let g = SweepGrid::reference(m, 100);
            assert_eq!(g.values.len(), 100);
        }
        let d = SweepGrid::reference(Method::Dps, 100);
        assert!((d.values[0] - 0.001).abs() < 1e-15 && (d.values[99] - 0.15).abs() < 1e-12);
        let a = SweepGrid::reference(Method::ScoreAld, 100);
        assert_eq!((a.values[0], a.values[99]), (100.0, 0.8));
    }

    #[test]
    fn unconditional_sampler_matches_prior() {
        let (p, score, _) = setup();
        let truth = p.sample_prior(4000, &mut stream(1, 0));
        let xs = reverse_sde_sample(&score, 4000, &SamplerConfig::default(), 10).unwrap();
        let pv = energy_test(&xs, &truth, 2000, 200, &mut stream(2, 0)).unwrap();
        assert!(pv > 0.01, "p = {pv}");
    }

    #[test]
    fn zero_guidance_limits() {
        let (_, score, m) = setup();
        let cfg = SamplerConfig::default();
        let n = 4000;
        let sde = reverse_sde_sample(&score, n, &cfg, 10).unwrap();
        let ald = ald_sample(&score, &m, f64::INFINITY, n, &cfg, 12).unwrap();
        for (name, xs, reference) in [
            ("sde_proj", sde_proj_sample(&score, &m, 0.0, n, &cfg, 11).unwrap(), &sde),
            ("dps", dps_sample(&score, &m, 0.0, n, &cfg, 13).unwrap(), &sde),
            ("score_ald", ald_sample(&score, &m, 1e12, n, &cfg, 14).unwrap(), &ald),
        ] {
            let pv = energy_test(&xs, reference, 2000, 200, &mut stream(2, 0)).unwrap();
            assert!(pv > 0.01, "{name} p = {pv}");
        }
    }

    #[test]
    fn step_refinement_changes_moments_little() {
        let (_, score, m) = setup();
        let n = 10_000;
        let fine = sde_proj_sample(&score, &m, 0.0, n, &SamplerConfig::default(), 3).unwrap();
        let half = SamplerConfig {
            n_steps: 500,
            ..SamplerConfig::default()
        };
        let coarse = sde_proj_sample(&score, &m, 0.0, n, &half, 4).unwrap();
        let (m1, s1) = sample_moments(&fine);
        let (m2, s2) = sample_moments(&coarse);
        // Differences are measured relative to the coordinate's spread.
        for i in 0..2 {
            assert!((s1[i] - s2[i]).abs() < 0.05 * s1[i], "std {i}: {} vs {}", s1[i], s2[i]);
            assert!((m1[i] - m2[i]).abs() < 0.05 * s1[i], "mean {i}: {} vs {}", m1[i], m2[i]);
        }
    }

    #[test]
    fn guidance_moves_mass_toward_posterior() {
        let (p, score, m) = setup();
        let post = p.posterior().unwrap();
        let cfg = SamplerConfig {
            n_steps: 300,
            ..SamplerConfig::default()
        };
        let log_p = |x: &[f64]| gmm_log_density(&post, x).unwrap();
        for (method, w) in [(Method::SdeProj, 0.2), (Method::ScoreAld, 1.0), (Method::Dps, 0.02)] {
            let xs = sample(method, &score, &m, w, 1000, &cfg, 5).unwrap();
            let right = xs.iter().filter(|x| x[0] > 0.0).count() as f64 / xs.len() as f64;
            // Prior puts 0.35 on the right mode; the posterior puts more.
            assert!(right > 0.4, "{} right-mode fraction {right}", method.name());
            let (kl, _) = gmm_fit_kl(&xs, log_p, &mut stream(6, 0)).unwrap();
            assert!(kl.is_finite());
        }
    }

    #[test]
    fn samplers_are_deterministic() {
        let (_, score, m) = setup();
        let cfg = SamplerConfig {
            n_steps: 50,
            ..SamplerConfig::default()
        };
        for method in Method::ALL {
            let w = if method == Method::ScoreAld { 2.0 } else { 0.1 };
            let a = sample(method, &score, &m, w, 20, &cfg, 9).unwrap();
            let b = sample(method, &score, &m, w, 20, &cfg, 9).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn projection_rejects_nonlinear_operators() {
        let (_, score, _) = setup();
        let cov = crate::forward::UvCoverage::synthetic(&[(0.0, 0.0), (1e9, 0.0), (0.0, 1e9)], 1, 0.0, 0.1).unwrap();
        let op = crate::forward::ClosureOp::new(1, 2, 100.0 * crate::forward::MICROARCSEC, cov).unwrap();
        let m = Measurement::new(vec![0.0], vec![1.0], ForwardOp::VlbiClosure(op)).unwrap();
        assert!(matches!(
            sde_proj_sample(&score, &m, 0.1, 2, &SamplerConfig::default(), 0),
            Err(Error::Unsupported(_))
        ));
        assert!(matches!(
            ald_sample(&score, &m, 1.0, 2, &SamplerConfig::default(), 0),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn sweep_reports_points_and_oracle() {
        let (p, score, m) = setup();
        let post = p.posterior().unwrap();
        let grid = SweepGrid {
            method: Method::SdeProj,
            values: vec![0.001, 0.1, 0.5],
            samples_per_value: 300,
        };
        let cfg = SamplerConfig {
            n_steps: 100,
            ..SamplerConfig::default()
        };
        let r = run_sweep(&grid, &score, &m, &post, &cfg, 4, true).unwrap();
        assert_eq!(r.points.len(), 3);
        assert_eq!(r.samples.len(), 3);
        assert!(r.oracle() < 3);
        assert!(r.points.iter().all(|p| p.n_samples == 300 && p.kl.is_finite()));
    }

    #[test]
    fn degenerate_points_round_trip_through_json() {
        let p = SweepPoint {
            method: Method::SdeProj,
            weight: 0.5,
            kl: f64::INFINITY,
            kl_se: f64::NAN,
            n_samples: 100,
            seed: 1,
            degenerate: true,
        };
        let back: SweepPoint = serde_json::from_str(&serde_json::to_string(&p).unwrap()).unwrap();
        assert_eq!(back.kl, f64::INFINITY);
        assert!(back.kl_se.is_nan() && back.degenerate);
        let q = SweepPoint { kl: 0.25, kl_se: 0.01, degenerate: false, ..p };
        let back: SweepPoint = serde_json::from_str(&serde_json::to_string(&q).unwrap()).unwrap();
        assert_eq!(back, q);
    }
}
