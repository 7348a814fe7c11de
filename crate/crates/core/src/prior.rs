//! Log-prior evaluators built on a score field: the score-matching lower
//! bound `b(x)`, the probability-flow ODE log-density, and a total-variation
//! regularizer for comparison.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::HORIZON;
use crate::error::{check_dim, Error, Result};
use crate::linalg::{dot, norm_sq, std_normal_logpdf};
use crate::ode::{integrate, OdeOptions};
use crate::rng::{normal_vec, rademacher_vec, stream};
use crate::score::ScoreField;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurrogateConfig {
    pub n_time: usize,
    pub n_noise: usize,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            n_time: 1,
            n_noise: 1,
        }
    }
}

impl SurrogateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_time == 0 || self.n_noise == 0 {
            return Err(Error::InvalidParameter("surrogate sample counts must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivergenceMode {
    /// Rademacher-probe trace estimate.
    Hutchinson,
    /// Full Jacobian trace from `D` pullbacks; limited to small `D`.
    Exact,
}

/// Largest dimensionality for which the exact divergence is permitted.
pub const EXACT_DIVERGENCE_MAX_DIM: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OdeConfig {
    pub n_trace: usize,
    #[serde(default = "default_rtol")]
    pub rtol: f64,
    #[serde(default = "default_rtol")]
    pub atol: f64,
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
    #[serde(default = "default_divergence")]
    pub divergence: DivergenceMode,
}

fn default_rtol() -> f64 {
    1e-5
}

fn default_max_steps() -> usize {
    20_000
}

fn default_divergence() -> DivergenceMode {
    DivergenceMode::Hutchinson
}

impl Default for OdeConfig {
    fn default() -> Self {
        Self {
            n_trace: 16,
            rtol: default_rtol(),
            atol: default_rtol(),
            max_steps: default_max_steps(),
            divergence: DivergenceMode::Hutchinson,
        }
    }
}

impl OdeConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.n_trace == 0 {
            return Err(Error::InvalidParameter("n_trace must be positive".into()));
        }
        if self.divergence == DivergenceMode::Exact && dim > EXACT_DIVERGENCE_MAX_DIM {
            return Err(Error::Unsupported(format!(
                "exact divergence is limited to D <= {EXACT_DIVERGENCE_MAX_DIM}, got {dim}"
            )));
        }
        self.options().validate()
    }

    pub fn options(&self) -> OdeOptions {
        OdeOptions {
            rtol: self.rtol,
            atol: self.atol,
            max_steps: self.max_steps,
        }
    }
}

/// One time draw of the surrogate with its importance weight `Z ρ(t)²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightRecord {
    pub t: f64,
    pub weight: f64,
}

#[derive(Debug, Clone)]
pub struct ElboEstimate {
    pub value: f64,
    pub records: Vec<WeightRecord>,
    pub grad: Option<Vec<f64>>,
}

/// Monte-Carlo estimate of the lower bound `b(x)` on `log p(x)`.
pub fn elbo_estimate<R: Rng + ?Sized>(
    score: &dyn ScoreField,
    x: &[f64],
    rng: &mut R,
    cfg: &SurrogateConfig,
) -> Result<ElboEstimate> {
    elbo_impl(score, x, rng, cfg, false)
}

/// As [`elbo_estimate`], also returning `∇ₓ b̂(x)` for the same draws.
pub fn elbo_estimate_grad<R: Rng + ?Sized>(
    score: &dyn ScoreField,
    x: &[f64],
    rng: &mut R,
    cfg: &SurrogateConfig,
) -> Result<(f64, Vec<f64>)> {
    let e = elbo_impl(score, x, rng, cfg, true)?;
    Ok((e.value, e.grad.expect("gradient requested")))
}

fn elbo_impl<R: Rng + ?Sized>(
    score: &dyn ScoreField,
    x: &[f64],
    rng: &mut R,
    cfg: &SurrogateConfig,
    want_grad: bool,
) -> Result<ElboEstimate> {
    cfg.validate()?;
    let spec = *score.diffusion();
    let d = spec.dim;
    check_dim(d, x.len())?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("surrogate input".into()));
    }
    let proposal = spec.time_proposal()?;
    let nz = cfg.n_noise as f64;
    let nt = cfg.n_time as f64;
    let mut grad = vec![0.0; if want_grad { d } else { 0 }];

    // Terminal term: log π(α_T x + ρ_T z').
    let (a_t, r_t) = spec.kernel_unchecked(HORIZON);
    let mut terminal = 0.0;
    for _ in 0..cfg.n_noise {
        let z = normal_vec(rng, d);
        let xt: Vec<f64> = x.iter().zip(&z).map(|(xi, zi)| a_t * xi + r_t * zi).collect();
        terminal += std_normal_logpdf(&xt);
        if want_grad {
            crate::linalg::axpy(-a_t / nz, &xt, &mut grad);
        }
    }
    terminal /= nz;

    let mut records = Vec::with_capacity(cfg.n_time);
    let mut integral = 0.0;
    for _ in 0..cfg.n_time {
        let (t, w) = proposal.sample_time(rng);
        records.push(WeightRecord { t, weight: w });
        let (a, r) = spec.kernel_unchecked(t);
        for _ in 0..cfg.n_noise {
            let z = normal_vec(rng, d);
            let xt: Vec<f64> = x.iter().zip(&z).map(|(xi, zi)| a * xi + r * zi).collect();
            let target: Vec<f64> = z.iter().map(|zi| zi / r).collect();
            let mut resid = Vec::new();
            let s = if want_grad {
                let mut cot = |s: &[f64]| {
                    resid = s.iter().zip(&target).map(|(si, ti)| si + ti).collect();
                    resid.clone()
                };
                let (s, pb) = score.score_and_pullback(&xt, t, &mut cot)?;
                // ∂/∂x ‖s(αx + ρz) + z/ρ‖² = 2α Jᵀ(s + z/ρ).
                crate::linalg::axpy(-w * a / (nt * nz), &pb, &mut grad);
                s
            } else {
                let s = score.score(&xt, t)?;
                resid = s.iter().zip(&target).map(|(si, ti)| si + ti).collect();
                s
            };
            debug_assert_eq!(s.len(), d);
            // -(2/g²)·∇·f = D for the VP drift.
            integral += w * (norm_sq(&resid) - norm_sq(&target) + d as f64);
        }
    }
    let value = terminal - integral / (2.0 * nt * nz);
    if !value.is_finite() {
        return Err(Error::NonFinite("surrogate estimate".into()));
    }
    Ok(ElboEstimate {
        value,
        records,
        grad: want_grad.then_some(grad),
    })
}

/// Result of a probability-flow log-density evaluation.
#[derive(Debug, Clone)]
pub struct OdeLogProb {
    pub value: f64,
    pub n_steps: usize,
    pub n_evals: usize,
    pub grad: Option<Vec<f64>>,
}

fn probes<R: Rng + ?Sized>(rng: &mut R, d: usize, cfg: &OdeConfig) -> Vec<Vec<f64>> {
    match cfg.divergence {
        DivergenceMode::Hutchinson => (0..cfg.n_trace).map(|_| rademacher_vec(rng, d)).collect(),
        DivergenceMode::Exact => (0..d)
            .map(|i| {
                let mut e = vec![0.0; d];
                e[i] = 1.0;
                e
            })
            .collect(),
    }
}

/// Weight applied to each probe quadratic form when forming the trace.
fn probe_weight(cfg: &OdeConfig, n: usize) -> f64 {
    match cfg.divergence {
        DivergenceMode::Hutchinson => 1.0 / n as f64,
        DivergenceMode::Exact => 1.0,
    }
}

/// `log p(x)` under the probability-flow ODE, integrating the state and its
/// accumulated divergence from `t_eps` to `T`.
pub fn ode_logprob<R: Rng + ?Sized>(
    score: &dyn ScoreField,
    x: &[f64],
    rng: &mut R,
    cfg: &OdeConfig,
) -> Result<OdeLogProb> {
    ode_impl(score, x, rng, cfg, false)
}

/// As [`ode_logprob`], also returning the gradient with respect to `x` of the
/// same (fixed-probe) estimator via the continuous adjoint.
pub fn ode_logprob_grad<R: Rng + ?Sized>(
    score: &dyn ScoreField,
    x: &[f64],
    rng: &mut R,
    cfg: &OdeConfig,
) -> Result<OdeLogProb> {
    ode_impl(score, x, rng, cfg, true)
}

fn ode_impl<R: Rng + ?Sized>(
    score: &dyn ScoreField,
    x: &[f64],
    rng: &mut R,
    cfg: &OdeConfig,
    want_grad: bool,
) -> Result<OdeLogProb> {
    let spec = *score.diffusion();
    let d = spec.dim;
    check_dim(d, x.len())?;
    cfg.validate(d)?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("ODE input".into()));
    }
    let eps = probes(rng, d, cfg);
    let pw = probe_weight(cfg, eps.len());
    let opts = cfg.options();

    // Augmented state (x, ℓ) with dx/dt = -½β(x + s) and
    // dℓ/dt = ∇·f̃ = -½β(D + tr ∂s/∂x).
    let rhs = |t: f64, y: &[f64]| -> Result<Vec<f64>> {
        let b = spec.beta_unchecked(t);
        let (s, v) = score.score_vjps(&y[..d], t, &eps)?;
        let tr: f64 = eps.iter().zip(&v).map(|(e, ve)| dot(e, ve)).sum::<f64>() * pw;
        let mut out = Vec::with_capacity(d + 1);
        out.extend(y[..d].iter().zip(&s).map(|(xi, si)| -0.5 * b * (xi + si)));
        out.push(-0.5 * b * (d as f64 + tr));
        Ok(out)
    };
    let mut y0 = x.to_vec();
    y0.push(0.0);
    let traj = integrate(rhs, spec.t_eps, HORIZON, &y0, &opts)?;
    let end = traj.end();
    let value = std_normal_logpdf(&end[..d]) + end[d];
    let mut out = OdeLogProb {
        value,
        n_steps: traj.n_steps(),
        n_evals: traj.n_evals,
        grad: None,
    };
    if !want_grad {
        return Ok(out);
    }

    // Adjoint a(t) = ∂L/∂x(t) with a(T) = -x(T), solved backwards on each
    // accepted forward interval from its stored right endpoint:
    // da/dt = ½β(a + Jᵀa) + ½β·w·Σ_k ∇ₓ(ε_kᵀ J ε_k).
    let mut a: Vec<f64> = end[..d].iter().map(|v| -v).collect();
    let adj_rhs = |t: f64, y: &[f64]| -> Result<Vec<f64>> {
        let b = spec.beta_unchecked(t);
        let (xs, ad) = y.split_at(d);
        let mut cots = Vec::with_capacity(1);
        cots.push(ad.to_vec());
        let (s, v) = score.score_vjps(xs, t, &cots)?;
        let mut out = Vec::with_capacity(2 * d);
        out.extend(xs.iter().zip(&s).map(|(xi, si)| -0.5 * b * (xi + si)));
        let mut da: Vec<f64> = ad.iter().zip(&v[0]).map(|(ai, vi)| 0.5 * b * (ai + vi)).collect();
        for e in &eps {
            let q = score.quad_form_grad(xs, t, e)?;
            crate::linalg::axpy(0.5 * b * pw, &q, &mut da);
        }
        out.extend(da);
        Ok(out)
    };
    let mut n_evals = 0;
    for k in (0..traj.n_steps()).rev() {
        let mut y = traj.ys[k + 1][..d].to_vec();
        y.extend_from_slice(&a);
        let back = integrate(adj_rhs, traj.ts[k + 1], traj.ts[k], &y, &opts)?;
        n_evals += back.n_evals;
        a = back.end()[d..].to_vec();
    }
    out.n_evals += n_evals;
    out.grad = Some(a);
    Ok(out)
}

/// Isotropic total variation `weight · Σ √(Δ_h² + Δ_v²)` with forward
/// differences and a replicated boundary, and its gradient.
pub fn tv_penalty(x: &[f64], shape: Option<(usize, usize)>, weight: f64) -> Result<(f64, Vec<f64>)> {
    let (h, w) = shape.ok_or_else(|| Error::InvalidParameter("TV needs the image shape".into()))?;
    check_dim(h * w, x.len())?;
    let mut total = 0.0;
    let mut grad = vec![0.0; x.len()];
    for i in 0..h {
        for j in 0..w {
            let p = i * w + j;
            let dh = if j + 1 < w { x[p + 1] - x[p] } else { 0.0 };
            let dv = if i + 1 < h { x[p + w] - x[p] } else { 0.0 };
            let m = (dh * dh + dv * dv).sqrt();
            total += m;
            if m > 0.0 {
                if j + 1 < w {
                    grad[p + 1] += weight * dh / m;
                    grad[p] -= weight * dh / m;
                }
                if i + 1 < h {
                    grad[p + w] += weight * dv / m;
                    grad[p] -= weight * dv / m;
                }
            }
        }
    }
    Ok((weight * total, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundGapRow {
    pub sample_id: usize,
    pub repeat: usize,
    pub b_value: f64,
    pub ode_value: f64,
}

/// Repeated surrogate and ODE evaluations at each sample. Each
/// (sample, repeat) pair draws from its own RNG stream, so the table does not
/// depend on scheduling.
pub fn bound_gap_probe(
    score: &dyn ScoreField,
    samples: &[Vec<f64>],
    n_repeats: usize,
    surrogate: &SurrogateConfig,
    ode: &OdeConfig,
    seed: u64,
) -> Result<Vec<BoundGapRow>> {
    if samples.is_empty() {
        return Err(Error::InvalidParameter("bound-gap probe needs samples".into()));
    }
    let jobs: Vec<(usize, usize)> = (0..samples.len())
        .flat_map(|i| (0..n_repeats).map(move |r| (i, r)))
        .collect();
    jobs.par_iter()
        .map(|&(i, r)| {
            let job = (i * n_repeats + r) as u64;
            let mut rb = stream(seed, 2 * job);
            let mut ro = stream(seed, 2 * job + 1);
            let b = elbo_estimate(score, &samples[i], &mut rb, surrogate)?.value;
            let o = ode_logprob(score, &samples[i], &mut ro, ode)?.value;
            Ok(BoundGapRow {
                sample_id: i,
                repeat: r,
                b_value: b,
                ode_value: o,
            })
        })
        .collect()
}

/// Per-sample check of `mean b ≤ mean ode + k·SE`, with the standard error
/// pooled from both estimators. Returns the fraction of samples that pass.
pub fn bound_validity(rows: &[BoundGapRow], k: f64) -> f64 {
    let n = rows.iter().map(|r| r.sample_id + 1).max().unwrap_or(0);
    let mut b = vec![Vec::new(); n];
    let mut o = vec![Vec::new(); n];
    for r in rows {
        b[r.sample_id].push(r.b_value);
        o[r.sample_id].push(r.ode_value);
    }
    let mut pass = 0;
    let mut total = 0;
    for i in 0..n {
        if b[i].is_empty() {
            continue;
        }
        total += 1;
        let (mb, sb) = crate::linalg::mean_and_se(&b[i]);
        let (mo, so) = crate::linalg::mean_and_se(&o[i]);
        let se = (sb * sb + so * so).sqrt();
        if mb <= mo + k * se {
            pass += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        pass as f64 / total as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::DiffusionSpec;
    use crate::score::{GaussianPriorSpec, GaussianScore, GmmPriorSpec, GmmScore};

    fn spec(d: usize) -> DiffusionSpec {
        DiffusionSpec::new(0.1, 20.0, d).unwrap()
    }

    fn correlated() -> GaussianScore {
        GaussianScore::new(
            GaussianPriorSpec {
                mean: vec![0.5, -0.3, 0.2],
                covariance: vec![vec![0.6, 0.2, 0.0], vec![0.2, 0.4, 0.1], vec![0.0, 0.1, 0.3]],
            },
            spec(3),
        )
        .unwrap()
    }

    #[test]
    fn elbo_tight_for_standard_normal() {
        let g = GaussianScore::new(GaussianPriorSpec::standard(2), spec(2)).unwrap();
        let x = [0.0, 0.0];
        let vals: Vec<f64> = (0..10_000)
            .map(|s| elbo_estimate(&g, &x, &mut stream(s, 9), &SurrogateConfig::default()).unwrap().value)
            .collect();
        let (m, se) = crate::linalg::mean_and_se(&vals);
        let want = -(2.0f64 * std::f64::consts::PI).ln();
        assert!((m - want).abs() < 3.0 * se, "{m} vs {want} (se {se})");
    }

    #[test]
    fn elbo_seed_determinism() {
        let g = correlated();
        let c = SurrogateConfig { n_time: 4, n_noise: 2 };
        let a = elbo_estimate(&g, &[0.1, 0.2, 0.3], &mut stream(3, 0), &c).unwrap();
        let b = elbo_estimate(&g, &[0.1, 0.2, 0.3], &mut stream(3, 0), &c).unwrap();
        assert_eq!(a.value.to_bits(), b.value.to_bits());
        assert_eq!(a.records.len(), 4);
        let (v, _) = elbo_estimate_grad(&g, &[0.1, 0.2, 0.3], &mut stream(3, 0), &c).unwrap();
        assert_eq!(v.to_bits(), a.value.to_bits());
    }

    #[test]
    fn elbo_gradient_matches_finite_differences_per_seed() {
        let g = correlated();
        let c = SurrogateConfig { n_time: 3, n_noise: 2 };
        let x = [0.3, -0.2, 0.6];
        for seed in 0..5 {
            let (_, gr) = elbo_estimate_grad(&g, &x, &mut stream(seed, 1), &c).unwrap();
            for i in 0..3 {
                let f = |d: f64| {
                    let mut xp = x;
                    xp[i] += d;
                    elbo_estimate(&g, &xp, &mut stream(seed, 1), &c).unwrap().value
                };
                let fd = (f(1e-5) - f(-1e-5)) / 2e-5;
                assert!((fd - gr[i]).abs() < 1e-5 * (1.0 + fd.abs()), "seed {seed} i {i}: {fd} vs {}", gr[i]);
            }
        }
    }

    #[test]
    fn ode_matches_closed_form_gaussian() {
        let g = correlated();
        for x in [[0.0, 0.0, 0.0], [1.0, -0.5, 0.4]] {
            let want = g.log_density(&x, 0.0).unwrap();
            let ex = OdeConfig {
                divergence: DivergenceMode::Exact,
                ..OdeConfig::default()
            };
            let got = ode_logprob(&g, &x, &mut stream(1, 0), &ex).unwrap();
            assert!((got.value - want).abs() < 1e-2 * 3.0, "{} vs {want}", got.value);
        }
    }

    #[test]
    fn ode_hutchinson_exact_for_diagonal_jacobian() {
        let g = GaussianScore::new(
            GaussianPriorSpec {
                mean: vec![0.5, -0.3, 0.2, 0.0],
                covariance: (0..4)
                    .map(|i| (0..4).map(|j| if i == j { 0.2 + 0.3 * i as f64 } else { 0.0 }).collect())
                    .collect(),
            },
            spec(4),
        )
        .unwrap();
        let x = [1.0, -0.5, 0.4, 2.0];
        let want = g.log_density(&x, 0.0).unwrap();
        let got = ode_logprob(&g, &x, &mut stream(1, 0), &OdeConfig::default()).unwrap();
        assert!((got.value - want).abs() < 1e-2 * 4.0, "{} vs {want}", got.value);
    }

    #[test]
    fn ode_matches_gmm_density() {
        let iso = |v: f64| vec![vec![v, 0.0], vec![0.0, v]];
        let m = GmmScore::new(
            GmmPriorSpec {
                weights: vec![0.4, 0.6],
                means: vec![vec![-1.0, 0.5], vec![1.2, -0.3]],
                covariances: vec![iso(0.1), iso(0.2)],
            },
            spec(2),
        )
        .unwrap();
        let x = [0.9, -0.2];
        let want = m.log_density(&x, 0.0).unwrap();
        let ex = OdeConfig {
            divergence: DivergenceMode::Exact,
            ..OdeConfig::default()
        };
        let got = ode_logprob(&m, &x, &mut stream(0, 0), &ex).unwrap().value;
        assert!((got - want).abs() < 1e-2, "{got} vs {want}");
        // The probe estimate is unbiased around the same value.
        let vals: Vec<f64> = (0..100)
            .map(|s| ode_logprob(&m, &x, &mut stream(s, 4), &OdeConfig::default()).unwrap().value)
            .collect();
        let (mean, se) = crate::linalg::mean_and_se(&vals);
        assert!((mean - want).abs() < 3.5 * se + 1e-3, "{mean} vs {want} (se {se})");
    }

    #[test]
    fn ode_gradient_matches_finite_differences() {
        let iso = |v: f64| vec![vec![v, 0.0], vec![0.0, v]];
        let m = GmmScore::new(
            GmmPriorSpec {
                weights: vec![0.5, 0.5],
                means: vec![vec![-1.0, 0.0], vec![1.0, 0.3]],
                covariances: vec![iso(0.3), iso(0.2)],
            },
            spec(2),
        )
        .unwrap();
        let cfg = OdeConfig {
            n_trace: 2,
            rtol: 1e-8,
            atol: 1e-8,
            ..OdeConfig::default()
        };
        let x = [0.4, -0.1];
        let r = ode_logprob_grad(&m, &x, &mut stream(2, 0), &cfg).unwrap();
        let g = r.grad.unwrap();
        for i in 0..2 {
            let f = |d: f64| {
                let mut xp = x;
                xp[i] += d;
                ode_logprob(&m, &xp, &mut stream(2, 0), &cfg).unwrap().value
            };
            let fd = (f(1e-4) - f(-1e-4)) / 2e-4;
            assert!((fd - g[i]).abs() < 1e-3 * (1.0 + fd.abs()), "{i}: {fd} vs {}", g[i]);
        }
        // The true gradient is the score of the prior itself.
        let s = m.score(&x, m.diffusion().t_eps).unwrap();
        for i in 0..2 {
            assert!((s[i] - g[i]).abs() < 0.1 * (1.0 + s[i].abs()));
        }
    }

    #[test]
    fn exact_divergence_limited_to_small_dim() {
        let g = GaussianScore::new(GaussianPriorSpec::standard(17), spec(17)).unwrap();
        let cfg = OdeConfig {
            divergence: DivergenceMode::Exact,
            ..OdeConfig::default()
        };
        assert!(matches!(
            ode_logprob(&g, &[0.0; 17], &mut stream(0, 0), &cfg),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn tv_examples() {
        let (v, g) = tv_penalty(&[2.0; 9], Some((3, 3)), 1e5).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.iter().all(|x| *x == 0.0));
        let mut x = [0.0; 9];
        x[4] = 1.0;
        // Brute force over all pixels' forward differences.
        let mut want = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let p = i * 3 + j;
                let dh = if j < 2 { x[p + 1] - x[p] } else { 0.0 };
                let dv = if i < 2 { x[p + 3] - x[p] } else { 0.0 };
                want += f64::hypot(dh, dv);
            }
        }
        let (v, _) = tv_penalty(&x, Some((3, 3)), 1.0).unwrap();
        assert!((v - want).abs() < 1e-15);
        assert!((v - (2.0 + 2f64.sqrt())).abs() < 1e-12);
        assert!(tv_penalty(&x, None, 1.0).is_err());
    }

    #[test]
    fn tv_gradient_matches_finite_differences() {
        let x: Vec<f64> = (0..12).map(|i| ((i * 37) % 11) as f64 * 0.1).collect();
        let (_, g) = tv_penalty(&x, Some((3, 4)), 2.0).unwrap();
        for i in 0..12 {
            let f = |d: f64| {
                let mut y = x.clone();
                y[i] += d;
                tv_penalty(&y, Some((3, 4)), 2.0).unwrap().0
            };
            let fd = (f(1e-6) - f(-1e-6)) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-5, "{i}");
        }
    }

    #[test]
    fn probe_table_shape_and_exact_score_gap() {
        let g = GaussianScore::new(GaussianPriorSpec::isotropic(vec![0.3, -0.2], 0.5), spec(2)).unwrap();
        let samples: Vec<Vec<f64>> = (0..6).map(|i| vec![0.1 * i as f64, -0.05 * i as f64]).collect();
        let sc = SurrogateConfig { n_time: 256, n_noise: 1 };
        let rows = bound_gap_probe(&g, &samples, 5, &sc, &OdeConfig::default(), 11).unwrap();
        assert_eq!(rows.len(), 30);
        assert!(rows.iter().enumerate().all(|(k, r)| r.sample_id == k / 5 && r.repeat == k % 5));
        let gaps: Vec<f64> = rows.iter().map(|r| r.ode_value - r.b_value).collect();
        let (m, se) = crate::linalg::mean_and_se(&gaps);
        assert!(m.abs() < 4.0 * se + 1e-2, "gap {m} se {se}");
        assert!(bound_validity(&rows, 3.0) >= 0.95);
    }
}
