//! Variance-preserving diffusion process.
//!
//! The forward SDE is `dx = -½β(t)x dt + √β(t) dw` with a linear noise
//! schedule `β(t) = β_min + t(β_max - β_min)` on the unit horizon. Its
//! transition kernel is `N(α(t)x, ρ(t)²I)` with `α(t)² + ρ(t)² = 1`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Horizon of the diffusion. Every schedule in the crate runs on `[0, 1]`.
pub const HORIZON: f64 = 1.0;
pub const DEFAULT_T_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionSpec {
    pub beta_min: f64,
    pub beta_max: f64,
    #[serde(default = "default_t_eps")]
    pub t_eps: f64,
    pub dim: usize,
}

fn default_t_eps() -> f64 {
    DEFAULT_T_EPS
}

impl DiffusionSpec {
    pub fn new(beta_min: f64, beta_max: f64, dim: usize) -> Result<Self> {
        Self::with_t_eps(beta_min, beta_max, DEFAULT_T_EPS, dim)
    }

    pub fn with_t_eps(beta_min: f64, beta_max: f64, t_eps: f64, dim: usize) -> Result<Self> {
        let spec = Self {
            beta_min,
            beta_max,
            t_eps,
            dim,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta_min > 0.0 && self.beta_min < self.beta_max && self.beta_max.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "need 0 < beta_min < beta_max, got beta_min={}, beta_max={}",
                self.beta_min, self.beta_max
            )));
        }
        if !(self.t_eps > 0.0 && self.t_eps < HORIZON) {
            return Err(Error::InvalidParameter(format!(
                "need 0 < t_eps < {HORIZON}, got {}",
                self.t_eps
            )));
        }
        if self.dim == 0 {
            return Err(Error::InvalidParameter("dim must be positive".into()));
        }
        Ok(())
    }

    pub fn horizon(&self) -> f64 {
        HORIZON
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if (0.0..=HORIZON).contains(&t) {
            Ok(())
        } else {
            Err(Error::TimeOutOfRange {
                t,
                lo: 0.0,
                hi: HORIZON,
            })
        }
    }

    /// Noise rate `β(t)`.
    pub fn beta(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        Ok(self.beta_unchecked(t))
    }

    #[inline]
    pub(crate) fn beta_unchecked(&self, t: f64) -> f64 {
        self.beta_min + t * (self.beta_max - self.beta_min)
    }

    /// Squared diffusion coefficient; equals `β(t)` for the VP process.
    #[inline]
    pub fn g2(&self, t: f64) -> f64 {
        self.beta_unchecked(t)
    }

    /// Integrated rate `∫₀ᵗ β(s) ds`.
    #[inline]
    pub fn integrated_beta(&self, t: f64) -> f64 {
        self.beta_min * t + 0.5 * t * t * (self.beta_max - self.beta_min)
    }

    /// Drift `f(x, t) = -½β(t)x`.
    pub fn drift(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        check_dim(self.dim, x.len())?;
        let b = self.beta(t)?;
        Ok(x.iter().map(|v| -0.5 * b * v).collect())
    }

    /// Divergence of the drift, `-(D/2)β(t)`; independent of `x`.
    pub fn drift_divergence(&self, t: f64) -> f64 {
        -0.5 * self.dim as f64 * self.beta_unchecked(t)
    }

    /// Kernel mean scale `α(t)` and standard deviation `ρ(t)`.
    pub fn kernel_params(&self, t: f64) -> Result<(f64, f64)> {
        self.check_time(t)?;
        Ok(self.kernel_unchecked(t))
    }

    #[inline]
    pub(crate) fn kernel_unchecked(&self, t: f64) -> (f64, f64) {
        let b = self.integrated_beta(t);
        let alpha = (-0.5 * b).exp();
        let rho = (-(-b).exp_m1()).sqrt();
        (alpha, rho)
    }

    /// Draw from the transition kernel: `α(t)x + ρ(t)z`.
    pub fn perturb(&self, x: &[f64], t: f64, z: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim, x.len())?;
        check_dim(self.dim, z.len())?;
        let (a, r) = self.kernel_params(t)?;
        Ok(x.iter().zip(z).map(|(xi, zi)| a * xi + r * zi).collect())
    }

    pub fn time_proposal(&self) -> Result<TimeProposal> {
        TimeProposal::new(self)
    }

    /// Uniform reverse-time grid from `T` down to `t_eps` with `n` intervals.
    pub fn reverse_grid(&self, n: usize) -> Vec<f64> {
        let dt = (HORIZON - self.t_eps) / n as f64;
        let mut g: Vec<f64> = (0..=n).map(|i| HORIZON - i as f64 * dt).collect();
        g[n] = self.t_eps;
        g
    }
}

/// Importance distribution over diffusion time, `p(t) ∝ g(t)²/ρ(t)²` on
/// `[t_eps, T]`.
///
/// For the linear VP schedule `g²/ρ² = d/dt ln(e^{B(t)} - 1)` with
/// `B(t) = ∫₀ᵗ β`, so both the CDF and its inverse are available in closed
/// form; sampling inverts the CDF exactly.
#[derive(Debug, Clone)]
pub struct TimeProposal {
    spec: DiffusionSpec,
    log_lo: f64,
    z: f64,
}

/// `ln(e^b - 1)`, stable for small and large `b`.
fn log_expm1(b: f64) -> f64 {
    if b > 30.0 {
        b + (-(-b).exp()).ln_1p()
    } else {
        b.exp_m1().ln()
    }
}

impl TimeProposal {
    pub fn new(spec: &DiffusionSpec) -> Result<Self> {
        spec.validate()?;
        let log_lo = log_expm1(spec.integrated_beta(spec.t_eps));
        let log_hi = log_expm1(spec.integrated_beta(HORIZON));
        let z = log_hi - log_lo;
        if !(z.is_finite() && z > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "degenerate time proposal (normalizer {z})"
            )));
        }
        Ok(Self {
            spec: *spec,
            log_lo,
            z,
        })
    }

    /// Normalizer `Z = ∫ g²/ρ² dt` over `[t_eps, T]`.
    pub fn normalizer(&self) -> f64 {
        self.z
    }

    pub fn density(&self, t: f64) -> f64 {
        if t < self.spec.t_eps || t > HORIZON {
            return 0.0;
        }
        let (_, rho) = self.spec.kernel_unchecked(t);
        self.spec.g2(t) / (rho * rho * self.z)
    }

    pub fn cdf(&self, t: f64) -> f64 {
        if t <= self.spec.t_eps {
            return 0.0;
        }
        if t >= HORIZON {
            return 1.0;
        }
        (log_expm1(self.spec.integrated_beta(t)) - self.log_lo) / self.z
    }

    pub fn inverse_cdf(&self, u: f64) -> f64 {
        let u = u.clamp(0.0, 1.0);
        // Solve ln(e^B - 1) = log_lo + u Z for B, then B(t) = B for t.
        let target = self.log_lo + u * self.z;
        let b = if target > 30.0 {
            target + (-target).exp().ln_1p()
        } else {
            target.exp().ln_1p()
        };
        let db = self.spec.beta_max - self.spec.beta_min;
        let bm = self.spec.beta_min;
        let t = 2.0 * b / (bm + (bm * bm + 2.0 * db * b).sqrt());
        t.clamp(self.spec.t_eps, HORIZON)
    }

    /// Draw `t ~ p(t)` and the importance factor `Z ρ(t)²` that multiplies
    /// the `g(t)²`-weighted integrand.
    pub fn sample_time<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, f64) {
        let u: f64 = rng.random();
        let t = self.inverse_cdf(u);
        let (_, rho) = self.spec.kernel_unchecked(t);
        (t, self.z * rho * rho)
    }

    /// Tabulated `(t, cdf)` pairs on a log-spaced grid, for inspection.
    pub fn grid(&self, n: usize) -> Vec<(f64, f64)> {
        let n = n.max(2);
        let lo = self.spec.t_eps.ln();
        let hi = HORIZON.ln();
        (0..n)
            .map(|i| {
                let t = (lo + (hi - lo) * i as f64 / (n - 1) as f64)
                    .exp()
                    .clamp(self.spec.t_eps, HORIZON);
                (t, self.cdf(t))
            })
            .collect()
    }

    pub fn spec(&self) -> &DiffusionSpec {
        &self.spec
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn spec(bmax: f64, dim: usize) -> DiffusionSpec {
        DiffusionSpec::new(0.1, bmax, dim).unwrap()
    }

    #[test]
    fn beta_endpoints_and_midpoint() {
        let s = spec(20.0, 1);
        assert_eq!(s.beta(0.0).unwrap(), 0.1);
        assert!((s.beta(1.0).unwrap() - 20.0).abs() < 1e-12);
        assert!((spec(10.0, 1).beta(0.5).unwrap() - 5.05).abs() < 1e-12);
        assert!(matches!(s.beta(1.5), Err(Error::TimeOutOfRange { .. })));
        assert!(matches!(s.beta(-0.1), Err(Error::TimeOutOfRange { .. })));
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(DiffusionSpec::new(0.0, 20.0, 2).is_err());
        assert!(DiffusionSpec::new(20.0, 0.1, 2).is_err());
        assert!(DiffusionSpec::with_t_eps(0.1, 20.0, 1.0, 2).is_err());
        assert!(DiffusionSpec::new(0.1, 20.0, 0).is_err());
    }

    #[test]
    fn drift_examples() {
        let s = spec(20.0, 2);
        assert_eq!(s.drift(&[1.0, 0.0], 0.0).unwrap(), vec![-0.05, -0.0]);
        assert_eq!(s.drift(&[0.0, 0.0], 0.7).unwrap(), vec![0.0, 0.0]);
        let d = s.drift(&[2.0, -2.0], 1.0).unwrap();
        assert!((d[0] + 20.0).abs() < 1e-12 && (d[1] - 20.0).abs() < 1e-12);
        assert!(s.drift(&[1.0], 0.0).is_err());
    }

    #[test]
    fn kernel_examples() {
        let s = spec(20.0, 1);
        assert_eq!(s.kernel_params(0.0).unwrap(), (1.0, 0.0));
        let (a, r) = s.kernel_params(1.0).unwrap();
        // Quadrature of ∫β over [0,1] by the trapezoid rule (exact for a
        // linear integrand): (0.1 + 20)/2.
        let a_ref = (-0.5 * (0.1 + 20.0) / 2.0f64).exp();
        assert!((a - a_ref).abs() < 1e-15);
        assert!((a - 6.56e-3).abs() < 2e-5);
        assert!((r - 0.99998).abs() < 1e-5);
    }

    #[test]
    fn variance_preserved_on_dense_grid() {
        for s in [spec(20.0, 1), spec(10.0, 1)] {
            for i in 0..=10_000 {
                let t = s.t_eps + (1.0 - s.t_eps) * i as f64 / 10_000.0;
                let (a, r) = s.kernel_params(t).unwrap();
                assert!((a * a + r * r - 1.0).abs() < 1e-12, "t={t}");
            }
        }
    }

    #[test]
    fn perturb_examples() {
        let s = spec(20.0, 2);
        let x = [1.0, 1.0];
        assert_eq!(s.perturb(&x, 0.0, &[0.3, -0.2]).unwrap(), x.to_vec());
        let (a, _) = s.kernel_params(0.4).unwrap();
        let p = s.perturb(&x, 0.4, &[0.0, 0.0]).unwrap();
        assert!((p[0] - a).abs() < 1e-15);
        let p = s.perturb(&x, 1.0, &[1.0, -1.0]).unwrap();
        assert!((p[0] - 1.00654).abs() < 2e-5, "{p:?}");
        assert!((p[1] + 0.99342).abs() < 2e-5, "{p:?}");
    }

    #[test]
    fn perturb_matches_kernel_moments() {
        let s = spec(20.0, 1);
        let t = 0.3;
        let (a, r) = s.kernel_params(t).unwrap();
        let mut g = rng::stream(5, 0);
        let n = 100_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| s.perturb(&[0.8], t, &rng::normal_vec(&mut g, 1)).unwrap()[0])
            .collect();
        let (m, se) = crate::linalg::mean_and_se(&draws);
        assert!((m - a * 0.8).abs() < 3.0 * se);
        let var = draws.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        assert!((var / (r * r) - 1.0).abs() < 0.02);
    }

    #[test]
    fn drift_divergence_matches_finite_differences() {
        let s = spec(20.0, 3);
        assert!((spec(20.0, 2).drift_divergence(0.0) + 0.1).abs() < 1e-15);
        let x = [0.3, -1.2, 2.5];
        for &t in &[0.0, 0.37, 1.0] {
            let h = 1e-5;
            let mut tr = 0.0;
            for i in 0..3 {
                let mut xp = x;
                let mut xm = x;
                xp[i] += h;
                xm[i] -= h;
                tr += (s.drift(&xp, t).unwrap()[i] - s.drift(&xm, t).unwrap()[i]) / (2.0 * h);
            }
            assert!((tr - s.drift_divergence(t)).abs() < 1e-6);
        }
        let s1 = spec(20.0, 1);
        assert!((s1.drift_divergence(0.5) + 0.5 * s1.beta(0.5).unwrap()).abs() < 1e-15);
    }

    /// Composite Simpson quadrature in `u = ln t`.
    fn quad_log(f: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> f64 {
        let (a, b) = (lo.ln(), hi.ln());
        let h = (b - a) / n as f64;
        let g = |u: f64| {
            let t = u.exp();
            f(t) * t
        };
        let mut acc = g(a) + g(b);
        for i in 1..n {
            acc += g(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        acc * h / 3.0
    }

    #[test]
    fn proposal_normalizer_matches_quadrature() {
        for s in [spec(20.0, 1), spec(10.0, 1)] {
            let p = s.time_proposal().unwrap();
            let integrand = |t: f64| {
                let (_, r) = s.kernel_params(t).unwrap();
                s.g2(t) / (r * r)
            };
            let z = quad_log(integrand, s.t_eps, 1.0, 20_000);
            assert!((p.normalizer() / z - 1.0).abs() < 1e-6, "{} vs {}", p.normalizer(), z);
            assert!((p.cdf(1.0) - 1.0).abs() < 1e-9);
            assert_eq!(p.cdf(s.t_eps), 0.0);
        }
    }

    #[test]
    fn proposal_cdf_monotone_and_inverse_consistent() {
        let s = spec(20.0, 1);
        let p = s.time_proposal().unwrap();
        let grid = p.grid(10_000);
        assert!(grid.windows(2).all(|w| w[1].1 >= w[0].1));
        assert!(grid[0].1.abs() < 1e-12);
        assert!((grid.last().unwrap().1 - 1.0).abs() < 1e-9);
        for i in 1..100 {
            let u = i as f64 / 100.0;
            assert!((p.cdf(p.inverse_cdf(u)) - u).abs() < 1e-10);
        }
    }

    #[test]
    fn sampled_times_match_proposal_mean() {
        let s = spec(20.0, 1);
        let p = s.time_proposal().unwrap();
        let mean_ref = quad_log(|t| t * p.density(t), s.t_eps, 1.0, 20_000);
        let mut g = rng::stream(11, 0);
        let n = 1_000_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let (t, w) = p.sample_time(&mut g);
            assert!(t >= s.t_eps && t <= 1.0);
            let (_, r) = s.kernel_params(t).unwrap();
            assert!((w - p.normalizer() * r * r).abs() < 1e-12);
            acc += t;
        }
        let m = acc / n as f64;
        assert!((m / mean_ref - 1.0).abs() < 0.01, "{m} vs {mean_ref}");
    }
}
