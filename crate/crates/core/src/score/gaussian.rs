use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::{check_score_time, ScoreField, ScoreKind};
use crate::diffusion::DiffusionSpec;
use crate::error::{check_dim, Error, Result};
use crate::linalg::to_dmatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPriorSpec {
    pub mean: Vec<f64>,
    /// Row-major covariance rows.
    pub covariance: Vec<Vec<f64>>,
}

impl GaussianPriorSpec {
    pub fn isotropic(mean: Vec<f64>, var: f64) -> Self {
        let d = mean.len();
        let covariance = (0..d)
            .map(|i| (0..d).map(|j| if i == j { var } else { 0.0 }).collect())
            .collect();
        Self { mean, covariance }
    }

    pub fn standard(dim: usize) -> Self {
        Self::isotropic(vec![0.0; dim], 1.0)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn covariance_matrix(&self) -> DMatrix<f64> {
        to_dmatrix(&self.covariance)
    }
}

/// A Gaussian stored through the eigendecomposition of its covariance, so
/// that every diffused marginal `N(αm, α²C + ρ²I)` shares the eigenbasis.
#[derive(Debug, Clone)]
pub(crate) struct EigenGaussian {
    pub mean: Vec<f64>,
    pub lambda: Vec<f64>,
    /// `None` when the covariance is diagonal (eigenbasis = identity).
    pub basis: Option<DMatrix<f64>>,
}

/// Per-time quantities of one diffused component.
pub(crate) struct Diffused<'a> {
    g: &'a EigenGaussian,
    alpha: f64,
    inv_var: Vec<f64>,
    log_norm: f64,
}

impl EigenGaussian {
    pub fn new(mean: &[f64], cov: &[Vec<f64>]) -> Result<Self> {
        let d = mean.len();
        if d == 0 {
            return Err(Error::InvalidParameter("empty mean".into()));
        }
        check_dim(d, cov.len())?;
        for row in cov {
            check_dim(d, row.len())?;
        }
        let c = to_dmatrix(cov);
        let scale = c.amax().max(1e-300);
        for i in 0..d {
            for j in 0..i {
                if (c[(i, j)] - c[(j, i)]).abs() > 1e-10 * scale {
                    return Err(Error::NotPositiveDefinite("covariance is not symmetric".into()));
                }
            }
        }
        let diagonal = (0..d).all(|i| (0..d).all(|j| i == j || c[(i, j)] == 0.0));
        let (lambda, basis) = if diagonal {
            ((0..d).map(|i| c[(i, i)]).collect::<Vec<_>>(), None)
        } else {
            let sym = (&c + c.transpose()) * 0.5;
            let e = SymmetricEigen::new(sym);
            (e.eigenvalues.iter().copied().collect(), Some(e.eigenvectors))
        };
        if let Some(l) = lambda.iter().find(|l| !(**l > 0.0)) {
            return Err(Error::NotPositiveDefinite(format!("covariance eigenvalue {l}")));
        }
        Ok(Self {
            mean: mean.to_vec(),
            lambda,
            basis,
        })
    }

    pub fn diffused(&self, alpha: f64, rho: f64) -> Diffused<'_> {
        let r2 = rho * rho;
        let a2 = alpha * alpha;
        let mut log_norm = 0.0;
        let inv_var = self
            .lambda
            .iter()
            .map(|l| {
                let v = a2 * l + r2;
                log_norm += (2.0 * std::f64::consts::PI * v).ln();
                1.0 / v
            })
            .collect();
        Diffused {
            g: self,
            alpha,
            inv_var,
            log_norm: -0.5 * log_norm,
        }
    }
}

impl Diffused<'_> {
    fn to_eig(&self, v: &[f64]) -> Vec<f64> {
        match &self.g.basis {
            None => v.to_vec(),
            Some(u) => (u.transpose() * DVector::from_column_slice(v)).iter().copied().collect(),
        }
    }

    fn from_eig(&self, v: Vec<f64>) -> Vec<f64> {
        match &self.g.basis {
            None => v,
            Some(u) => (u * DVector::from_vec(v)).iter().copied().collect(),
        }
    }

    /// `Σ_t⁻¹ v`.
    pub fn apply_precision(&self, v: &[f64]) -> Vec<f64> {
        let mut w = self.to_eig(v);
        for (wi, p) in w.iter_mut().zip(&self.inv_var) {
            *wi *= p;
        }
        self.from_eig(w)
    }

    /// Score and log-density at `x`.
    pub fn score_logpdf(&self, x: &[f64]) -> (Vec<f64>, f64) {
        let r: Vec<f64> = x.iter().zip(&self.g.mean).map(|(xi, m)| xi - self.alpha * m).collect();
        let mut w = self.to_eig(&r);
        let mut quad = 0.0;
        for (wi, p) in w.iter_mut().zip(&self.inv_var) {
            quad += *wi * *wi * p;
            *wi *= -p;
        }
        (self.from_eig(w), self.log_norm - 0.5 * quad)
    }

    pub fn trace_precision(&self) -> f64 {
        self.inv_var.iter().sum()
    }
}

/// Exact score of a diffused Gaussian prior.
#[derive(Debug, Clone)]
pub struct GaussianScore {
    prior: GaussianPriorSpec,
    eig: EigenGaussian,
    spec: DiffusionSpec,
}

impl GaussianScore {
    pub fn new(prior: GaussianPriorSpec, spec: DiffusionSpec) -> Result<Self> {
        spec.validate()?;
        check_dim(spec.dim, prior.dim())?;
        let eig = EigenGaussian::new(&prior.mean, &prior.covariance)?;
        Ok(Self { prior, eig, spec })
    }

    pub fn prior(&self) -> &GaussianPriorSpec {
        &self.prior
    }

    /// Log-density of the diffused marginal `p_t`; `t = 0` gives the prior.
    pub fn log_density(&self, x: &[f64], t: f64) -> Result<f64> {
        check_dim(self.spec.dim, x.len())?;
        let (a, r) = self.spec.kernel_params(t)?;
        Ok(self.eig.diffused(a, r).score_logpdf(x).1)
    }

    /// Trace of the score Jacobian, `-tr Σ_t⁻¹`.
    pub fn jacobian_trace(&self, t: f64) -> Result<f64> {
        check_score_time(&self.spec, t)?;
        let (a, r) = self.spec.kernel_unchecked(t);
        Ok(-self.eig.diffused(a, r).trace_precision())
    }

    fn diffused(&self, x: &[f64], t: f64) -> Result<Diffused<'_>> {
        check_dim(self.spec.dim, x.len())?;
        check_score_time(&self.spec, t)?;
        let (a, r) = self.spec.kernel_unchecked(t);
        Ok(self.eig.diffused(a, r))
    }
}

impl ScoreField for GaussianScore {
    fn dim(&self) -> usize {
        self.spec.dim
    }

    fn kind(&self) -> ScoreKind {
        ScoreKind::GaussianAnalytic
    }

    fn diffusion(&self) -> &DiffusionSpec {
        &self.spec
    }

    fn score(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        Ok(self.diffused(x, t)?.score_logpdf(x).0)
    }

    fn score_and_pullback(
        &self,
        x: &[f64],
        t: f64,
        cot: &mut dyn FnMut(&[f64]) -> Vec<f64>,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let d = self.diffused(x, t)?;
        let s = d.score_logpdf(x).0;
        let c = cot(&s);
        let v = d.apply_precision(&c).into_iter().map(|v| -v).collect();
        Ok((s, v))
    }

    fn score_vjps(&self, x: &[f64], t: f64, cots: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let d = self.diffused(x, t)?;
        let s = d.score_logpdf(x).0;
        let v = cots
            .iter()
            .map(|c| d.apply_precision(c).into_iter().map(|v| -v).collect())
            .collect();
        Ok((s, v))
    }

    fn quad_form_grad(&self, x: &[f64], _t: f64, _eps: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![0.0; x.len()])
    }
}

#[cfg(test)]
mod tests {
    use super::super::testutil::check_vjps;
    use super::*;
    use proptest::prelude::*;

    fn spec(d: usize) -> DiffusionSpec {
        DiffusionSpec::new(0.1, 20.0, d).unwrap()
    }

    fn correlated() -> GaussianPriorSpec {
        GaussianPriorSpec {
            mean: vec![0.5, -1.0, 2.0],
            covariance: vec![
                vec![1.0, 0.3, 0.1],
                vec![0.3, 0.5, -0.2],
                vec![0.1, -0.2, 2.0],
            ],
        }
    }

    #[test]
    fn standard_normal_score_is_minus_x() {
        let g = GaussianScore::new(GaussianPriorSpec::standard(3), spec(3)).unwrap();
        for t in [1e-5, 0.01, 0.3, 1.0] {
            let x = [0.7, -1.2, 3.0];
            let s = g.score(&x, t).unwrap();
            for (a, b) in s.iter().zip(&x) {
                assert!((a + b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn terminal_score_approaches_minus_x() {
        let g = GaussianScore::new(correlated(), DiffusionSpec::new(0.1, 60.0, 3).unwrap()).unwrap();
        let x = [0.4, 1.0, -2.0];
        let s = g.score(&x, 1.0).unwrap();
        for (a, b) in s.iter().zip(&x) {
            assert!((a + b).abs() < 1e-6);
        }
    }

    #[test]
    fn score_matches_log_density_gradient() {
        let g = GaussianScore::new(correlated(), spec(3)).unwrap();
        let x = [0.1, 0.2, -0.3];
        let h = 1e-4;
        for t in [1e-3, 0.05, 0.5, 1.0] {
            let s = g.score(&x, t).unwrap();
            for i in 0..3 {
                let mut xp = x;
                let mut xm = x;
                xp[i] += h;
                xm[i] -= h;
                let fd = (g.log_density(&xp, t).unwrap() - g.log_density(&xm, t).unwrap()) / (2.0 * h);
                assert!((fd - s[i]).abs() < 1e-5 * (1.0 + fd.abs()), "t={t} i={i}");
            }
        }
    }

    #[test]
    fn log_density_matches_dense_formula() {
        let p = correlated();
        let g = GaussianScore::new(p.clone(), spec(3)).unwrap();
        let x = [1.0, 0.0, -1.0];
        let t = 0.2;
        let (a, r) = g.spec.kernel_params(t).unwrap();
        let cov = p.covariance_matrix() * (a * a) + DMatrix::identity(3, 3) * (r * r);
        let m: Vec<f64> = p.mean.iter().map(|v| a * v).collect();
        let chol = cov.cholesky().unwrap();
        let want = crate::linalg::gaussian_logpdf_chol(&x, &m, &chol);
        assert!((g.log_density(&x, t).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn vjps_match_finite_differences() {
        let g = GaussianScore::new(correlated(), spec(3)).unwrap();
        check_vjps(&g, &[0.3, -0.1, 0.9], 0.1, 1e-6);
        let tr = g.jacobian_trace(0.1).unwrap();
        let jac = super::super::testutil::fd_jacobian(&g, &[0.0; 3], 0.1, 1e-4);
        let fd: f64 = (0..3).map(|i| jac[i][i]).sum();
        assert!((tr - fd).abs() < 1e-6 * fd.abs());
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut p = correlated();
        p.covariance[0][0] = -1.0;
        assert!(matches!(GaussianScore::new(p, spec(3)), Err(Error::NotPositiveDefinite(_))));
        let mut p = correlated();
        p.covariance[0][1] = 0.9;
        assert!(GaussianScore::new(p, spec(3)).is_err());
        let g = GaussianScore::new(correlated(), spec(3)).unwrap();
        assert!(g.score(&[0.0; 2], 0.5).is_err());
        assert!(g.score(&[0.0; 3], 0.0).is_err());
        assert!(g.score(&[0.0; 3], 1.5).is_err());
    }

    proptest! {
        #[test]
        fn diagonal_and_rotated_paths_agree(
            l1 in 0.05f64..3.0, l2 in 0.05f64..3.0, th in 0.0f64..3.1,
            x0 in -3.0f64..3.0, x1 in -3.0f64..3.0, t in 1e-4f64..1.0,
        ) {
            // Build C = R diag(l) Rᵀ; the score must equal the rotated
            // score of the diagonal prior.
            let (c, s) = (th.cos(), th.sin());
            let cov = vec![
                vec![c * c * l1 + s * s * l2, c * s * (l1 - l2)],
                vec![c * s * (l1 - l2), s * s * l1 + c * c * l2],
            ];
            let g = GaussianScore::new(GaussianPriorSpec { mean: vec![0.0; 2], covariance: cov }, spec(2)).unwrap();
            let gd = GaussianScore::new(
                GaussianPriorSpec { mean: vec![0.0; 2], covariance: vec![vec![l1, 0.0], vec![0.0, l2]] },
                spec(2),
            ).unwrap();
            let y = [c * x0 + s * x1, -s * x0 + c * x1];
            let sd = gd.score(&y, t).unwrap();
            let want = [c * sd[0] - s * sd[1], s * sd[0] + c * sd[1]];
            let got = g.score(&[x0, x1], t).unwrap();
            for i in 0..2 {
                prop_assert!((got[i] - want[i]).abs() < 1e-8 * (1.0 + want[i].abs()));
            }
        }
    }
}
