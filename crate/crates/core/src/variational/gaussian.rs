use super::Variational;
use crate::error::{Error, Result};

/// Diagonal Gaussian with parameters `[μ, σ_raw]`; the standard deviation is
/// `|σ_raw|`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian {
    dim: usize,
    params: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mu: Vec<f64>, sigma_raw: Vec<f64>) -> Result<Self> {
        crate::error::check_dim(mu.len(), sigma_raw.len())?;
        if mu.iter().chain(&sigma_raw).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite Gaussian parameters".into()));
        }
        let dim = mu.len();
        let mut params = mu;
        params.extend(sigma_raw);
        Ok(Self { dim, params })
    }

    pub fn mean(&self) -> &[f64] {
        &self.params[..self.dim]
    }

    pub fn std(&self) -> Vec<f64> {
        self.params[self.dim..].iter().map(|s| s.abs()).collect()
    }
}

impl Variational for DiagGaussian {
    fn dim(&self) -> usize {
        self.dim
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn transform(&self, eps: &[f64]) -> (Vec<f64>, f64) {
        let (mu, s) = self.params.split_at(self.dim);
        let x = mu.iter().zip(s).zip(eps).map(|((m, s), e)| m + s.abs() * e).collect();
        (x, s.iter().map(|s| s.abs().ln()).sum())
    }

    fn inverse(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        let (mu, s) = self.params.split_at(self.dim);
        if s.iter().any(|&s| s == 0.0) {
            return Err(Error::InvalidParameter("zero standard deviation".into()));
        }
        let eps = x.iter().zip(mu).zip(s).map(|((x, m), s)| (x - m) / s.abs()).collect();
        Ok((eps, s.iter().map(|s| s.abs().ln()).sum()))
    }

    fn transform_vjp(&self, eps: &[f64], gx: &[f64], c: f64) -> (Vec<f64>, Vec<f64>) {
        let d = self.dim;
        let s = &self.params[d..];
        let mut gp = vec![0.0; 2 * d];
        gp[..d].copy_from_slice(gx);
        for i in 0..d {
            gp[d + i] = gx[i] * eps[i] * s[i].signum() + c / s[i];
        }
        let ge = gx.iter().zip(s).map(|(g, s)| g * s.abs()).collect();
        (gp, ge)
    }

    fn representative_mean(&self, _seed: u64) -> Vec<f64> {
        self.mean().to_vec()
    }
}
