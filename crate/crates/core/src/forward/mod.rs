//! Measurement operators and their Gaussian log-likelihoods.
//!
//! Complex outputs are stored as interleaved `(re, im)` pairs; every real
//! component carries its own noise standard deviation.

mod fourier;
mod vlbi;

pub use fourier::{poisson_disc_mask, LowFreqOp, MriOp, PoissonDiscMask};
pub use vlbi::{
    closure_phases, log_closure_amplitudes, select_nonredundant, vlbi_visibilities, ClosureOp, Quad, Triangle,
    UvCoverage, UvRecord, MICROARCSEC,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::rng::normal_vec;

/// A differentiable map from images to measurement vectors.
pub trait Forward {
    fn input_dim(&self) -> usize;

    fn output_len(&self) -> usize;

    fn forward(&self, x: &[f64]) -> Result<Vec<f64>>;

    /// `J(x)ᵀc` for the operator Jacobian at `x`.
    fn vjp(&self, x: &[f64], cot: &[f64]) -> Result<Vec<f64>>;

    /// Residual `y - F(x)`; closure phases override this to wrap angles.
    fn residual(&self, y: &[f64], fx: &[f64]) -> Vec<f64> {
        y.iter().zip(fx).map(|(a, b)| a - b).collect()
    }
}

/// Identity operator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DenoiseOp {
    pub dim: usize,
}

/// Dense real matrix operator, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseOp {
    pub rows: usize,
    pub cols: usize,
    pub matrix: Vec<f64>,
}

impl DenseOp {
    pub fn new(rows: usize, cols: usize, matrix: Vec<f64>) -> Result<Self> {
        check_dim(rows * cols, matrix.len())?;
        Ok(Self { rows, cols, matrix })
    }

    pub fn identity(n: usize) -> Self {
        let mut matrix = vec![0.0; n * n];
        (0..n).for_each(|i| matrix[i * n + i] = 1.0);
        Self { rows: n, cols: n, matrix }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.matrix[i * self.cols..(i + 1) * self.cols]
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rows).map(|i| crate::linalg::dot(self.row(i), x)).collect()
    }

    pub fn apply_transpose(&self, c: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (i, ci) in c.iter().enumerate() {
            crate::linalg::axpy(*ci, self.row(i), &mut out);
        }
        out
    }

    /// Moore–Penrose pseudo-inverse as a dense operator.
    pub fn pseudo_inverse(&self) -> Result<DenseOp> {
        let m = nalgebra::DMatrix::from_row_slice(self.rows, self.cols, &self.matrix);
        let p = m
            .pseudo_inverse(1e-12)
            .map_err(|e| Error::InvalidParameter(format!("pseudo-inverse: {e}")))?;
        let mut data = Vec::with_capacity(self.rows * self.cols);
        for i in 0..self.cols {
            for j in 0..self.rows {
                data.push(p[(i, j)]);
            }
        }
        DenseOp::new(self.cols, self.rows, data)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "kebab-case")]
pub enum ForwardOp {
    Denoise(DenoiseOp),
    Dense(DenseOp),
    LowFreq(LowFreqOp),
    Mri(MriOp),
    VlbiClosure(ClosureOp),
}

impl ForwardOp {
    pub fn model_id(&self) -> &'static str {
        match self {
            ForwardOp::Denoise(_) => "denoise",
            ForwardOp::Dense(_) => "dense",
            ForwardOp::LowFreq(_) => "low-freq",
            ForwardOp::Mri(_) => "mri",
            ForwardOp::VlbiClosure(_) => "vlbi-closure",
        }
    }

    fn inner(&self) -> &dyn Forward {
        match self {
            ForwardOp::Denoise(o) => o,
            ForwardOp::Dense(o) => o,
            ForwardOp::LowFreq(o) => o,
            ForwardOp::Mri(o) => o,
            ForwardOp::VlbiClosure(o) => o,
        }
    }

    pub fn is_linear(&self) -> bool {
        !matches!(self, ForwardOp::VlbiClosure(_))
    }

    /// Dense matrix of a linear operator, built column by column.
    pub fn to_dense(&self) -> Result<DenseOp> {
        if !self.is_linear() {
            return Err(Error::Unsupported(format!("{} is not linear", self.model_id())));
        }
        if let ForwardOp::Dense(a) = self {
            return Ok(a.clone());
        }
        let (n, m) = (self.input_dim(), self.output_len());
        let mut matrix = vec![0.0; m * n];
        let mut e = vec![0.0; n];
        for j in 0..n {
            e[j] = 1.0;
            let col = self.forward(&e)?;
            e[j] = 0.0;
            for i in 0..m {
                matrix[i * n + j] = col[i];
            }
        }
        DenseOp::new(m, n, matrix)
    }

    /// Image shape for operators defined on 2D images.
    pub fn image_shape(&self) -> Option<(usize, usize)> {
        match self {
            ForwardOp::LowFreq(o) => Some((o.height, o.width)),
            ForwardOp::Mri(o) => Some((o.height, o.width)),
            ForwardOp::VlbiClosure(o) => Some((o.height, o.width)),
            _ => None,
        }
    }
}

impl Forward for ForwardOp {
    fn input_dim(&self) -> usize {
        self.inner().input_dim()
    }
    fn output_len(&self) -> usize {
        self.inner().output_len()
    }
    fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.inner().forward(x)
    }
    fn vjp(&self, x: &[f64], cot: &[f64]) -> Result<Vec<f64>> {
        self.inner().vjp(x, cot)
    }
    fn residual(&self, y: &[f64], fx: &[f64]) -> Vec<f64> {
        self.inner().residual(y, fx)
    }
}

impl Forward for DenoiseOp {
    fn input_dim(&self) -> usize {
        self.dim
    }
    fn output_len(&self) -> usize {
        self.dim
    }
    fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim, x.len())?;
        Ok(x.to_vec())
    }
    fn vjp(&self, x: &[f64], cot: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim, x.len())?;
        check_dim(self.dim, cot.len())?;
        Ok(cot.to_vec())
    }
}

impl Forward for DenseOp {
    fn input_dim(&self) -> usize {
        self.cols
    }
    fn output_len(&self) -> usize {
        self.rows
    }
    fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.cols, x.len())?;
        Ok(self.apply(x))
    }
    fn vjp(&self, x: &[f64], cot: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.cols, x.len())?;
        check_dim(self.rows, cot.len())?;
        Ok(self.apply_transpose(cot))
    }
}

/// Observed data `y`, per-component noise and the operator that produced it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Measurement {
    pub values: Vec<f64>,
    pub noise_sigma: Vec<f64>,
    pub op: ForwardOp,
}

impl Measurement {
    pub fn new(values: Vec<f64>, noise_sigma: Vec<f64>, op: ForwardOp) -> Result<Self> {
        check_dim(op.output_len(), values.len())?;
        check_dim(values.len(), noise_sigma.len())?;
        if noise_sigma.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidParameter("noise sigma must be positive".into()));
        }
        Ok(Self { values, noise_sigma, op })
    }

    /// Simulate `y = F(x) + σ·n`. A zero `sigma` returns the noiseless output
    /// (the stored σ must still be positive, so `sigma_floor` is recorded).
    pub fn simulate<R: Rng + ?Sized>(op: ForwardOp, x: &[f64], sigma: &[f64], rng: &mut R) -> Result<Self> {
        let fx = op.forward(x)?;
        check_dim(fx.len(), sigma.len())?;
        let n = normal_vec(rng, fx.len());
        let values = fx.iter().zip(sigma).zip(&n).map(|((f, s), z)| f + s * z).collect();
        let recorded = sigma.iter().map(|s| if *s > 0.0 { *s } else { f64::MIN_POSITIVE }).collect();
        Self::new(values, recorded, op)
    }

    pub fn model_id(&self) -> &'static str {
        self.op.model_id()
    }

    /// `-½ Σ ((y - F(x))/σ)²`, dropping the normalizing constant.
    pub fn log_likelihood(&self, x: &[f64]) -> Result<f64> {
        let fx = self.op.forward(x)?;
        let r = self.op.residual(&self.values, &fx);
        Ok(-0.5 * r.iter().zip(&self.noise_sigma).map(|(ri, s)| (ri / s).powi(2)).sum::<f64>())
    }

    pub fn log_likelihood_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let fx = self.op.forward(x)?;
        let r = self.op.residual(&self.values, &fx);
        let mut ll = 0.0;
        let cot: Vec<f64> = r
            .iter()
            .zip(&self.noise_sigma)
            .map(|(ri, s)| {
                ll += (ri / s).powi(2);
                ri / (s * s)
            })
            .collect();
        Ok((-0.5 * ll, self.op.vjp(x, &cot)?))
    }

    /// The dropped constant `-Σ ln(σ√(2π))`.
    pub fn log_normalizer(&self) -> f64 {
        -self
            .noise_sigma
            .iter()
            .map(|s| (s * (2.0 * std::f64::consts::PI).sqrt()).ln())
            .sum::<f64>()
    }
}

/// `weight · (Σx - target)²` and its gradient.
pub fn flux_penalty(x: &[f64], target: f64, weight: f64) -> (f64, Vec<f64>) {
    let r = x.iter().sum::<f64>() - target;
    (weight * r * r, vec![2.0 * weight * r; x.len()])
}

/// Finite-difference check helper shared by the operator tests.
#[cfg(test)]
pub(crate) fn check_vjp_fd(op: &dyn Forward, x: &[f64], tol: f64) {
    let m = op.output_len();
    let c: Vec<f64> = (0..m).map(|k| ((k * 5 + 1) % 7) as f64 / 7.0 - 0.4).collect();
    let g = op.vjp(x, &c).unwrap();
    let h = 1e-6;
    for i in 0..x.len() {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[i] += h;
        xm[i] -= h;
        let fp = op.forward(&xp).unwrap();
        let fm = op.forward(&xm).unwrap();
        let fd: f64 = (0..m).map(|k| c[k] * (fp[k] - fm[k]) / (2.0 * h)).sum();
        assert!((fd - g[i]).abs() <= tol * (1.0 + fd.abs()), "component {i}: fd {fd} vs {}", g[i]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn denoise_examples() {
        let op = ForwardOp::Denoise(DenoiseOp { dim: 3 });
        let x = [0.5, -1.0, 2.0];
        assert_eq!(op.forward(&x).unwrap(), x.to_vec());
        let m = Measurement::new(x.to_vec(), vec![0.2; 3], op.clone()).unwrap();
        assert_eq!(m.log_likelihood(&x).unwrap(), 0.0);
        let y: Vec<f64> = x.iter().map(|v| v + 0.2).collect();
        let m = Measurement::new(y, vec![0.2; 3], op).unwrap();
        assert!((m.log_likelihood(&x).unwrap() + 1.5).abs() < 1e-12);
        // Reduces to a scaled squared distance.
        let z = [0.1, 0.1, 0.1];
        let d2: f64 = m.values.iter().zip(&z).map(|(a, b)| (a - b).powi(2)).sum();
        assert!((m.log_likelihood(&z).unwrap() + d2 / (2.0 * 0.04)).abs() < 1e-12);
    }

    #[test]
    fn likelihood_gradients_match_finite_differences() {
        let mut g = stream(3, 0);
        let ops = vec![
            ForwardOp::Denoise(DenoiseOp { dim: 16 }),
            ForwardOp::Dense(DenseOp::new(3, 16, normal_vec(&mut g, 48)).unwrap()),
            ForwardOp::LowFreq(LowFreqOp::new(4, 4, 0.25).unwrap()),
            ForwardOp::Mri(MriOp::new(4, 4, poisson_disc_mask(4, 4, 2.0, &mut g).unwrap().mask).unwrap()),
        ];
        for op in ops {
            let x = normal_vec(&mut g, 16);
            let truth = normal_vec(&mut g, 16);
            let sig = vec![0.3; op.output_len()];
            let m = Measurement::simulate(op, &truth, &sig, &mut g).unwrap();
            let (ll, gr) = m.log_likelihood_grad(&x).unwrap();
            assert_eq!(ll, m.log_likelihood(&x).unwrap());
            for i in 0..16 {
                let f = |d: f64| {
                    let mut xp = x.clone();
                    xp[i] += d;
                    m.log_likelihood(&xp).unwrap()
                };
                let fd = (f(1e-5) - f(-1e-5)) / 2e-5;
                assert!((fd - gr[i]).abs() < 1e-5 * (1.0 + fd.abs()), "{} {i}", m.model_id());
            }
        }
    }

    #[test]
    fn linear_operators_superpose() {
        let mut g = stream(4, 0);
        let ops = vec![
            ForwardOp::Dense(DenseOp::new(5, 16, normal_vec(&mut g, 80)).unwrap()),
            ForwardOp::LowFreq(LowFreqOp::new(4, 4, 0.5).unwrap()),
            ForwardOp::Mri(MriOp::new(4, 4, vec![true; 16]).unwrap()),
        ];
        for op in ops {
            let a = normal_vec(&mut g, 16);
            let b = normal_vec(&mut g, 16);
            let ab: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 2.0 * x - 3.0 * y).collect();
            let fa = op.forward(&a).unwrap();
            let fb = op.forward(&b).unwrap();
            let fab = op.forward(&ab).unwrap();
            for k in 0..fab.len() {
                assert!((fab[k] - (2.0 * fa[k] - 3.0 * fb[k])).abs() < 1e-10);
            }
            let dense = op.to_dense().unwrap();
            for (u, v) in dense.apply(&a).iter().zip(&fa) {
                assert!((u - v).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn pseudo_inverse_of_row_selector() {
        let a = DenseOp::new(1, 2, vec![1.0, 0.0]).unwrap();
        let p = a.pseudo_inverse().unwrap();
        assert_eq!((p.rows, p.cols), (2, 1));
        assert!((p.matrix[0] - 1.0).abs() < 1e-12 && p.matrix[1].abs() < 1e-12);
    }

    #[test]
    fn flux_examples() {
        let (v, g) = flux_penalty(&[100.0, 73.0], 173.0, 5.0);
        assert_eq!(v, 0.0);
        assert!(g.iter().all(|x| *x == 0.0));
        let x = [1.0, 2.0, 3.5];
        let (_, g) = flux_penalty(&x, 173.0, 0.3);
        for i in 0..3 {
            let f = |d: f64| {
                let mut y = x;
                y[i] += d;
                flux_penalty(&y, 173.0, 0.3).0
            };
            let fd = (f(1e-4) - f(-1e-4)) / 2e-4;
            assert!((fd - g[i]).abs() < 1e-6 * fd.abs());
        }
    }

    #[test]
    fn noiseless_simulation_equals_forward() {
        let op = ForwardOp::LowFreq(LowFreqOp::new(4, 4, 0.25).unwrap());
        let x: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let m = Measurement::simulate(op.clone(), &x, &vec![0.0; op.output_len()], &mut stream(0, 0)).unwrap();
        assert_eq!(m.values, op.forward(&x).unwrap());
    }

    #[test]
    fn rejects_bad_noise() {
        let op = ForwardOp::Denoise(DenoiseOp { dim: 2 });
        assert!(Measurement::new(vec![0.0; 2], vec![0.0, 1.0], op.clone()).is_err());
        assert!(Measurement::new(vec![0.0; 3], vec![1.0; 3], op).is_err());
    }
}
