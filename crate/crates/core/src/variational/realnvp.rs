//! RealNVP flow: alternating affine couplings, each preceded by an
//! elementwise normalization layer.
//!
//! Normalization is `y = (u - m)/√v · e^s + b` with learnable `(s, b)` and
//! running moments `(m, v)` that are constants for density evaluation. The
//! moments move only in [`Variational::after_step`], which also adjusts
//! `(s, b)` so that the transform itself is unchanged.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Variational;
use crate::error::{Error, Result};
use crate::nn::{Activation, MlpCache, MlpShape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RealNvpConfig {
    #[serde(default = "default_layers")]
    pub n_layers: usize,
    /// Hidden width is `max(⌈D/8⌉, min_width)`.
    #[serde(default = "default_min_width")]
    pub min_width: usize,
    /// Log-scales are `c·tanh(raw/c)` with this `c`.
    #[serde(default = "default_scale_bound")]
    pub scale_bound: f64,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default = "default_momentum")]
    pub norm_momentum: f64,
}

fn default_layers() -> usize {
    32
}
fn default_min_width() -> usize {
    32
}
fn default_scale_bound() -> f64 {
    2.0
}
fn default_activation() -> Activation {
    Activation::Silu
}
fn default_momentum() -> f64 {
    0.05
}

impl Default for RealNvpConfig {
    fn default() -> Self {
        Self {
            n_layers: default_layers(),
            min_width: default_min_width(),
            scale_bound: default_scale_bound(),
            activation: default_activation(),
            norm_momentum: default_momentum(),
        }
    }
}

impl RealNvpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.min_width == 0 {
            return Err(Error::InvalidParameter("flow needs at least one layer and positive width".into()));
        }
        if !(self.scale_bound > 0.0 && self.scale_bound.is_finite()) {
            return Err(Error::InvalidParameter("scale bound must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.norm_momentum) {
            return Err(Error::InvalidParameter("normalization momentum must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn width(&self, dim: usize) -> usize {
        dim.div_ceil(8).max(self.min_width)
    }
}

/// Flow description stored in checkpoint manifests.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct FlowInfo {
    config: RealNvpConfig,
    width: usize,
    /// Per layer, `1` marks conditioning coordinates.
    masks: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct RealNvp {
    dim: usize,
    cfg: RealNvpConfig,
    width: usize,
    /// Conditioning and transformed coordinates for each mask parity.
    split: [(Vec<usize>, Vec<usize>); 2],
    shapes: [MlpShape; 2],
    /// Start of each layer's parameter block.
    offsets: Vec<usize>,
    params: Vec<f64>,
    run_mean: Vec<Vec<f64>>,
    run_var: Vec<Vec<f64>>,
}

struct LayerCache {
    norm_in: Vec<f64>,
    coup_in: Vec<f64>,
    mlp: MlpCache,
    raw_tanh: Vec<f64>,
}

impl RealNvp {
    fn skeleton(cfg: RealNvpConfig, dim: usize) -> Result<Self> {
        cfg.validate()?;
        if dim == 0 {
            return Err(Error::InvalidParameter("flow dimension must be at least 1".into()));
        }
        let width = cfg.width(dim);
        let split = [0, 1].map(|p| {
            let a: Vec<usize> = (0..dim).filter(|i| (i + p) % 2 == 0).collect();
            let b: Vec<usize> = (0..dim).filter(|i| (i + p) % 2 == 1).collect();
            (a, b)
        });
        let shapes = [0, 1].map(|p| MlpShape::new(vec![split[p].0.len(), width, width, 2 * split[p].1.len()], cfg.activation));
        let mut offsets = Vec::with_capacity(cfg.n_layers + 1);
        let mut off = 0;
        for l in 0..cfg.n_layers {
            offsets.push(off);
            off += 2 * dim + shapes[l % 2].n_params();
        }
        offsets.push(off);
        Ok(Self {
            dim,
            width,
            split,
            shapes,
            params: vec![0.0; off],
            run_mean: vec![vec![0.0; dim]; cfg.n_layers],
            run_var: vec![vec![1.0; dim]; cfg.n_layers],
            offsets,
            cfg,
        })
    }

    /// Identity-initialized flow: coupling output layers and normalization
    /// parameters start at zero.
    pub fn init<R: Rng + ?Sized>(cfg: RealNvpConfig, dim: usize, rng: &mut R) -> Result<Self> {
        let mut f = Self::skeleton(cfg, dim)?;
        for l in 0..f.cfg.n_layers {
            let p = f.shapes[l % 2].init(rng, 0.0);
            let o = f.offsets[l] + 2 * dim;
            f.params[o..o + p.len()].copy_from_slice(&p);
        }
        Ok(f)
    }

    pub(crate) fn from_parts(info: FlowInfo, dim: usize, params: Vec<f64>, state: &[f64]) -> Result<Self> {
        let mut f = Self::skeleton(info.config, dim)?;
        if info.width != f.width || info.masks != f.mask_strings() {
            return Err(Error::Format("flow architecture disagrees with manifest".into()));
        }
        if params.len() != f.params.len() || state.len() != 2 * dim * f.cfg.n_layers {
            return Err(Error::Format("flow parameter count disagrees with manifest".into()));
        }
        f.params = params;
        for l in 0..f.cfg.n_layers {
            let s = &state[2 * dim * l..2 * dim * (l + 1)];
            f.run_mean[l] = s[..dim].to_vec();
            f.run_var[l] = s[dim..].to_vec();
            if f.run_var[l].iter().any(|v| !(*v > 0.0)) {
                return Err(Error::Format("non-positive running variance".into()));
            }
        }
        Ok(f)
    }

    pub fn config(&self) -> &RealNvpConfig {
        &self.cfg
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn n_layers(&self) -> usize {
        self.cfg.n_layers
    }

    fn mask_strings(&self) -> Vec<String> {
        (0..self.cfg.n_layers)
            .map(|l| (0..self.dim).map(|i| if (i + l) % 2 == 0 { '1' } else { '0' }).collect())
            .collect()
    }

    pub(crate) fn manifest_info(&self) -> FlowInfo {
        FlowInfo {
            config: self.cfg.clone(),
            width: self.width,
            masks: self.mask_strings(),
        }
    }

    /// Running moments, layer by layer as `[mean, var]`.
    pub(crate) fn norm_state(&self) -> Vec<f64> {
        let mut s = Vec::with_capacity(2 * self.dim * self.cfg.n_layers);
        for l in 0..self.cfg.n_layers {
            s.extend(&self.run_mean[l]);
            s.extend(&self.run_var[l]);
        }
        s
    }

    fn norm_params(&self, l: usize) -> (&[f64], &[f64]) {
        let o = self.offsets[l];
        (&self.params[o..o + self.dim], &self.params[o + self.dim..o + 2 * self.dim])
    }

    fn mlp_params(&self, l: usize) -> &[f64] {
        &self.params[self.offsets[l] + 2 * self.dim..self.offsets[l + 1]]
    }

    fn norm_forward(&self, l: usize, u: &[f64]) -> (Vec<f64>, f64) {
        let (s, b) = self.norm_params(l);
        let (m, v) = (&self.run_mean[l], &self.run_var[l]);
        let mut ld = 0.0;
        let y = (0..self.dim)
            .map(|i| {
                let sd = v[i].sqrt();
                ld += s[i] - sd.ln();
                (u[i] - m[i]) / sd * s[i].exp() + b[i]
            })
            .collect();
        (y, ld)
    }

    /// Coupling forward; returns output, log-determinant, MLP cache and
    /// `tanh(raw/c)` for each transformed coordinate.
    fn coupling_forward(&self, l: usize, u: &[f64]) -> (Vec<f64>, f64, MlpCache, Vec<f64>) {
        let (ia, ib) = &self.split[l % 2];
        let ua: Vec<f64> = ia.iter().map(|&i| u[i]).collect();
        let cache = self.shapes[l % 2].forward(self.mlp_params(l), &ua);
        let out = cache.output();
        let nb = ib.len();
        let c = self.cfg.scale_bound;
        let th: Vec<f64> = out[..nb].iter().map(|r| (r / c).tanh()).collect();
        let mut y = u.to_vec();
        let mut ld = 0.0;
        for (k, &i) in ib.iter().enumerate() {
            let s = c * th[k];
            ld += s;
            y[i] = u[i] * s.exp() + out[nb + k];
        }
        (y, ld, cache, th)
    }

    fn forward_cached(&self, eps: &[f64]) -> (Vec<f64>, f64, Vec<LayerCache>) {
        let mut h = eps.to_vec();
        let mut ld = 0.0;
        let mut caches = Vec::with_capacity(self.cfg.n_layers);
        for l in 0..self.cfg.n_layers {
            let (y, l1) = self.norm_forward(l, &h);
            let (z, l2, mlp, th) = self.coupling_forward(l, &y);
            caches.push(LayerCache {
                norm_in: std::mem::replace(&mut h, z),
                coup_in: y,
                mlp,
                raw_tanh: th,
            });
            ld += l1 + l2;
        }
        (h, ld, caches)
    }
}

impl Variational for RealNvp {
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
        let mut h = eps.to_vec();
        let mut ld = 0.0;
        for l in 0..self.cfg.n_layers {
            let (y, l1) = self.norm_forward(l, &h);
            let (z, l2, _, _) = self.coupling_forward(l, &y);
            h = z;
            ld += l1 + l2;
        }
        (h, ld)
    }

    fn inverse(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        crate::error::check_dim(self.dim, x.len())?;
        let mut h = x.to_vec();
        let mut ld = 0.0;
        let c = self.cfg.scale_bound;
        for l in (0..self.cfg.n_layers).rev() {
            let (ia, ib) = &self.split[l % 2];
            let ya: Vec<f64> = ia.iter().map(|&i| h[i]).collect();
            let cache = self.shapes[l % 2].forward(self.mlp_params(l), &ya);
            let out = cache.output();
            let nb = ib.len();
            for (k, &i) in ib.iter().enumerate() {
                let s = c * (out[k] / c).tanh();
                ld += s;
                h[i] = (h[i] - out[nb + k]) * (-s).exp();
            }
            let (s, b) = self.norm_params(l);
            let (m, v) = (&self.run_mean[l], &self.run_var[l]);
            for i in 0..self.dim {
                if !(v[i] > 0.0 && v[i].is_finite()) {
                    return Err(Error::InvalidParameter(format!("normalization layer {l} has variance {}", v[i])));
                }
                let sd = v[i].sqrt();
                ld += s[i] - sd.ln();
                h[i] = (h[i] - b[i]) * (-s[i]).exp() * sd + m[i];
            }
        }
        if h.iter().any(|v| !v.is_finite()) || !ld.is_finite() {
            return Err(Error::NonFinite("flow inverse".into()));
        }
        Ok((h, ld))
    }

    fn transform_vjp(&self, eps: &[f64], gx: &[f64], c_ld: f64) -> (Vec<f64>, Vec<f64>) {
        let (_, _, caches) = self.forward_cached(eps);
        let mut gp = vec![0.0; self.params.len()];
        let mut g = gx.to_vec();
        let c = self.cfg.scale_bound;
        for l in (0..self.cfg.n_layers).rev() {
            let lc = &caches[l];
            let (ia, ib) = &self.split[l % 2];
            let nb = ib.len();
            // Coupling.
            let mut gout = vec![0.0; 2 * nb];
            for (k, &i) in ib.iter().enumerate() {
                let th = lc.raw_tanh[k];
                let es = (c * th).exp();
                let gy = g[i];
                let gs = gy * lc.coup_in[i] * es + c_ld;
                gout[k] = gs * (1.0 - th * th);
                gout[nb + k] = gy;
                g[i] = gy * es;
            }
            let o = self.offsets[l] + 2 * self.dim;
            let gin = self.shapes[l % 2].backward(
                self.mlp_params(l),
                &lc.mlp,
                &gout,
                Some(&mut gp[o..self.offsets[l + 1]]),
            );
            for (k, &i) in ia.iter().enumerate() {
                g[i] += gin[k];
            }
            // Normalization.
            let (s, b) = self.norm_params(l);
            let (m, v) = (&self.run_mean[l], &self.run_var[l]);
            let o = self.offsets[l];
            for i in 0..self.dim {
                let sd = v[i].sqrt();
                let k = s[i].exp() / sd;
                let y = (lc.norm_in[i] - m[i]) * k + b[i];
                gp[o + i] = g[i] * (y - b[i]) + c_ld;
                gp[o + self.dim + i] = g[i];
                g[i] *= k;
            }
        }
        (gp, g)
    }

    fn after_step(&mut self, eps: &[Vec<f64>]) {
        let mu = self.cfg.norm_momentum;
        if mu == 0.0 || eps.len() < 2 {
            return;
        }
        let n = eps.len() as f64;
        let mut hs: Vec<Vec<f64>> = eps.to_vec();
        for l in 0..self.cfg.n_layers {
            for i in 0..self.dim {
                let bm = hs.iter().map(|h| h[i]).sum::<f64>() / n;
                let bv = hs.iter().map(|h| (h[i] - bm).powi(2)).sum::<f64>() / (n - 1.0);
                let m0 = self.run_mean[l][i];
                let v0 = self.run_var[l][i];
                let m1 = (1.0 - mu) * m0 + mu * bm;
                let v1 = (1.0 - mu) * v0 + mu * bv;
                if !(v1 > 1e-12 && v1.is_finite() && m1.is_finite()) {
                    continue;
                }
                let o = self.offsets[l];
                let k = self.params[o + i].exp() / v0.sqrt();
                self.params[o + i] += 0.5 * (v1 / v0).ln();
                self.params[o + self.dim + i] += k * (m1 - m0);
                self.run_mean[l][i] = m1;
                self.run_var[l][i] = v1;
            }
            for h in hs.iter_mut() {
                let (y, _) = self.norm_forward(l, h);
                let (z, _, _, _) = self.coupling_forward(l, &y);
                *h = z;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::std_normal_logpdf;
    use crate::rng::{normal_vec, stream};
    use crate::variational::testutil::check_transform_vjp;
    use proptest::prelude::*;

    fn perturbed(dim: usize, layers: usize, seed: u64, amp: f64) -> RealNvp {
        let cfg = RealNvpConfig {
            n_layers: layers,
            min_width: 8,
            ..RealNvpConfig::default()
        };
        let mut rng = stream(seed, 0);
        let mut f = RealNvp::init(cfg, dim, &mut rng).unwrap();
        let noise = normal_vec(&mut rng, f.params.len());
        for (p, z) in f.params.iter_mut().zip(noise) {
            *p += amp * z;
        }
        f
    }

    #[test]
    fn identity_at_init() {
        let f = RealNvp::init(RealNvpConfig::default(), 6, &mut stream(1, 0)).unwrap();
        let mut rng = stream(1, 1);
        for _ in 0..10 {
            let e = normal_vec(&mut rng, 6);
            let (x, ld) = f.transform(&e);
            assert_eq!(x, e);
            assert_eq!(ld, 0.0);
            assert!((f.log_density(&x).unwrap() - std_normal_logpdf(&x)).abs() < 1e-3);
        }
    }

    #[test]
    fn default_layer_counts_and_width() {
        let f = RealNvp::init(RealNvpConfig::default(), 1024, &mut stream(0, 0)).unwrap();
        assert_eq!((f.n_layers(), f.width()), (32, 128));
        let cfg = RealNvpConfig {
            n_layers: 16,
            ..RealNvpConfig::default()
        };
        let f = RealNvp::init(cfg, 2, &mut stream(0, 0)).unwrap();
        assert_eq!((f.n_layers(), f.width()), (16, 32));
    }

    #[test]
    fn sample_log_density_self_consistent() {
        let f = perturbed(5, 6, 2, 0.1);
        let (xs, lq) = f.sample(&mut stream(2, 1), 20);
        for (x, l) in xs.iter().zip(&lq) {
            assert!((f.log_density(x).unwrap() - l).abs() < 1e-6);
        }
    }

    #[test]
    fn log_det_matches_dense_jacobian_2d() {
        let f = perturbed(2, 8, 3, 0.3);
        let mut rng = stream(3, 1);
        for _ in 0..10 {
            let e = normal_vec(&mut rng, 2);
            let (_, ld) = f.transform(&e);
            let h = 1e-6;
            let mut j = [[0.0; 2]; 2];
            for c in 0..2 {
                let mut a = e.clone();
                a[c] += h;
                let mut b = e.clone();
                b[c] -= h;
                let (xa, _) = f.transform(&a);
                let (xb, _) = f.transform(&b);
                for r in 0..2 {
                    j[r][c] = (xa[r] - xb[r]) / (2.0 * h);
                }
            }
            let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
            assert!((det.abs().ln() - ld).abs() < 1e-5, "{} vs {ld}", det.abs().ln());
        }
    }

    #[test]
    fn density_integrates_to_one_2d() {
        let f = perturbed(2, 4, 4, 0.15);
        let (n, lo, hi) = (400, -8.0, 8.0);
        let h = (hi - lo) / n as f64;
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                let x = [lo + (i as f64 + 0.5) * h, lo + (j as f64 + 0.5) * h];
                s += f.log_density(&x).unwrap().exp() * h * h;
            }
        }
        assert!((s - 1.0).abs() < 1e-3, "{s}");
    }

    #[test]
    fn vjp_matches_finite_differences() {
        for (dim, seed) in [(1, 5), (2, 6), (5, 7)] {
            let mut f = perturbed(dim, 4, seed, 0.2);
            let mut rng = stream(seed, 1);
            let e = normal_vec(&mut rng, dim);
            let gx = normal_vec(&mut rng, dim);
            check_transform_vjp(&mut f, &e, &gx, -1.0, 1e-5);
        }
    }

    #[test]
    fn running_statistics_preserve_the_transform() {
        let mut f = perturbed(4, 4, 8, 0.2);
        let mut rng = stream(8, 1);
        let batch: Vec<Vec<f64>> = (0..64).map(|_| normal_vec(&mut rng, 4)).collect();
        let probe = normal_vec(&mut rng, 4);
        let (x0, l0) = f.transform(&probe);
        for _ in 0..10 {
            f.after_step(&batch);
        }
        let (x1, l1) = f.transform(&probe);
        for (a, b) in x0.iter().zip(&x1) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!((l0 - l1).abs() < 1e-9);
        assert!(f.run_var.iter().flatten().any(|v| (v - 1.0).abs() > 1e-3));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn inverse_roundtrip(seed in 0u64..1000, dim in 1usize..7, amp in 0.0f64..0.5) {
            let f = perturbed(dim, 6, seed, amp);
            let e = normal_vec(&mut stream(seed, 9), dim);
            let (x, ld) = f.transform(&e);
            let (back, ld2) = f.inverse(&x).unwrap();
            for (a, b) in e.iter().zip(&back) {
                prop_assert!((a - b).abs() < 1e-5);
            }
            prop_assert!((ld - ld2).abs() < 1e-6);
        }
    }
}
