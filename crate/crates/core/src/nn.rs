//! Dense multilayer perceptron over a flat parameter slice with hand-written
//! reverse-mode differentiation.
//!
//! Parameters are laid out layer by layer as a row-major `out × in` weight
//! block followed by the `out` biases. Hidden layers apply the activation;
//! the output layer is affine.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Silu,
    Softplus,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Silu => z / (1.0 + (-z).exp()),
            Activation::Softplus => {
                if z > 30.0 {
                    z
                } else {
                    z.exp().ln_1p()
                }
            }
        }
    }

    /// Derivative given the pre-activation `z` and the activation value `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 + z * (1.0 - s))
            }
            Activation::Softplus => 1.0 / (1.0 + (-z).exp()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpShape {
    /// Layer widths including input and output, e.g. `[in, h1, h2, out]`.
    pub widths: Vec<usize>,
    pub activation: Activation,
}

/// Intermediate values kept by a forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct MlpCache {
    /// `acts[0]` is the input; `acts[l]` the output of layer `l`.
    acts: Vec<Vec<f64>>,
    /// Pre-activations of hidden layers.
    pre: Vec<Vec<f64>>,
}

impl MlpCache {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("nonempty")
    }
}

impl MlpShape {
    pub fn new(widths: Vec<usize>, activation: Activation) -> Self {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        Self { widths, activation }
    }

    pub fn n_in(&self) -> usize {
        self.widths[0]
    }

    pub fn n_out(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn n_params(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    fn offsets(&self, layer: usize) -> (usize, usize, usize, usize) {
        let mut off = 0;
        for w in self.widths.windows(2).take(layer) {
            off += w[0] * w[1] + w[1];
        }
        let (n_in, n_out) = (self.widths[layer], self.widths[layer + 1]);
        (off, off + n_in * n_out, n_in, n_out)
    }

    /// Glorot-uniform weights, zero biases. The output layer is scaled by
    /// `out_scale` (zero gives an identically-zero network output).
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R, out_scale: f64) -> Vec<f64> {
        let mut p = vec![0.0; self.n_params()];
        for l in 0..self.n_layers() {
            let (w0, b0, n_in, n_out) = self.offsets(l);
            let lim = (6.0 / (n_in + n_out) as f64).sqrt();
            let scale = if l + 1 == self.n_layers() { out_scale } else { 1.0 };
            if scale == 0.0 {
                continue;
            }
            let u = Uniform::new_inclusive(-lim, lim).expect("valid bounds");
            for v in &mut p[w0..b0] {
                *v = scale * u.sample(rng);
            }
        }
        p
    }

    pub fn forward(&self, params: &[f64], input: &[f64]) -> MlpCache {
        debug_assert_eq!(params.len(), self.n_params());
        debug_assert_eq!(input.len(), self.n_in());
        let nl = self.n_layers();
        let mut acts = Vec::with_capacity(nl + 1);
        let mut pre = Vec::with_capacity(nl.saturating_sub(1));
        acts.push(input.to_vec());
        for l in 0..nl {
            let (w0, b0, n_in, n_out) = self.offsets(l);
            let w = &params[w0..b0];
            let b = &params[b0..b0 + n_out];
            let x = &acts[l];
            let mut z = b.to_vec();
            for (o, zo) in z.iter_mut().enumerate() {
                let row = &w[o * n_in..(o + 1) * n_in];
                *zo += row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>();
            }
            if l + 1 < nl {
                let a = z.iter().map(|&v| self.activation.apply(v)).collect();
                pre.push(z);
                acts.push(a);
            } else {
                acts.push(z);
            }
        }
        MlpCache { acts, pre }
    }

    /// Backpropagate `grad_out` through the network. Parameter gradients are
    /// accumulated into `grad_params` when given; returns the input gradient.
    pub fn backward(
        &self,
        params: &[f64],
        cache: &MlpCache,
        grad_out: &[f64],
        mut grad_params: Option<&mut [f64]>,
    ) -> Vec<f64> {
        let nl = self.n_layers();
        let mut g = grad_out.to_vec();
        for l in (0..nl).rev() {
            let (w0, b0, n_in, n_out) = self.offsets(l);
            if l + 1 < nl {
                let z = &cache.pre[l];
                let a = &cache.acts[l + 1];
                for o in 0..n_out {
                    g[o] *= self.activation.derivative(z[o], a[o]);
                }
            }
            let x = &cache.acts[l];
            if let Some(gp) = grad_params.as_deref_mut() {
                for o in 0..n_out {
                    let go = g[o];
                    if go != 0.0 {
                        let row = &mut gp[w0 + o * n_in..w0 + (o + 1) * n_in];
                        for (r, xi) in row.iter_mut().zip(x) {
                            *r += go * xi;
                        }
                    }
                    gp[b0 + o] += go;
                }
            }
            let w = &params[w0..b0];
            let mut gin = vec![0.0; n_in];
            for o in 0..n_out {
                let go = g[o];
                if go == 0.0 {
                    continue;
                }
                let row = &w[o * n_in..(o + 1) * n_in];
                for (gi, wi) in gin.iter_mut().zip(row) {
                    *gi += go * wi;
                }
            }
            g = gin;
        }
        g
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn fd_check(act: Activation) {
        let shape = MlpShape::new(vec![3, 5, 4, 2], act);
        let mut g = rng::stream(1, 0);
        let p = shape.init(&mut g, 1.0);
        let x = [0.3, -0.7, 1.1];
        let c = [0.4, -1.3];
        let f = |p: &[f64], x: &[f64]| {
            let o = shape.forward(p, x);
            o.output().iter().zip(&c).map(|(a, b)| a * b).sum::<f64>()
        };
        let cache = shape.forward(&p, &x);
        let mut gp = vec![0.0; p.len()];
        let gx = shape.backward(&p, &cache, &c, Some(&mut gp));
        let h = 1e-6;
        for i in 0..3 {
            let mut xp = x;
            let mut xm = x;
            xp[i] += h;
            xm[i] -= h;
            let fd = (f(&p, &xp) - f(&p, &xm)) / (2.0 * h);
            assert!((fd - gx[i]).abs() < 1e-7 * (1.0 + fd.abs()), "{act:?} x{i}");
        }
        for i in 0..p.len() {
            let mut pp = p.clone();
            let mut pm = p.clone();
            pp[i] += h;
            pm[i] -= h;
            let fd = (f(&pp, &x) - f(&pm, &x)) / (2.0 * h);
            assert!((fd - gp[i]).abs() < 1e-7 * (1.0 + fd.abs()), "{act:?} p{i}");
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        fd_check(Activation::Tanh);
        fd_check(Activation::Silu);
        fd_check(Activation::Softplus);
    }

    #[test]
    fn zero_output_layer_gives_zero() {
        let shape = MlpShape::new(vec![2, 8, 3], Activation::Silu);
        let p = shape.init(&mut rng::stream(2, 0), 0.0);
        assert!(shape.forward(&p, &[1.0, -2.0]).output().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn param_count() {
        let shape = MlpShape::new(vec![4, 6, 2], Activation::Tanh);
        assert_eq!(shape.n_params(), 4 * 6 + 6 + 6 * 2 + 2);
    }
}
