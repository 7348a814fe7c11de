use std::f64::consts::PI;
use std::fmt;
use std::sync::{Arc, OnceLock};

use rand::Rng;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::Forward;
use crate::error::{check_dim, Error, Result};

/// Signed frequency of DFT index `k` on an axis of length `n`.
fn centered(k: usize, n: usize) -> i64 {
    if k <= n / 2 {
        k as i64
    } else {
        k as i64 - n as i64
    }
}

/// The lowest `M = round(fraction·D)` DFT coefficients of an `H×W` image,
/// ordered by radius in centered frequency coordinates with ties broken by
/// raster index.
#[derive(Clone, Serialize, Deserialize)]
pub struct LowFreqOp {
    pub height: usize,
    pub width: usize,
    pub fraction: f64,
    #[serde(skip)]
    table: OnceLock<LowFreqTable>,
}

#[derive(Clone)]
struct LowFreqTable {
    indices: Vec<usize>,
    re: Vec<f64>,
    im: Vec<f64>,
}

impl fmt::Debug for LowFreqOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LowFreqOp")
            .field("height", &self.height)
            .field("width", &self.width)
            .field("fraction", &self.fraction)
            .finish()
    }
}

impl LowFreqOp {
    pub fn new(height: usize, width: usize, fraction: f64) -> Result<Self> {
        let op = Self {
            height,
            width,
            fraction,
            table: OnceLock::new(),
        };
        op.validate()?;
        Ok(op)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "low-frequency fraction {} outside (0, 1]",
                self.fraction
            )));
        }
        if self.height == 0 || self.width == 0 || self.n_coeffs() == 0 {
            return Err(Error::InvalidParameter("low-frequency operator keeps no coefficients".into()));
        }
        Ok(())
    }

    pub fn n_coeffs(&self) -> usize {
        (self.fraction * (self.height * self.width) as f64).round() as usize
    }

    /// Raster indices `k1·W + k2` of the kept coefficients, in output order.
    pub fn indices(&self) -> &[usize] {
        &self.table().indices
    }

    fn table(&self) -> &LowFreqTable {
        self.table.get_or_init(|| {
            let (h, w) = (self.height, self.width);
            let mut order: Vec<usize> = (0..h * w).collect();
            let r2 = |k: usize| {
                let a = centered(k / w, h);
                let b = centered(k % w, w);
                a * a + b * b
            };
            order.sort_by_key(|&k| (r2(k), k));
            order.truncate(self.n_coeffs());
            let d = h * w;
            let mut re = Vec::with_capacity(order.len() * d);
            let mut im = Vec::with_capacity(order.len() * d);
            for &k in &order {
                let (k1, k2) = ((k / w) as f64, (k % w) as f64);
                for n1 in 0..h {
                    for n2 in 0..w {
                        let th = 2.0 * PI * (k1 * n1 as f64 / h as f64 + k2 * n2 as f64 / w as f64);
                        re.push(th.cos());
                        im.push(-th.sin());
                    }
                }
            }
            LowFreqTable {
                indices: order,
                re,
                im,
            }
        })
    }
}

impl Forward for LowFreqOp {
    fn input_dim(&self) -> usize {
        self.height * self.width
    }

    fn output_len(&self) -> usize {
        2 * self.n_coeffs()
    }

    fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let d = self.input_dim();
        check_dim(d, x.len())?;
        let t = self.table();
        let mut out = Vec::with_capacity(self.output_len());
        for m in 0..t.indices.len() {
            out.push(crate::linalg::dot(&t.re[m * d..(m + 1) * d], x));
            out.push(crate::linalg::dot(&t.im[m * d..(m + 1) * d], x));
        }
        Ok(out)
    }

    fn vjp(&self, x: &[f64], cot: &[f64]) -> Result<Vec<f64>> {
        let d = self.input_dim();
        check_dim(d, x.len())?;
        check_dim(self.output_len(), cot.len())?;
        let t = self.table();
        let mut g = vec![0.0; d];
        for m in 0..t.indices.len() {
            crate::linalg::axpy(cot[2 * m], &t.re[m * d..(m + 1) * d], &mut g);
            crate::linalg::axpy(cot[2 * m + 1], &t.im[m * d..(m + 1) * d], &mut g);
        }
        Ok(g)
    }
}

#[derive(Clone)]
struct Plans {
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

/// Unnormalized 2D FFT in place on a row-major `h×w` buffer.
fn fft2(buf: &mut [Complex64], h: usize, w: usize, row: &dyn Fft<f64>, col: &dyn Fft<f64>) {
    for r in buf.chunks_mut(w) {
        row.process(r);
    }
    let mut column = vec![Complex64::new(0.0, 0.0); h];
    for j in 0..w {
        for i in 0..h {
            column[i] = buf[i * w + j];
        }
        col.process(&mut column);
        for i in 0..h {
            buf[i * w + j] = column[i];
        }
    }
}

/// Single-coil Cartesian MRI: the 2D DFT sampled on a binary mask. The output
/// lists sampled coefficients in raster order.
#[derive(Clone, Serialize, Deserialize)]
pub struct MriOp {
    pub height: usize,
    pub width: usize,
    pub mask: Vec<bool>,
    #[serde(skip)]
    plans: OnceLock<Plans>,
}

impl fmt::Debug for MriOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MriOp")
            .field("height", &self.height)
            .field("width", &self.width)
            .field("sampled", &self.n_sampled())
            .finish()
    }
}

impl MriOp {
    pub fn new(height: usize, width: usize, mask: Vec<bool>) -> Result<Self> {
        check_dim(height * width, mask.len())?;
        Ok(Self {
            height,
            width,
            mask,
            plans: OnceLock::new(),
        })
    }

    pub fn n_sampled(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    fn plans(&self) -> &Plans {
        self.plans.get_or_init(|| {
            let mut p = FftPlanner::new();
            Plans {
                row_fwd: p.plan_fft_forward(self.width),
                row_inv: p.plan_fft_inverse(self.width),
                col_fwd: p.plan_fft_forward(self.height),
                col_inv: p.plan_fft_inverse(self.height),
            }
        })
    }

    /// Full unnormalized 2D DFT of a real image, interleaved.
    pub fn full_dft(&self, x: &[f64]) -> Result<Vec<Complex64>> {
        check_dim(self.height * self.width, x.len())?;
        let p = self.plans();
        let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        fft2(&mut buf, self.height, self.width, &*p.row_fwd, &*p.col_fwd);
        Ok(buf)
    }

    fn zero_fill(&self, v: &[f64]) -> Vec<Complex64> {
        let mut buf = vec![Complex64::new(0.0, 0.0); self.height * self.width];
        let mut k = 0;
        for (i, m) in self.mask.iter().enumerate() {
            if *m {
                buf[i] = Complex64::new(v[2 * k], v[2 * k + 1]);
                k += 1;
            }
        }
        buf
    }

    fn inverse_unnormalized(&self, mut buf: Vec<Complex64>) -> Vec<Complex64> {
        let p = self.plans();
        fft2(&mut buf, self.height, self.width, &*p.row_inv, &*p.col_inv);
        buf
    }

    /// Zero-filled inverse FFT reconstruction (real part).
    pub fn zero_filled(&self, y: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.output_len(), y.len())?;
        let d = (self.height * self.width) as f64;
        Ok(self
            .inverse_unnormalized(self.zero_fill(y))
            .iter()
            .map(|c| c.re / d)
            .collect())
    }
}

impl Forward for MriOp {
    fn input_dim(&self) -> usize {
        self.height * self.width
    }

    fn output_len(&self) -> usize {
        2 * self.n_sampled()
    }

    fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let full = self.full_dft(x)?;
        let mut out = Vec::with_capacity(self.output_len());
        for (c, m) in full.iter().zip(&self.mask) {
            if *m {
                out.push(c.re);
                out.push(c.im);
            }
        }
        Ok(out)
    }

    fn vjp(&self, x: &[f64], cot: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.input_dim(), x.len())?;
        check_dim(self.output_len(), cot.len())?;
        // Σ_k Re(conj(c_k) e^{-iθ}) = Re(Σ_k c_k e^{+iθ}).
        Ok(self
            .inverse_unnormalized(self.zero_fill(cot))
            .iter()
            .map(|c| c.re)
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoissonDiscMask {
    pub height: usize,
    pub width: usize,
    pub mask: Vec<bool>,
    /// Minimum separation, in centered frequency units, of sampled points.
    pub radius: f64,
}

impl PoissonDiscMask {
    pub fn fraction(&self) -> f64 {
        self.mask.iter().filter(|m| **m).count() as f64 / self.mask.len() as f64
    }

    /// Centered frequency coordinates of the sampled points.
    pub fn points(&self) -> Vec<(f64, f64)> {
        (0..self.mask.len())
            .filter(|&k| self.mask[k])
            .map(|k| {
                (
                    centered(k / self.width, self.height) as f64,
                    centered(k % self.width, self.width) as f64,
                )
            })
            .collect()
    }
}

/// Dart throwing with Bridson's active list on the integer frequency grid,
/// seeded at DC.
fn bridson(h: usize, w: usize, r: f64, seed: u64) -> Vec<bool> {
    let mut rng = crate::rng::stream(seed, 0);
    let lo1 = -(((h - 1) / 2) as i64);
    let hi1 = (h / 2) as i64;
    let lo2 = -(((w - 1) / 2) as i64);
    let hi2 = (w / 2) as i64;
    let to_raster = |a: i64, b: i64| -> usize {
        let k1 = if a < 0 { a + h as i64 } else { a } as usize;
        let k2 = if b < 0 { b + w as i64 } else { b } as usize;
        k1 * w + k2
    };
    let mut occ = vec![false; h * w];
    occ[0] = true;
    let mut active: Vec<(i64, i64)> = vec![(0, 0)];
    let reach = r.ceil() as i64;
    while !active.is_empty() {
        let idx = rng.random_range(0..active.len());
        let (pa, pb) = active[idx];
        let mut placed = false;
        for _ in 0..30 {
            let th = rng.random::<f64>() * 2.0 * PI;
            let rad = r * (1.0 + rng.random::<f64>());
            let a = (pa as f64 + rad * th.cos()).round() as i64;
            let b = (pb as f64 + rad * th.sin()).round() as i64;
            if a < lo1 || a > hi1 || b < lo2 || b > hi2 || occ[to_raster(a, b)] {
                continue;
            }
            let mut ok = true;
            'scan: for da in -reach..=reach {
                for db in -reach..=reach {
                    let (qa, qb) = (a + da, b + db);
                    if qa < lo1 || qa > hi1 || qb < lo2 || qb > hi2 {
                        continue;
                    }
                    if occ[to_raster(qa, qb)] && ((da * da + db * db) as f64) < r * r {
                        ok = false;
                        break 'scan;
                    }
                }
            }
            if ok {
                occ[to_raster(a, b)] = true;
                active.push((a, b));
                placed = true;
                break;
            }
        }
        if !placed {
            active.swap_remove(idx);
        }
    }
    occ
}

/// Poisson-disc k-space mask with sampling fraction within ±10% of
/// `1/accel`; the disc radius is calibrated by bisection.
pub fn poisson_disc_mask<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    accel: f64,
    rng: &mut R,
) -> Result<PoissonDiscMask> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidParameter("empty mask shape".into()));
    }
    if !(accel >= 1.0) {
        return Err(Error::InvalidParameter(format!("acceleration {accel} < 1")));
    }
    let d = height * width;
    if accel == 1.0 {
        return Ok(PoissonDiscMask {
            height,
            width,
            mask: vec![true; d],
            radius: 1.0,
        });
    }
    let target = d as f64 / accel;
    let within = |n: usize| (n as f64 - target).abs() <= 0.1 * target;
    for _attempt in 0..16 {
        let seed: u64 = rng.random();
        let mut lo = 1.0;
        let mut hi = (height.max(width)) as f64;
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            let mask = bridson(height, width, mid, seed);
            let n = mask.iter().filter(|m| **m).count();
            if within(n) {
                return Ok(PoissonDiscMask {
                    height,
                    width,
                    mask,
                    radius: mid,
                });
            }
            if (n as f64) > target {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo < 1e-9 {
                break;
            }
        }
    }
    Err(Error::Calibration(format!(
        "no Poisson-disc radius reaches {target:.1} samples on {height}x{width}"
    )))
}
