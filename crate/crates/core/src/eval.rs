//! Metrics and ground-truth oracles.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::forward::DenseOp;
use crate::linalg::{gaussian_logpdf_chol, log_sum_exp, mean_and_se, to_dmatrix};
use crate::score::{GaussianPriorSpec, GmmPriorSpec};

/// Two-component Gaussian mixture fitted by EM.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Gmm2Fit {
    pub weights: [f64; 2],
    pub means: [Vec<f64>; 2],
    pub covariances: [Vec<Vec<f64>>; 2],
    /// Total log-likelihood after each EM iteration of the selected restart.
    pub loglik_trace: Vec<f64>,
    #[serde(skip)]
    chol: Option<[nalgebra::Cholesky<f64, nalgebra::Dyn>; 2]>,
}

impl Gmm2Fit {
    fn build(weights: [f64; 2], means: [Vec<f64>; 2], covs: [DMatrix<f64>; 2], trace: Vec<f64>) -> Option<Self> {
        let c0 = covs[0].clone().cholesky()?;
        let c1 = covs[1].clone().cholesky()?;
        let rows = |m: &DMatrix<f64>| (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect();
        Some(Self {
            weights,
            covariances: [rows(&covs[0]), rows(&covs[1])],
            means,
            loglik_trace: trace,
            chol: Some([c0, c1]),
        })
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let ch = self.chol.as_ref().expect("fit carries its factors");
        let a = self.weights[0].ln() + gaussian_logpdf_chol(x, &self.means[0], &ch[0]);
        let b = self.weights[1].ln() + gaussian_logpdf_chol(x, &self.means[1], &ch[1]);
        log_sum_exp(&[a, b])
    }

    pub fn to_spec(&self) -> GmmPriorSpec {
        GmmPriorSpec {
            weights: self.weights.to_vec(),
            means: self.means.to_vec(),
            covariances: self.covariances.to_vec(),
        }
    }
}

const EM_RESTARTS: usize = 10;
const EM_MAX_ITERS: usize = 500;
const EM_TOL: f64 = 1e-8;

/// Fit a two-component mixture by EM: k-means-style starts, iterate until
/// the total log-likelihood improves by less than `1e-8` or 500 iterations,
/// best of 10 restarts. Restarts that hit a singular covariance are dropped.
pub fn fit_gmm2<R: Rng + ?Sized>(samples: &[Vec<f64>], rng: &mut R) -> Result<Gmm2Fit> {
    let n = samples.len();
    if n < 100 {
        return Err(Error::InvalidParameter(format!("GMM fit needs at least 100 samples, got {n}")));
    }
    let d = samples[0].len();
    for s in samples {
        check_dim(d, s.len())?;
    }
    let xs: Vec<f64> = samples.concat();
    let mut best: Option<Gmm2Fit> = None;
    for _ in 0..EM_RESTARTS {
        let Some(init) = kmeans_init(&xs, d, rng) else { continue };
        if let Some(fit) = em(&xs, d, init) {
            let ll = *fit.loglik_trace.last().unwrap_or(&f64::NEG_INFINITY);
            if best.as_ref().is_none_or(|b| ll > *b.loglik_trace.last().unwrap_or(&f64::NEG_INFINITY)) {
                best = Some(fit);
            }
        }
    }
    best.ok_or_else(|| Error::DegenerateFit("every EM restart produced a singular covariance".into()))
}

/// Weights, means and row-major covariances of the two components.
type MixState = ([f64; 2], [Vec<f64>; 2], [Vec<f64>; 2]);

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Weighted mean and covariance of the rows of `xs` (`d` columns).
fn weighted_moments(xs: &[f64], d: usize, w: impl Fn(usize) -> f64) -> (f64, Vec<f64>, Vec<f64>) {
    let n = xs.len() / d;
    let mut tot = 0.0;
    let mut m = vec![0.0; d];
    for i in 0..n {
        let wi = w(i);
        if wi == 0.0 {
            continue;
        }
        tot += wi;
        for (mj, xj) in m.iter_mut().zip(&xs[i * d..(i + 1) * d]) {
            *mj += wi * xj;
        }
    }
    if tot <= 0.0 {
        return (0.0, m, vec![0.0; d * d]);
    }
    m.iter_mut().for_each(|v| *v /= tot);
    let mut c = vec![0.0; d * d];
    let mut v = vec![0.0; d];
    for i in 0..n {
        let wi = w(i);
        if wi == 0.0 {
            continue;
        }
        for j in 0..d {
            v[j] = xs[i * d + j] - m[j];
        }
        for a in 0..d {
            for b in 0..=a {
                c[a * d + b] += wi * v[a] * v[b];
            }
        }
    }
    for a in 0..d {
        for b in 0..=a {
            c[a * d + b] /= tot;
            c[b * d + a] = c[a * d + b];
        }
    }
    (tot, m, c)
}

fn kmeans_init<R: Rng + ?Sized>(xs: &[f64], d: usize, rng: &mut R) -> Option<MixState> {
    let n = xs.len() / d;
    let row = |i: usize| &xs[i * d..(i + 1) * d];
    let c0 = row(rng.random_range(0..n)).to_vec();
    let d2: Vec<f64> = (0..n).map(|i| sq_dist(row(i), &c0)).collect();
    let total: f64 = d2.iter().sum();
    if total == 0.0 {
        return None;
    }
    let mut u = rng.random::<f64>() * total;
    let mut j = n - 1;
    for (i, v) in d2.iter().enumerate() {
        if u < *v {
            j = i;
            break;
        }
        u -= v;
    }
    let mut cs = [c0, row(j).to_vec()];
    let mut assign = vec![0usize; n];
    for _ in 0..10 {
        for (i, a) in assign.iter_mut().enumerate() {
            *a = usize::from(sq_dist(row(i), &cs[1]) < sq_dist(row(i), &cs[0]));
        }
        for (k, c) in cs.iter_mut().enumerate() {
            let (cnt, m, _) = weighted_moments(xs, d, |i| f64::from(u8::from(assign[i] == k)));
            if cnt == 0.0 {
                return None;
            }
            *c = m;
        }
    }
    let (_, _, global) = weighted_moments(xs, d, |_| 1.0);
    let mut w = [0.0; 2];
    let mut covs = [global.clone(), global];
    for k in 0..2 {
        let (cnt, _, c) = weighted_moments(xs, d, |i| f64::from(u8::from(assign[i] == k)));
        w[k] = cnt / n as f64;
        if cnt > (d + 1) as f64 && DMatrix::from_row_slice(d, d, &c).cholesky().is_some() {
            covs[k] = c;
        }
    }
    Some((w, cs, covs))
}

/// Inverse and log-determinant of a row-major SPD matrix.
fn inv_logdet(c: &[f64], d: usize) -> Option<(Vec<f64>, f64)> {
    let ch = DMatrix::from_row_slice(d, d, c).cholesky()?;
    let logdet = 2.0 * ch.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let inv = ch.inverse();
    let flat = (0..d * d).map(|k| inv[(k / d, k % d)]).collect();
    logdet.is_finite().then_some((flat, logdet))
}

fn em(xs: &[f64], d: usize, init: MixState) -> Option<Gmm2Fit> {
    let n = xs.len() / d;
    let (mut w, mut mu, mut cov) = init;
    let mut trace = Vec::new();
    let mut resp = vec![0.0f64; n];
    let mut prev = f64::NEG_INFINITY;
    let cst = -0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln();
    let mut v = vec![0.0; d];
    for _ in 0..EM_MAX_ITERS {
        let (p0, l0) = inv_logdet(&cov[0], d)?;
        let (p1, l1) = inv_logdet(&cov[1], d)?;
        let comps = [(p0, w[0].ln() + cst - 0.5 * l0), (p1, w[1].ln() + cst - 0.5 * l1)];
        let mut ll = 0.0;
        for (i, r) in resp.iter_mut().enumerate() {
            let x = &xs[i * d..(i + 1) * d];
            let mut lp = [0.0; 2];
            for (k, (prec, c)) in comps.iter().enumerate() {
                for j in 0..d {
                    v[j] = x[j] - mu[k][j];
                }
                let mut q = 0.0;
                for a in 0..d {
                    let row = &prec[a * d..(a + 1) * d];
                    q += v[a] * row.iter().zip(&v).map(|(p, vb)| p * vb).sum::<f64>();
                }
                lp[k] = c - 0.5 * q;
            }
            let m = lp[0].max(lp[1]);
            let l = m + ((lp[0] - m).exp() + (lp[1] - m).exp()).ln();
            ll += l;
            *r = (lp[0] - l).exp();
        }
        if !ll.is_finite() {
            return None;
        }
        trace.push(ll);
        if ll - prev < EM_TOL {
            break;
        }
        prev = ll;
        for k in 0..2 {
            let (nk, m, c) = if k == 0 {
                weighted_moments(xs, d, |i| resp[i])
            } else {
                weighted_moments(xs, d, |i| 1.0 - resp[i])
            };
            if nk < 1e-8 * n as f64 {
                return None;
            }
            w[k] = nk / n as f64;
            mu[k] = m;
            cov[k] = c;
        }
    }
    let covs = [DMatrix::from_row_slice(d, d, &cov[0]), DMatrix::from_row_slice(d, d, &cov[1])];
    let [m0, m1] = mu;
    Gmm2Fit::build(w, [m0, m1], covs, trace)
}

/// Monte-Carlo reverse KL `(1/N) Σ [log q̂(x) - log p*(x)]` over samples
/// from q, with its standard error.
pub fn reverse_kl(
    samples: &[Vec<f64>],
    log_q: impl Fn(&[f64]) -> f64,
    log_p: impl Fn(&[f64]) -> f64,
) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::InvalidParameter("reverse KL needs samples".into()));
    }
    let mut terms = Vec::with_capacity(samples.len());
    for x in samples {
        let (a, b) = (log_q(x), log_p(x));
        if !(a.is_finite() && b.is_finite()) {
            return Err(Error::NonFinite(format!("density at {x:?}: log q {a}, log p {b}")));
        }
        terms.push(a - b);
    }
    Ok(mean_and_se(&terms))
}

/// Reverse KL of a fitted two-component mixture against `log_p`, the
/// protocol used for the low-dimensional studies.
pub fn gmm_fit_kl<R: Rng + ?Sized>(
    samples: &[Vec<f64>],
    log_p: impl Fn(&[f64]) -> f64,
    rng: &mut R,
) -> Result<(f64, f64)> {
    let fit = fit_gmm2(samples, rng)?;
    reverse_kl(samples, |x| fit.log_density(x), log_p)
}

fn sigma_vec(sigma: &[f64], m: usize) -> Result<Vec<f64>> {
    let s = if sigma.len() == 1 { vec![sigma[0]; m] } else { sigma.to_vec() };
    check_dim(m, s.len())?;
    if s.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::InvalidParameter("noise sigma must be positive".into()));
    }
    Ok(s)
}

/// Conjugate posterior of `x ~ N(μ, Σ)` given `y = A x + n`,
/// `n ~ N(0, diag(σ²))`. A single `sigma` entry applies to every row.
pub fn gaussian_posterior(prior: &GaussianPriorSpec, a: &DenseOp, y: &[f64], sigma: &[f64]) -> Result<GaussianPriorSpec> {
    let d = prior.dim();
    check_dim(d, a.cols)?;
    check_dim(a.rows, y.len())?;
    let s = sigma_vec(sigma, a.rows)?;
    let am = DMatrix::from_row_slice(a.rows, a.cols, &a.matrix);
    let cov0 = to_dmatrix(&prior.covariance);
    let prec0 = cov0
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("prior covariance".into()))?
        .inverse();
    let winv = DMatrix::from_diagonal(&DVector::from_iterator(a.rows, s.iter().map(|v| 1.0 / (v * v))));
    let prec = &prec0 + am.transpose() * &winv * &am;
    let chol = prec
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("posterior precision".into()))?;
    let rhs = &prec0 * DVector::from_column_slice(&prior.mean) + am.transpose() * &winv * DVector::from_column_slice(y);
    let mean = chol.solve(&rhs);
    let cov = chol.inverse();
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok(GaussianPriorSpec {
        mean: mean.as_slice().to_vec(),
        covariance: (0..d).map(|i| cov.row(i).iter().copied().collect()).collect(),
    })
}

/// Per-component conjugate update, reweighting components by their marginal
/// evidence `N(y; Aμ_k, AΣ_kAᵀ + diag(σ²))`.
pub fn gmm_posterior(prior: &GmmPriorSpec, a: &DenseOp, y: &[f64], sigma: &[f64]) -> Result<GmmPriorSpec> {
    prior.validate()?;
    let s = sigma_vec(sigma, a.rows)?;
    let am = DMatrix::from_row_slice(a.rows, a.cols, &a.matrix);
    let noise = DMatrix::from_diagonal(&DVector::from_iterator(a.rows, s.iter().map(|v| v * v)));
    let mut logw = Vec::with_capacity(prior.n_components());
    let mut means = Vec::new();
    let mut covs = Vec::new();
    for k in 0..prior.n_components() {
        let comp = GaussianPriorSpec {
            mean: prior.means[k].clone(),
            covariance: prior.covariances[k].clone(),
        };
        let post = gaussian_posterior(&comp, a, y, &s)?;
        let c = to_dmatrix(&comp.covariance);
        let m_cov = &am * c * am.transpose() + &noise;
        let ch = m_cov
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite("marginal covariance".into()))?;
        let pred = a.apply(&comp.mean);
        logw.push(prior.weights[k].ln() + gaussian_logpdf_chol(y, &pred, &ch));
        means.push(post.mean);
        covs.push(post.covariance);
    }
    let z = log_sum_exp(&logw);
    let mut weights: Vec<f64> = logw.iter().map(|l| (l - z).exp()).collect();
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    Ok(GmmPriorSpec {
        weights,
        means,
        covariances: covs,
    })
}

/// Log-density of a Gaussian mixture at time zero.
pub fn gmm_log_density(spec: &GmmPriorSpec, x: &[f64]) -> Result<f64> {
    let mut terms = Vec::with_capacity(spec.n_components());
    for k in 0..spec.n_components() {
        let ch = to_dmatrix(&spec.covariances[k])
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite("mixture covariance".into()))?;
        terms.push(spec.weights[k].ln() + gaussian_logpdf_chol(x, &spec.means[k], &ch));
    }
    Ok(log_sum_exp(&terms))
}

/// Closed-form `KL(N(m_q, S_q) ‖ N(m_p, S_p))`.
pub fn gaussian_kl(q: &GaussianPriorSpec, p: &GaussianPriorSpec) -> Result<f64> {
    let d = q.dim();
    check_dim(d, p.dim())?;
    let sq = to_dmatrix(&q.covariance);
    let sp = to_dmatrix(&p.covariance);
    let cq = sq.clone().cholesky().ok_or_else(|| Error::NotPositiveDefinite("q covariance".into()))?;
    let cp = sp.cholesky().ok_or_else(|| Error::NotPositiveDefinite("p covariance".into()))?;
    let tr = cp.solve(&sq).trace();
    let dm = DVector::from_iterator(d, p.mean.iter().zip(&q.mean).map(|(a, b)| a - b));
    let maha = dm.dot(&cp.solve(&dm));
    let logdet = |c: &nalgebra::Cholesky<f64, nalgebra::Dyn>| 2.0 * c.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    Ok(0.5 * (tr + maha - d as f64 + logdet(&cp) - logdet(&cq)))
}

/// Closed-form KL of a diagonal Gaussian `q = N(mean, diag(std²))` against
/// a full Gaussian `p`.
pub fn diag_gaussian_kl(mean: &[f64], std: &[f64], p: &GaussianPriorSpec) -> Result<f64> {
    check_dim(mean.len(), std.len())?;
    let d = mean.len();
    let mut cov = vec![vec![0.0; d]; d];
    for i in 0..d {
        cov[i][i] = std[i] * std[i];
    }
    gaussian_kl(
        &GaussianPriorSpec {
            mean: mean.to_vec(),
            covariance: cov,
        },
        p,
    )
}

/// Cap reported for exact reconstructions.
pub const PSNR_CAP: f64 = 100.0;

pub fn psnr(truth: &[f64], est: &[f64], data_range: f64) -> Result<f64> {
    check_dim(truth.len(), est.len())?;
    if truth.is_empty() || !(data_range > 0.0) {
        return Err(Error::InvalidParameter("PSNR needs data and a positive range".into()));
    }
    let mse = truth.iter().zip(est).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / truth.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (data_range * data_range / mse).log10()).min(PSNR_CAP))
}

/// Mean structural similarity with an 11×11 Gaussian window (σ = 1.5) over
/// all fully contained window positions and the usual stabilizers
/// `(0.01 L)²`, `(0.03 L)²`. Images smaller than the window use the largest
/// odd window that fits.
pub fn ssim(truth: &[f64], est: &[f64], shape: (usize, usize), data_range: f64) -> Result<f64> {
    let (h, w) = shape;
    check_dim(h * w, truth.len())?;
    check_dim(h * w, est.len())?;
    if h == 0 || w == 0 || !(data_range > 0.0) {
        return Err(Error::InvalidParameter("SSIM needs a nonempty image and positive range".into()));
    }
    let mut win = 11.min(h).min(w);
    if win % 2 == 0 {
        win -= 1;
    }
    let half = (win / 2) as f64;
    let g: Vec<f64> = (0..win).map(|i| (-((i as f64 - half).powi(2)) / (2.0 * 1.5 * 1.5)).exp()).collect();
    let gs: f64 = g.iter().sum();
    let k: Vec<f64> = g.iter().map(|v| v / gs).collect();
    let c1 = (0.01 * data_range).powi(2);
    let c2 = (0.03 * data_range).powi(2);
    let mut total = 0.0;
    let mut count = 0;
    for r0 in 0..=h - win {
        for q0 in 0..=w - win {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..win {
                for j in 0..win {
                    let wt = k[i] * k[j];
                    let p = (r0 + i) * w + q0 + j;
                    let (a, b) = (truth[p], est[p]);
                    mx += wt * a;
                    my += wt * b;
                    sxx += wt * a * a;
                    syy += wt * b * b;
                    sxy += wt * a * b;
                }
            }
            let vx = sxx - mx * mx;
            let vy = syy - my * my;
            let cxy = sxy - mx * my;
            total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    pub fraction: f64,
    /// Pixels with non-positive standard deviation; they count as covered
    /// only when the mean equals the truth.
    pub n_zero_std: usize,
}

/// Fraction of pixels with `|truth - mean| ≤ 3·std`.
pub fn coverage_3sigma(truth: &[f64], mean: &[f64], std: &[f64]) -> Result<Coverage> {
    check_dim(truth.len(), mean.len())?;
    check_dim(truth.len(), std.len())?;
    if truth.is_empty() {
        return Err(Error::InvalidParameter("coverage needs pixels".into()));
    }
    let mut inside = 0;
    let mut zero = 0;
    for ((t, m), s) in truth.iter().zip(mean).zip(std) {
        if !(*s > 0.0) {
            zero += 1;
        }
        if (t - m).abs() <= 3.0 * s.max(0.0) {
            inside += 1;
        }
    }
    Ok(Coverage {
        fraction: inside as f64 / truth.len() as f64,
        n_zero_std: zero,
    })
}

/// Per-coordinate mean and standard deviation of a sample set.
pub fn sample_moments(samples: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let d = samples.first().map_or(0, Vec::len);
    let n = samples.len() as f64;
    let mut m = vec![0.0; d];
    for s in samples {
        crate::linalg::axpy(1.0 / n, s, &mut m);
    }
    let mut v = vec![0.0; d];
    for s in samples {
        for i in 0..d {
            v[i] += (s[i] - m[i]).powi(2) / (n - 1.0).max(1.0);
        }
    }
    (m, v.into_iter().map(f64::sqrt).collect())
}

/// Two-sample energy-distance permutation test; returns the p-value. Each
/// set is subsampled (without replacement) to at most `n_max` points.
pub fn energy_test<R: Rng + ?Sized>(
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    n_max: usize,
    n_perm: usize,
    rng: &mut R,
) -> Result<f64> {
    use rand::seq::SliceRandom;
    if a.len() < 2 || b.len() < 2 || n_perm == 0 {
        return Err(Error::InvalidParameter("energy test needs two samples per set and permutations".into()));
    }
    let pick = |xs: &[Vec<f64>], rng: &mut R| -> Vec<Vec<f64>> {
        let mut idx: Vec<usize> = (0..xs.len()).collect();
        idx.shuffle(rng);
        idx.truncate(n_max.min(xs.len()));
        idx.into_iter().map(|i| xs[i].clone()).collect()
    };
    let pa = pick(a, rng);
    let pb = pick(b, rng);
    let na = pa.len();
    let pooled: Vec<Vec<f64>> = pa.into_iter().chain(pb).collect();
    let n = pooled.len();
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = pooled[i].iter().zip(&pooled[j]).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    let row_sum: Vec<f64> = (0..n).map(|i| dist[i * n..(i + 1) * n].iter().sum()).collect();
    let total: f64 = row_sum.iter().sum();
    let nb = n - na;
    let stat = |is_a: &[bool]| {
        let mut saa = 0.0;
        let mut sa_all = 0.0;
        for i in 0..n {
            if is_a[i] {
                sa_all += row_sum[i];
                let row = &dist[i * n..(i + 1) * n];
                saa += row.iter().zip(is_a).filter(|(_, a)| **a).map(|(d, _)| d).sum::<f64>();
            }
        }
        let sab = sa_all - saa;
        let sbb = total - saa - 2.0 * sab;
        2.0 * sab / (na * nb) as f64 - saa / (na * na) as f64 - sbb / (nb * nb) as f64
    };
    let mut labels: Vec<bool> = (0..n).map(|i| i < na).collect();
    let observed = stat(&labels);
    let mut ge = 0;
    for _ in 0..n_perm {
        labels.shuffle(rng);
        if stat(&labels) >= observed {
            ge += 1;
        }
    }
    Ok((ge + 1) as f64 / (n_perm + 1) as f64)
}
