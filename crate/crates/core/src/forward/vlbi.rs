use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::sync::OnceLock;

use rand::Rng;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::{Forward, ForwardOp, Measurement};
use crate::error::{check_dim, Error, Result};

/// One microarcsecond in radians.
pub const MICROARCSEC: f64 = 4.848_136_811_095_36e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UvRecord {
    pub time: f64,
    pub i: usize,
    pub j: usize,
    /// Baseline coordinates in wavelengths.
    pub u: f64,
    pub v: f64,
    /// Thermal noise standard deviation per real component.
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UvCoverage {
    pub n_stations: usize,
    pub records: Vec<UvRecord>,
}

impl UvCoverage {
    pub fn new(n_stations: usize, records: Vec<UvRecord>) -> Result<Self> {
        let c = Self { n_stations, records };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.records.is_empty() {
            return Err(Error::InvalidParameter("empty (u,v) coverage".into()));
        }
        for r in &self.records {
            if r.i == r.j || r.i >= self.n_stations || r.j >= self.n_stations {
                return Err(Error::InvalidParameter(format!("bad station pair ({}, {})", r.i, r.j)));
            }
            if !(r.u.is_finite() && r.v.is_finite() && r.time.is_finite()) || !(r.sigma > 0.0) {
                return Err(Error::InvalidParameter("non-finite (u,v) record or sigma".into()));
            }
        }
        Ok(())
    }

    /// Parse `time station_i station_j u v sigma` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        let mut n = 0;
        for (ln, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 6 {
                return Err(Error::Format(format!("coverage line {}: expected 6 fields", ln + 1)));
            }
            let bad = |_| Error::Format(format!("coverage line {}: bad number", ln + 1));
            let r = UvRecord {
                time: f[0].parse().map_err(bad)?,
                i: f[1].parse().map_err(|_| Error::Format(format!("coverage line {}: bad station", ln + 1)))?,
                j: f[2].parse().map_err(|_| Error::Format(format!("coverage line {}: bad station", ln + 1)))?,
                u: f[3].parse().map_err(bad)?,
                v: f[4].parse().map_err(bad)?,
                sigma: f[5].parse().map_err(bad)?,
            };
            n = n.max(r.i + 1).max(r.j + 1);
            records.push(r);
        }
        Self::new(n, records)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# time station_i station_j u v sigma\n");
        for r in &self.records {
            s.push_str(&format!("{} {} {} {:e} {:e} {:e}\n", r.time, r.i, r.j, r.u, r.v, r.sigma));
        }
        s
    }

    /// Full-array coverage from station positions (in wavelengths) at a set
    /// of time stamps, with a fixed per-step rotation of the array.
    pub fn synthetic(positions: &[(f64, f64)], n_times: usize, rotation: f64, sigma: f64) -> Result<Self> {
        let mut records = Vec::new();
        for t in 0..n_times {
            let (s, c) = (rotation * t as f64).sin_cos();
            for i in 0..positions.len() {
                for j in i + 1..positions.len() {
                    let du = positions[j].0 - positions[i].0;
                    let dv = positions[j].1 - positions[i].1;
                    records.push(UvRecord {
                        time: t as f64,
                        i,
                        j,
                        u: c * du - s * dv,
                        v: s * du + c * dv,
                        sigma,
                    });
                }
            }
        }
        Self::new(positions.len(), records)
    }
}

fn pixel_coords(h: usize, w: usize, fov: f64) -> Vec<(f64, f64)> {
    let dl = fov / w as f64;
    let dm = fov / h as f64;
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            out.push(((c as f64 - (w / 2) as f64) * dl, (r as f64 - (h / 2) as f64) * dm));
        }
    }
    out
}

/// `v(u, v) = Σ_p x_p exp(-2πi(u ℓ_p + v m_p))` for every coverage record.
pub fn vlbi_visibilities(x: &[f64], height: usize, width: usize, fov: f64, cov: &UvCoverage) -> Result<Vec<Complex64>> {
    check_dim(height * width, x.len())?;
    cov.validate()?;
    if !(fov > 0.0) {
        return Err(Error::InvalidParameter("field of view must be positive".into()));
    }
    let px = pixel_coords(height, width, fov);
    Ok(cov
        .records
        .iter()
        .map(|r| {
            px.iter().zip(x).fold(Complex64::new(0.0, 0.0), |acc, (&(l, m), &xp)| {
                acc + Complex64::from_polar(xp, -2.0 * PI * (r.u * l + r.v * m))
            })
        })
        .collect())
}

/// Wrap an angle to `(-π, π]`.
pub(crate) fn wrap(a: f64) -> f64 {
    a - 2.0 * PI * ((a - PI) / (2.0 * PI)).ceil()
}

/// A closure triangle as three visibility indices; `conj[e]` marks edges
/// whose stored baseline runs opposite to the loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triangle {
    pub vis: [usize; 3],
    pub conj: [bool; 3],
}

/// A closure quadrangle `log(|v_ij||v_kl| / (|v_ik||v_jl|))` as visibility
/// indices `[ij, kl, ik, jl]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Quad {
    pub vis: [usize; 4],
}

pub fn closure_phases(v: &[Complex64], triangles: &[Triangle]) -> Result<Vec<f64>> {
    triangles
        .iter()
        .map(|t| {
            let mut prod = Complex64::new(1.0, 0.0);
            for e in 0..3 {
                let z = *v.get(t.vis[e]).ok_or_else(|| Error::InvalidParameter("triangle index".into()))?;
                prod *= if t.conj[e] { z.conj() } else { z };
            }
            Ok(wrap(prod.arg()))
        })
        .collect()
}

pub fn log_closure_amplitudes(v: &[Complex64], quads: &[Quad]) -> Result<Vec<f64>> {
    quads
        .iter()
        .map(|q| {
            let mut a = [0.0; 4];
            for e in 0..4 {
                let z = v.get(q.vis[e]).ok_or_else(|| Error::InvalidParameter("quad index".into()))?;
                a[e] = z.norm();
                if a[e] == 0.0 {
                    return Err(Error::NonFinite("zero-magnitude visibility in closure amplitude".into()));
                }
            }
            Ok(a[0].ln() + a[1].ln() - a[2].ln() - a[3].ln())
        })
        .collect()
}

/// Incremental row-echelon basis for rank tests of closure design rows.
struct RankBasis {
    rows: Vec<(usize, Vec<f64>)>,
}

impl RankBasis {
    fn new() -> Self {
        Self { rows: Vec::new() }
    }

    /// Add `r` if it is independent of the basis; returns whether it was.
    fn try_add(&mut self, mut r: Vec<f64>) -> bool {
        for (p, b) in &self.rows {
            let f = r[*p];
            if f != 0.0 {
                for (ri, bi) in r.iter_mut().zip(b) {
                    *ri -= f * bi;
                }
            }
        }
        match r.iter().enumerate().max_by(|a, b| a.1.abs().total_cmp(&b.1.abs())) {
            Some((p, &v)) if v.abs() > 1e-9 => {
                let b: Vec<f64> = r.iter().map(|x| x / v).collect();
                for (_, row) in self.rows.iter_mut() {
                    let f = row[p];
                    if f != 0.0 {
                        for (ri, bi) in row.iter_mut().zip(&b) {
                            *ri -= f * bi;
                        }
                    }
                }
                self.rows.push((p, b));
                true
            }
            _ => false,
        }
    }
}

fn baseline_index(n: usize, a: usize, b: usize) -> usize {
    let (i, j) = if a < b { (a, b) } else { (b, a) };
    i * n - i * (i + 1) / 2 + (j - i - 1)
}

/// Log-amplitude design row of quad `[i, j, k, l]` over baselines among
/// `n` stations (labels are positions `0..n`).
pub(crate) fn quad_row(n: usize, q: [usize; 4]) -> Vec<f64> {
    let mut r = vec![0.0; n * (n - 1) / 2];
    r[baseline_index(n, q[0], q[1])] += 1.0;
    r[baseline_index(n, q[2], q[3])] += 1.0;
    r[baseline_index(n, q[0], q[2])] -= 1.0;
    r[baseline_index(n, q[1], q[3])] -= 1.0;
    r
}

/// Phase design row of the loop `a → b → c → a`.
#[cfg(test)]
pub(crate) fn triangle_row(n: usize, t: [usize; 3]) -> Vec<f64> {
    let mut r = vec![0.0; n * (n - 1) / 2];
    for (x, y) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
        r[baseline_index(n, x, y)] += if x < y { 1.0 } else { -1.0 };
    }
    r
}

/// Non-redundant closure sets among the given stations: triangles anchored
/// at the first station, and quadrangles chosen greedily in lexicographic
/// order while they raise the rank of the log-amplitude design matrix.
pub fn select_nonredundant(stations: &[usize]) -> Result<(Vec<[usize; 3]>, Vec<[usize; 4]>)> {
    let mut st = stations.to_vec();
    st.sort_unstable();
    st.dedup();
    let n = st.len();
    if n < 3 {
        return Err(Error::TooFewStations { needed: 3, have: n });
    }
    let mut tris = Vec::with_capacity((n - 1) * (n - 2) / 2);
    for i in 1..n {
        for j in i + 1..n {
            tris.push([st[0], st[i], st[j]]);
        }
    }
    let mut quads = Vec::new();
    let want = if n >= 4 { n * (n - 3) / 2 } else { 0 };
    let mut basis = RankBasis::new();
    'outer: for a in 0..n {
        for b in a + 1..n {
            for c in b + 1..n {
                for d in c + 1..n {
                    for q in [[a, b, c, d], [a, b, d, c], [a, c, d, b]] {
                        if quads.len() == want {
                            break 'outer;
                        }
                        if basis.try_add(quad_row(n, q)) {
                            quads.push([st[q[0]], st[q[1]], st[q[2]], st[q[3]]]);
                        }
                    }
                }
            }
        }
    }
    Ok((tris, quads))
}

/// Closure phases followed by log closure amplitudes of the visibilities of
/// an image, over non-redundant sets at every time stamp.
#[derive(Clone, Serialize, Deserialize)]
pub struct ClosureOp {
    pub height: usize,
    pub width: usize,
    /// Field of view in radians.
    pub fov: f64,
    pub coverage: UvCoverage,
    pub triangles: Vec<Triangle>,
    pub quads: Vec<Quad>,
    #[serde(skip)]
    kernel: OnceLock<Vec<Complex64>>,
}

impl fmt::Debug for ClosureOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ClosureOp")
            .field("height", &self.height)
            .field("width", &self.width)
            .field("fov", &self.fov)
            .field("n_vis", &self.coverage.records.len())
            .field("n_triangles", &self.triangles.len())
            .field("n_quads", &self.quads.len())
            .finish()
    }
}

impl ClosureOp {
    pub fn new(height: usize, width: usize, fov: f64, coverage: UvCoverage) -> Result<Self> {
        coverage.validate()?;
        if !(fov > 0.0) {
            return Err(Error::InvalidParameter("field of view must be positive".into()));
        }
        let mut by_time: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
        for (k, r) in coverage.records.iter().enumerate() {
            by_time.entry(r.time.to_bits()).or_default().push(k);
        }
        let mut triangles = Vec::new();
        let mut quads = Vec::new();
        for idx in by_time.values() {
            let mut lookup = BTreeMap::new();
            let mut stations = Vec::new();
            for &k in idx {
                let r = &coverage.records[k];
                lookup.insert((r.i, r.j), (k, false));
                lookup.insert((r.j, r.i), (k, true));
                stations.push(r.i);
                stations.push(r.j);
            }
            stations.sort_unstable();
            stations.dedup();
            if stations.len() < 3 {
                continue;
            }
            let find = |a: usize, b: usize| lookup.get(&(a, b)).copied().ok_or(Error::MissingBaseline(a, b));
            let (tris, qs) = select_nonredundant(&stations)?;
            for [a, b, c] in tris {
                let e = [find(a, b)?, find(b, c)?, find(c, a)?];
                triangles.push(Triangle {
                    vis: [e[0].0, e[1].0, e[2].0],
                    conj: [e[0].1, e[1].1, e[2].1],
                });
            }
            for [i, j, k, l] in qs {
                quads.push(Quad {
                    vis: [find(i, j)?.0, find(k, l)?.0, find(i, k)?.0, find(j, l)?.0],
                });
            }
        }
        if triangles.is_empty() {
            return Err(Error::TooFewStations { needed: 3, have: 2 });
        }
        Ok(Self {
            height,
            width,
            fov,
            coverage,
            triangles,
            quads,
            kernel: OnceLock::new(),
        })
    }

    pub fn n_vis(&self) -> usize {
        self.coverage.records.len()
    }

    fn kernel(&self) -> &[Complex64] {
        self.kernel.get_or_init(|| {
            let px = pixel_coords(self.height, self.width, self.fov);
            let mut k = Vec::with_capacity(self.n_vis() * px.len());
            for r in &self.coverage.records {
                for &(l, m) in &px {
                    k.push(Complex64::from_polar(1.0, -2.0 * PI * (r.u * l + r.v * m)));
                }
            }
            k
        })
    }

    pub fn visibilities(&self, x: &[f64]) -> Result<Vec<Complex64>> {
        let d = self.height * self.width;
        check_dim(d, x.len())?;
        let k = self.kernel();
        Ok((0..self.n_vis())
            .map(|r| {
                k[r * d..(r + 1) * d]
                    .iter()
                    .zip(x)
                    .fold(Complex64::new(0.0, 0.0), |acc, (a, xp)| acc + a * xp)
            })
            .collect())
    }

    pub fn closures(&self, v: &[Complex64]) -> Result<Vec<f64>> {
        let mut out = closure_phases(v, &self.triangles)?;
        out.extend(log_closure_amplitudes(v, &self.quads)?);
        Ok(out)
    }

    /// First-order standard deviations of each closure quantity given
    /// visibilities `v` and the per-record thermal noise.
    pub fn closure_sigmas(&self, v: &[Complex64]) -> Vec<f64> {
        let rel = |k: usize| (self.coverage.records[k].sigma / v[k].norm()).powi(2);
        let mut out: Vec<f64> = self
            .triangles
            .iter()
            .map(|t| t.vis.iter().map(|&k| rel(k)).sum::<f64>().sqrt())
            .collect();
        out.extend(self.quads.iter().map(|q| q.vis.iter().map(|&k| rel(k)).sum::<f64>().sqrt()));
        out
    }

    /// Simulate thermal noise on the visibilities of `x` and form closure data
    /// with linearized noise levels.
    pub fn measure<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Result<Measurement> {
        let mut v = self.visibilities(x)?;
        for (z, r) in v.iter_mut().zip(&self.coverage.records) {
            let n = crate::rng::normal_vec(rng, 2);
            *z += Complex64::new(r.sigma * n[0], r.sigma * n[1]);
        }
        let values = self.closures(&v)?;
        let sigma = self.closure_sigmas(&v);
        Measurement::new(values, sigma, ForwardOp::VlbiClosure(self.clone()))
    }
}

impl Forward for ClosureOp {
    fn input_dim(&self) -> usize {
        self.height * self.width
    }

    fn output_len(&self) -> usize {
        self.triangles.len() + self.quads.len()
    }

    fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.closures(&self.visibilities(x)?)
    }

    fn vjp(&self, x: &[f64], cot: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.output_len(), cot.len())?;
        let v = self.visibilities(x)?;
        // Per-visibility coefficients on log|v| (a) and arg v (b).
        let mut a = vec![0.0; v.len()];
        let mut b = vec![0.0; v.len()];
        for (t, c) in self.triangles.iter().zip(cot) {
            for e in 0..3 {
                b[t.vis[e]] += if t.conj[e] { -c } else { *c };
            }
        }
        for (q, c) in self.quads.iter().zip(&cot[self.triangles.len()..]) {
            a[q.vis[0]] += c;
            a[q.vis[1]] += c;
            a[q.vis[2]] -= c;
            a[q.vis[3]] -= c;
        }
        // ∂/∂x_p = Σ_k Re(conj(v_k) A_kp (a_k - i b_k)) / |v_k|².
        let d = self.input_dim();
        let k = self.kernel();
        let mut g = vec![0.0; d];
        for r in 0..v.len() {
            if a[r] == 0.0 && b[r] == 0.0 {
                continue;
            }
            let w = v[r].conj() * Complex64::new(a[r], -b[r]) / v[r].norm_sqr();
            for (gp, ak) in g.iter_mut().zip(&k[r * d..(r + 1) * d]) {
                *gp += (w * ak).re;
            }
        }
        Ok(g)
    }

    fn residual(&self, y: &[f64], fx: &[f64]) -> Vec<f64> {
        let nt = self.triangles.len();
        y.iter()
            .zip(fx)
            .enumerate()
            .map(|(i, (a, b))| if i < nt { wrap(a - b) } else { a - b })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_vec, stream};

    fn array(n: usize) -> Vec<(f64, f64)> {
        // Irregular station layout, a few thousand km in wavelengths.
        (0..n)
            .map(|i| {
                let a = 2.399 * i as f64;
                let r = 1.0e9 * (0.3 + 0.7 * ((i * 7 % 5) as f64 / 5.0));
                (r * a.cos(), r * a.sin())
            })
            .collect()
    }

    fn blob(h: usize, w: usize) -> Vec<f64> {
        let mut x = vec![0.0; h * w];
        for r in 0..h {
            for c in 0..w {
                let dr = r as f64 - 3.2;
                let dc = c as f64 - 4.1;
                x[r * w + c] = (-(dr * dr + 0.5 * dc * dc) / 4.0).exp() + 0.3 * (-(dr + 1.0).powi(2) / 2.0).exp();
            }
        }
        x
    }

    #[test]
    fn wrap_range() {
        assert_eq!(wrap(PI), PI);
        assert!((wrap(-PI) - PI).abs() < 1e-15);
        assert!((wrap(3.0 * PI + 0.1) - (-PI + 0.1)).abs() < 1e-12);
        assert!((wrap(0.3) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn visibilities_match_brute_force() {
        let cov = UvCoverage::synthetic(&array(5), 2, 0.2, 0.01).unwrap();
        let x = normal_vec(&mut stream(1, 0), 64);
        let fov = 160.0 * MICROARCSEC;
        let v = vlbi_visibilities(&x, 8, 8, fov, &cov).unwrap();
        let op = ClosureOp::new(8, 8, fov, cov.clone()).unwrap();
        let v2 = op.visibilities(&x).unwrap();
        let dl = fov / 8.0;
        for (k, r) in cov.records.iter().enumerate() {
            let mut re = 0.0;
            let mut im = 0.0;
            for row in 0..8 {
                for col in 0..8 {
                    let l = (col as f64 - 4.0) * dl;
                    let m = (row as f64 - 4.0) * dl;
                    let th = -2.0 * PI * (r.u * l + r.v * m);
                    re += x[row * 8 + col] * th.cos();
                    im += x[row * 8 + col] * th.sin();
                }
            }
            assert!((v[k].re - re).abs() < 1e-10 && (v[k].im - im).abs() < 1e-10);
            assert!((v2[k] - v[k]).norm() < 1e-10);
        }
    }

    #[test]
    fn point_source_and_dc() {
        let mut recs = UvCoverage::synthetic(&array(4), 1, 0.0, 0.01).unwrap().records;
        recs.push(UvRecord {
            time: 5.0,
            i: 0,
            j: 1,
            u: 0.0,
            v: 0.0,
            sigma: 0.01,
        });
        let cov = UvCoverage::new(4, recs).unwrap();
        let mut x = vec![0.0; 64];
        x[4 * 8 + 4] = 2.5;
        let v = vlbi_visibilities(&x, 8, 8, 160.0 * MICROARCSEC, &cov).unwrap();
        for z in &v {
            assert!((z.norm() - 2.5).abs() < 1e-12 && z.arg().abs() < 1e-12);
        }
        let x = blob(8, 8);
        let v = vlbi_visibilities(&x, 8, 8, 160.0 * MICROARCSEC, &cov).unwrap();
        let flux: f64 = x.iter().sum();
        assert!((v.last().unwrap().re - flux).abs() < 1e-12);
        let op = ClosureOp::new(8, 8, 160.0 * MICROARCSEC, UvCoverage::synthetic(&array(5), 2, 0.3, 0.01).unwrap()).unwrap();
        let mut pt = vec![0.0; 64];
        pt[36] = 1.0;
        assert!(op.forward(&pt).unwrap().iter().all(|c| c.abs() < 1e-10));
    }

    #[test]
    fn conjugation_negates_phases_and_jk_swap_negates_amplitudes() {
        let cov = UvCoverage::synthetic(&array(5), 1, 0.0, 0.01).unwrap();
        let op = ClosureOp::new(8, 8, 160.0 * MICROARCSEC, cov).unwrap();
        let v = op.visibilities(&blob(8, 8)).unwrap();
        let vc: Vec<Complex64> = v.iter().map(|z| z.conj()).collect();
        let a = closure_phases(&v, &op.triangles).unwrap();
        let b = closure_phases(&vc, &op.triangles).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((wrap(x + y)).abs() < 1e-12);
        }
        for q in &op.quads {
            // [ij, kl, ik, jl] with j and k exchanged becomes [ik, jl, ij, kl].
            let s = Quad {
                vis: [q.vis[2], q.vis[3], q.vis[0], q.vis[1]],
            };
            let x = log_closure_amplitudes(&v, &[*q]).unwrap()[0];
            let y = log_closure_amplitudes(&v, &[s]).unwrap()[0];
            assert!((x + y).abs() < 1e-12);
        }
    }

    #[test]
    fn selection_counts() {
        let (t, q) = select_nonredundant(&[0, 1, 2, 3]).unwrap();
        assert_eq!((t.len(), q.len()), (3, 2));
        let (t, q) = select_nonredundant(&[4, 7, 9]).unwrap();
        assert_eq!((t.len(), q.len()), (1, 0));
        assert!(matches!(
            select_nonredundant(&[0, 1]),
            Err(Error::TooFewStations { needed: 3, have: 2 })
        ));
    }

    fn rank(rows: &[Vec<f64>]) -> usize {
        if rows.is_empty() {
            return 0;
        }
        let m = nalgebra::DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j]);
        m.svd(false, false).singular_values.iter().filter(|s| **s > 1e-8).count()
    }

    #[test]
    fn selection_is_independent_and_complete() {
        for n in 3..=8usize {
            let st: Vec<usize> = (0..n).collect();
            let (t, q) = select_nonredundant(&st).unwrap();
            assert_eq!(t.len(), (n - 1) * (n - 2) / 2);
            assert_eq!(q.len(), n * (n - 3) / 2);
            let trows: Vec<Vec<f64>> = t.iter().map(|&x| triangle_row(n, x)).collect();
            let qrows: Vec<Vec<f64>> = q.iter().map(|&x| quad_row(n, x)).collect();
            assert_eq!(rank(&trows), t.len());
            assert_eq!(rank(&qrows), q.len());
            // Every closure over the array lies in the span of the selection.
            let mut all_t = trows.clone();
            let mut all_q = qrows.clone();
            for a in 0..n {
                for b in a + 1..n {
                    for c in b + 1..n {
                        all_t.push(triangle_row(n, [a, b, c]));
                        for d in c + 1..n {
                            for f in [[a, b, c, d], [a, b, d, c], [a, c, d, b]] {
                                all_q.push(quad_row(n, f));
                            }
                        }
                    }
                }
            }
            assert_eq!(rank(&all_t), t.len());
            assert_eq!(rank(&all_q), q.len());
        }
    }

    #[test]
    fn closures_are_invariant_to_station_gains() {
        let cov = UvCoverage::synthetic(&array(7), 3, 0.25, 0.01).unwrap();
        let op = ClosureOp::new(8, 8, 160.0 * MICROARCSEC, cov.clone()).unwrap();
        let v = op.visibilities(&blob(8, 8)).unwrap();
        let mut rng = stream(9, 0);
        let mut g: BTreeMap<(u64, usize), Complex64> = BTreeMap::new();
        let vg: Vec<Complex64> = v
            .iter()
            .zip(&cov.records)
            .map(|(z, r)| {
                let mut gain = |s: usize| {
                    *g.entry((r.time.to_bits(), s)).or_insert_with(|| {
                        let n = normal_vec(&mut rng, 2);
                        Complex64::from_polar((0.3 * n[0]).exp(), 3.0 * n[1])
                    })
                };
                gain(r.i) * gain(r.j).conj() * z
            })
            .collect();
        let a = op.closures(&v).unwrap();
        let b = op.closures(&vg).unwrap();
        let nt = op.triangles.len();
        for (k, (x, y)) in a.iter().zip(&b).enumerate() {
            let d = if k < nt { wrap(x - y) } else { x - y };
            assert!(d.abs() < 1e-10, "{k}: {x} vs {y}");
        }
    }

    #[test]
    fn missing_baseline_is_reported() {
        let mut recs = UvCoverage::synthetic(&array(4), 1, 0.0, 0.01).unwrap().records;
        recs.retain(|r| !(r.i == 1 && r.j == 2));
        let cov = UvCoverage::new(4, recs).unwrap();
        assert!(matches!(
            ClosureOp::new(8, 8, 160.0 * MICROARCSEC, cov),
            Err(Error::MissingBaseline(_, _))
        ));
    }

    #[test]
    fn closure_vjp_matches_finite_differences() {
        let cov = UvCoverage::synthetic(&array(5), 2, 0.4, 0.01).unwrap();
        let op = ClosureOp::new(8, 8, 160.0 * MICROARCSEC, cov).unwrap();
        let x: Vec<f64> = blob(8, 8).iter().map(|v| v + 0.05).collect();
        super::super::check_vjp_fd(&op, &x, 1e-5);
    }

    #[test]
    fn closure_likelihood_gradient_and_noise_levels() {
        let cov = UvCoverage::synthetic(&array(6), 3, 0.3, 0.02).unwrap();
        let op = ClosureOp::new(8, 8, 160.0 * MICROARCSEC, cov).unwrap();
        let truth = blob(8, 8);
        let m = op.measure(&truth, &mut stream(3, 0)).unwrap();
        assert_eq!(m.values.len(), 3 * (10 + 9));
        let x: Vec<f64> = truth.iter().map(|v| 0.9 * v + 0.02).collect();
        let (_, g) = m.log_likelihood_grad(&x).unwrap();
        for i in (0..64).step_by(5) {
            let f = |d: f64| {
                let mut y = x.clone();
                y[i] += d;
                m.log_likelihood(&y).unwrap()
            };
            let fd = (f(1e-6) - f(-1e-6)) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-4 * (1.0 + fd.abs()), "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn coverage_text_roundtrip() {
        let cov = UvCoverage::synthetic(&array(4), 2, 0.1, 0.5).unwrap();
        let back = UvCoverage::parse(&cov.to_text()).unwrap();
        assert_eq!(back, cov);
        assert!(UvCoverage::parse("0 0 1 1.0 2.0\n").is_err());
        assert!(UvCoverage::parse("# nothing\n").is_err());
    }
}
