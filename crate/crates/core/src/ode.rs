//! Dormand–Prince 5(4) adaptive integrator.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OdeOptions {
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
}

impl Default for OdeOptions {
    fn default() -> Self {
        Self {
            rtol: 1e-5,
            atol: 1e-5,
            max_steps: 20_000,
        }
    }
}

impl OdeOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.rtol > 0.0 && self.atol > 0.0) || self.max_steps == 0 {
            return Err(Error::InvalidParameter("ODE tolerances and step budget must be positive".into()));
        }
        Ok(())
    }
}

/// Accepted knots of a solve. `ys[k]` is the state at `ts[k]`; the first knot
/// is the initial condition and the last the endpoint.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub ts: Vec<f64>,
    pub ys: Vec<Vec<f64>>,
    pub n_evals: usize,
    pub n_rejected: usize,
}

impl Trajectory {
    pub fn end(&self) -> &[f64] {
        self.ys.last().expect("trajectory has at least the initial knot")
    }

    pub fn n_steps(&self) -> usize {
        self.ts.len() - 1
    }
}

const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    // Fifth-order weights; the last stage is evaluated at the new state (FSAL).
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
/// Difference between fifth- and fourth-order weights.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

/// Integrate `y' = f(t, y)` from `t0` to `t1` (either direction).
pub fn integrate<F>(mut f: F, t0: f64, t1: f64, y0: &[f64], opts: &OdeOptions) -> Result<Trajectory>
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>>,
{
    opts.validate()?;
    let n = y0.len();
    let dir = if t1 >= t0 { 1.0 } else { -1.0 };
    let span = (t1 - t0).abs();
    let mut traj = Trajectory {
        ts: vec![t0],
        ys: vec![y0.to_vec()],
        n_evals: 0,
        n_rejected: 0,
    };
    if span == 0.0 {
        return Ok(traj);
    }
    let mut t = t0;
    let mut y = y0.to_vec();
    let mut k0 = f(t, &y)?;
    traj.n_evals += 1;
    check_finite(&k0, t)?;

    // Initial step from the usual scale heuristic.
    let sc: Vec<f64> = y.iter().map(|v| opts.atol + opts.rtol * v.abs()).collect();
    let d0 = rms(&y, &sc);
    let d1 = rms(&k0, &sc);
    let mut h = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    h = h.min(span);

    let mut stages: Vec<Vec<f64>> = vec![Vec::new(); 7];
    let mut ytmp = vec![0.0; n];
    let mut steps = 0usize;
    while (t1 - t) * dir > 0.0 {
        if steps >= opts.max_steps {
            return Err(Error::SolverExhausted {
                max_steps: opts.max_steps,
                t,
            });
        }
        let last = h >= (t1 - t).abs();
        if last {
            h = (t1 - t).abs();
        }
        if h <= 1e-14 * t.abs().max(span) {
            return Err(Error::StepSizeUnderflow { t });
        }
        let hs = h * dir;
        stages[0] = k0.clone();
        for s in 1..7 {
            for i in 0..n {
                let mut acc = 0.0;
                for (j, a) in A[s][..s].iter().enumerate() {
                    acc += a * stages[j][i];
                }
                ytmp[i] = y[i] + hs * acc;
            }
            let ts = if last && C[s] == 1.0 { t1 } else { t + C[s] * hs };
            stages[s] = f(ts, &ytmp)?;
            traj.n_evals += 1;
        }
        // The seventh stage is evaluated at the fifth-order solution.
        let ynew = ytmp.clone();
        let mut err = 0.0;
        for i in 0..n {
            let mut e = 0.0;
            for s in 0..7 {
                e += E[s] * stages[s][i];
            }
            let scale = opts.atol + opts.rtol * y[i].abs().max(ynew[i].abs());
            err += (hs * e / scale).powi(2);
        }
        let err = (err / n.max(1) as f64).sqrt();
        steps += 1;
        if err.is_nan() {
            return Err(Error::NonFinite(format!("ODE error estimate at t = {t}")));
        }
        if err <= 1.0 {
            t = if last { t1 } else { t + hs };
            y = ynew;
            check_finite(&y, t)?;
            k0 = stages[6].clone();
            traj.ts.push(t);
            traj.ys.push(y.clone());
            let fac = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
            h *= fac;
        } else {
            traj.n_rejected += 1;
            h *= (0.9 * err.powf(-0.2)).clamp(0.1, 0.9);
        }
    }
    Ok(traj)
}

fn rms(v: &[f64], sc: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    (v.iter().zip(sc).map(|(a, s)| (a / s).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

fn check_finite(v: &[f64], t: f64) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("ODE state at t = {t}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_decay() {
        let tr = integrate(|_, y| Ok(vec![-2.0 * y[0]]), 0.0, 3.0, &[1.5], &OdeOptions::default()).unwrap();
        let want = 1.5 * (-6.0f64).exp();
        assert!((tr.end()[0] - want).abs() < 1e-5, "{} vs {want}", tr.end()[0]);
        assert_eq!(*tr.ts.last().unwrap(), 3.0);
    }

    #[test]
    fn harmonic_oscillator_both_directions() {
        let f = |_: f64, y: &[f64]| Ok(vec![y[1], -y[0]]);
        let opts = OdeOptions {
            rtol: 1e-9,
            atol: 1e-9,
            max_steps: 100_000,
        };
        let fw = integrate(f, 0.0, 2.0, &[1.0, 0.0], &opts).unwrap();
        assert!((fw.end()[0] - 2.0f64.cos()).abs() < 1e-7);
        assert!((fw.end()[1] + 2.0f64.sin()).abs() < 1e-7);
        let bw = integrate(f, 2.0, 0.0, fw.end(), &opts).unwrap();
        assert!((bw.end()[0] - 1.0).abs() < 1e-7 && bw.end()[1].abs() < 1e-7);
    }

    #[test]
    fn fifth_order_convergence_on_polynomial() {
        // y' = 5t⁴ is integrated exactly by a fifth-order method.
        let tr = integrate(|t, _| Ok(vec![5.0 * t.powi(4)]), 0.0, 1.0, &[0.0], &OdeOptions::default()).unwrap();
        assert!((tr.end()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn step_budget_is_enforced() {
        let opts = OdeOptions {
            rtol: 1e-12,
            atol: 1e-12,
            max_steps: 5,
        };
        let r = integrate(|t, _| Ok(vec![(50.0 * t).cos()]), 0.0, 10.0, &[0.0], &opts);
        assert!(matches!(r, Err(Error::SolverExhausted { max_steps: 5, .. })));
    }

    #[test]
    fn non_finite_rhs_is_an_error() {
        let r = integrate(|_, _| Ok(vec![f64::NAN]), 0.0, 1.0, &[0.0], &OdeOptions::default());
        assert!(r.is_err());
    }
}
