use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{check_score_time, ScoreField, ScoreKind};
use crate::diffusion::DiffusionSpec;
use crate::error::{check_dim, Error, Result};
use crate::io::{read_json, write_atomic, write_json};
use crate::nn::{Activation, MlpShape};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::rng::normal_vec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreNetSpec {
    pub hidden: Vec<usize>,
    /// Number of sinusoidal time features; must be even.
    pub embed_dim: usize,
    pub activation: Activation,
}

impl ScoreNetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::InvalidParameter("hidden widths must be positive".into()));
        }
        if self.embed_dim == 0 || self.embed_dim % 2 != 0 {
            return Err(Error::InvalidParameter("time embedding size must be even and positive".into()));
        }
        Ok(())
    }

    pub fn shape(&self, dim: usize) -> MlpShape {
        let mut w = Vec::with_capacity(self.hidden.len() + 2);
        w.push(dim + self.embed_dim);
        w.extend_from_slice(&self.hidden);
        w.push(dim);
        MlpShape::new(w, self.activation)
    }
}

/// Dense score network. The network predicts the injected noise `ε̂(x, t)`
/// and the score is `-ε̂ / ρ(t)`, which keeps the outputs of order one at
/// every noise level.
#[derive(Debug, Clone)]
pub struct ScoreNet {
    netspec: ScoreNetSpec,
    spec: DiffusionSpec,
    shape: MlpShape,
    params: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetManifest {
    format: String,
    netspec: ScoreNetSpec,
    diffusion: DiffusionSpec,
    widths: Vec<usize>,
    n_params: usize,
    dtype: String,
    params_file: String,
}

const NET_FORMAT: &str = "spvi-score-net-v1";

impl ScoreNet {
    pub fn new(netspec: ScoreNetSpec, spec: DiffusionSpec, params: Vec<f64>) -> Result<Self> {
        netspec.validate()?;
        spec.validate()?;
        let shape = netspec.shape(spec.dim);
        check_dim(shape.n_params(), params.len())?;
        Ok(Self {
            netspec,
            spec,
            shape,
            params,
        })
    }

    /// Random hidden layers with a small output layer.
    pub fn init<R: Rng + ?Sized>(netspec: ScoreNetSpec, spec: DiffusionSpec, rng: &mut R) -> Result<Self> {
        netspec.validate()?;
        let params = netspec.shape(spec.dim).init(rng, 0.1);
        Self::new(netspec, spec, params)
    }

    pub fn netspec(&self) -> &ScoreNetSpec {
        &self.netspec
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// Sinusoidal features of `ln ρ(t)` at geometrically spaced frequencies.
    pub fn embed(&self, t: f64) -> Vec<f64> {
        let (_, rho) = self.spec.kernel_unchecked(t);
        let c = rho.ln();
        let half = self.netspec.embed_dim / 2;
        let mut out = Vec::with_capacity(2 * half);
        for k in 0..half {
            let w = if half == 1 {
                1.0
            } else {
                0.1 * 40f64.powf(k as f64 / (half - 1) as f64)
            };
            out.push((w * c).sin());
            out.push((w * c).cos());
        }
        out
    }

    fn input(&self, x: &[f64], t: f64) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.shape.n_in());
        v.extend_from_slice(x);
        v.extend(self.embed(t));
        v
    }

    fn check(&self, x: &[f64], t: f64) -> Result<f64> {
        check_dim(self.spec.dim, x.len())?;
        check_score_time(&self.spec, t)?;
        Ok(self.spec.kernel_unchecked(t).1)
    }

    /// Noise prediction `ε̂(x, t)`.
    pub fn predict_noise(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.check(x, t)?;
        Ok(self.shape.forward(&self.params, &self.input(x, t)).output().to_vec())
    }

    /// Persist as `<stem>.bin` (little-endian f32 parameters) plus
    /// `<stem>.json`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let bin = format!("{stem}.bin");
        let bytes: Vec<u8> = self.params.iter().flat_map(|&p| (p as f32).to_le_bytes()).collect();
        write_atomic(&dir.join(&bin), &bytes)?;
        let m = NetManifest {
            format: NET_FORMAT.into(),
            netspec: self.netspec.clone(),
            diffusion: self.spec,
            widths: self.shape.widths.clone(),
            n_params: self.params.len(),
            dtype: "f32le".into(),
            params_file: bin,
        };
        write_json(&dir.join(format!("{stem}.json")), &m)
    }

    /// Load from the manifest path written by [`ScoreNet::save`].
    pub fn load(manifest: &Path) -> Result<Self> {
        let m: NetManifest = read_json(manifest)?;
        if m.format != NET_FORMAT || m.dtype != "f32le" {
            return Err(Error::Format(format!("unsupported network format {} / {}", m.format, m.dtype)));
        }
        let dir = manifest.parent().unwrap_or(Path::new("."));
        let bytes = std::fs::read(dir.join(&m.params_file))?;
        if bytes.len() != 4 * m.n_params {
            return Err(Error::Format(format!(
                "parameter blob has {} bytes, expected {}",
                bytes.len(),
                4 * m.n_params
            )));
        }
        let params = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let net = Self::new(m.netspec, m.diffusion, params)?;
        if net.shape.widths != m.widths {
            return Err(Error::Format("layer widths disagree with network spec".into()));
        }
        Ok(net)
    }

    /// Squared noise-prediction error `‖ε̂(αx₀ + ρz, t) - z‖²` (equal to
    /// `ρ²‖s + z/ρ‖²`), accumulating its parameter gradient scaled by
    /// `weight`.
    fn dsm_term(&self, x0: &[f64], t: f64, z: &[f64], weight: f64, grad: &mut [f64]) -> f64 {
        let (a, r) = self.spec.kernel_unchecked(t);
        let xt: Vec<f64> = x0.iter().zip(z).map(|(x, zi)| a * x + r * zi).collect();
        let cache = self.shape.forward(&self.params, &self.input(&xt, t));
        let diff: Vec<f64> = cache.output().iter().zip(z).map(|(e, zi)| e - zi).collect();
        let loss = crate::linalg::norm_sq(&diff);
        let g: Vec<f64> = diff.iter().map(|d| 2.0 * weight * d).collect();
        self.shape.backward(&self.params, &cache, &g, Some(grad));
        loss
    }
}

impl ScoreField for ScoreNet {
    fn dim(&self) -> usize {
        self.spec.dim
    }

    fn kind(&self) -> ScoreKind {
        ScoreKind::Network
    }

    fn diffusion(&self) -> &DiffusionSpec {
        &self.spec
    }

    fn score(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let rho = self.check(x, t)?;
        let out = self.shape.forward(&self.params, &self.input(x, t));
        Ok(out.output().iter().map(|e| -e / rho).collect())
    }

    fn score_and_pullback(
        &self,
        x: &[f64],
        t: f64,
        cot: &mut dyn FnMut(&[f64]) -> Vec<f64>,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let rho = self.check(x, t)?;
        let cache = self.shape.forward(&self.params, &self.input(x, t));
        let s: Vec<f64> = cache.output().iter().map(|e| -e / rho).collect();
        let c: Vec<f64> = cot(&s).iter().map(|v| -v / rho).collect();
        let mut g = self.shape.backward(&self.params, &cache, &c, None);
        g.truncate(self.spec.dim);
        Ok((s, g))
    }

    fn score_vjps(&self, x: &[f64], t: f64, cots: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let rho = self.check(x, t)?;
        let cache = self.shape.forward(&self.params, &self.input(x, t));
        let s: Vec<f64> = cache.output().iter().map(|e| -e / rho).collect();
        let v = cots
            .iter()
            .map(|c| {
                let c: Vec<f64> = c.iter().map(|v| -v / rho).collect();
                let mut g = self.shape.backward(&self.params, &cache, &c, None);
                g.truncate(self.spec.dim);
                g
            })
            .collect();
        Ok((s, v))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSchedule {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default)]
    pub clip: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: ScoreNet,
    /// Per-step mean loss per dimension.
    pub losses: Vec<f64>,
}

impl TrainOutcome {
    /// Mean loss over consecutive windows of `w` steps.
    pub fn windowed_losses(&self, w: usize) -> Vec<f64> {
        self.losses.chunks(w.max(1)).map(crate::linalg::mean).collect()
    }
}

/// Denoising score matching with times drawn from the importance proposal
/// and uniform weighting under it.
pub fn train_dsm<R: Rng + ?Sized>(
    dataset: &[Vec<f64>],
    netspec: &ScoreNetSpec,
    spec: &DiffusionSpec,
    schedule: &TrainSchedule,
    rng: &mut R,
) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::InvalidParameter("empty training set".into()));
    }
    if schedule.batch_size == 0 || !(schedule.lr > 0.0) {
        return Err(Error::InvalidParameter("batch size and learning rate must be positive".into()));
    }
    for x in dataset {
        check_dim(spec.dim, x.len())?;
    }
    let mut net = ScoreNet::init(netspec.clone(), *spec, rng)?;
    let proposal = spec.time_proposal()?;
    let cfg = AdamConfig::new(schedule.lr, schedule.clip);
    let mut state = AdamState::new(net.n_params());
    let mut losses = Vec::with_capacity(schedule.steps);
    let weight = 1.0 / (schedule.batch_size * spec.dim) as f64;
    for step in 0..schedule.steps {
        let mut grad = vec![0.0; net.n_params()];
        let mut loss = 0.0;
        for _ in 0..schedule.batch_size {
            let x0 = &dataset[rng.random_range(0..dataset.len())];
            let (t, _) = proposal.sample_time(rng);
            let z = normal_vec(rng, spec.dim);
            loss += net.dsm_term(x0, t, &z, weight, &mut grad);
        }
        loss *= weight;
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged { step, loss });
        }
        losses.push(loss);
        adam_step(&cfg, &mut state, &mut net.params, &mut grad)
            .map_err(|_| Error::TrainingDiverged { step, loss })?;
    }
    Ok(TrainOutcome { net, losses })
}

#[cfg(test)]
mod tests {
    use super::super::testutil::check_vjps;
    use super::*;
    use crate::rng;

    fn netspec() -> ScoreNetSpec {
        ScoreNetSpec {
            hidden: vec![16, 16],
            embed_dim: 4,
            activation: Activation::Silu,
        }
    }

    fn spec(d: usize) -> DiffusionSpec {
        DiffusionSpec::new(0.1, 20.0, d).unwrap()
    }

    #[test]
    fn zero_output_layer_gives_zero_score() {
        let ns = netspec();
        let shape = ns.shape(3);
        let p = shape.init(&mut rng::stream(0, 0), 0.0);
        let net = ScoreNet::new(ns, spec(3), p).unwrap();
        assert!(net.score(&[1.0, -2.0, 0.5], 0.3).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn evaluation_is_deterministic() {
        let net = ScoreNet::init(netspec(), spec(3), &mut rng::stream(1, 0)).unwrap();
        let a = net.score(&[0.1, 0.2, 0.3], 0.4).unwrap();
        let b = net.score(&[0.1, 0.2, 0.3], 0.4).unwrap();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn vjps_match_finite_differences() {
        let ns = netspec();
        let p = ns.shape(3).init(&mut rng::stream(2, 0), 1.0);
        let net = ScoreNet::new(ns, spec(3), p).unwrap();
        for t in [0.01, 0.2, 0.9] {
            check_vjps(&net, &[0.4, -0.3, 1.2], t, 1e-4);
        }
    }

    #[test]
    fn quad_form_grad_matches_finite_differences() {
        let ns = netspec();
        let p = ns.shape(3).init(&mut rng::stream(3, 0), 1.0);
        let net = ScoreNet::new(ns, spec(3), p).unwrap();
        let x = [0.2, -0.5, 0.7];
        let eps = [1.0, -1.0, 1.0];
        let t = 0.3;
        let q = |x: &[f64]| {
            let (_, v) = net.score_vjps(x, t, &[eps.to_vec()]).unwrap();
            crate::linalg::dot(&v[0], &eps)
        };
        let g = net.quad_form_grad(&x, t, &eps).unwrap();
        for i in 0..3 {
            let mut xp = x;
            let mut xm = x;
            xp[i] += 1e-5;
            xm[i] -= 1e-5;
            let fd = (q(&xp) - q(&xm)) / 2e-5;
            assert!((fd - g[i]).abs() < 1e-4 * (1.0 + fd.abs()), "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn dsm_gradient_matches_finite_differences() {
        let ns = netspec();
        let p = ns.shape(2).init(&mut rng::stream(4, 0), 1.0);
        let net = ScoreNet::new(ns.clone(), spec(2), p.clone()).unwrap();
        let (x0, t, z) = ([0.5, -1.0], 0.2, [0.3, 0.8]);
        let mut g = vec![0.0; p.len()];
        net.dsm_term(&x0, t, &z, 1.0, &mut g);
        for i in (0..p.len()).step_by(7) {
            let f = |d: f64| {
                let mut q = p.clone();
                q[i] += d;
                let n = ScoreNet::new(ns.clone(), spec(2), q).unwrap();
                n.dsm_term(&x0, t, &z, 1.0, &mut vec![0.0; p.len()])
            };
            let fd = (f(1e-6) - f(-1e-6)) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-5 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn zero_steps_returns_initial_params() {
        let data = vec![vec![0.0, 1.0]];
        let sched = TrainSchedule {
            steps: 0,
            batch_size: 8,
            lr: 1e-3,
            clip: None,
        };
        let out = train_dsm(&data, &netspec(), &spec(2), &sched, &mut rng::stream(5, 0)).unwrap();
        let init = ScoreNet::init(netspec(), spec(2), &mut rng::stream(5, 0)).unwrap();
        assert_eq!(out.net.params(), init.params());
        assert!(out.losses.is_empty());
    }

    #[test]
    fn divergent_training_is_reported() {
        let data = vec![vec![f64::NAN, 0.0]];
        let sched = TrainSchedule {
            steps: 3,
            batch_size: 2,
            lr: 1e-3,
            clip: None,
        };
        let r = train_dsm(&data, &netspec(), &spec(2), &sched, &mut rng::stream(6, 0));
        assert!(matches!(r, Err(Error::TrainingDiverged { step: 0, .. })));
    }

    #[test]
    fn save_load_roundtrip() {
        let net = ScoreNet::init(netspec(), spec(3), &mut rng::stream(7, 0)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        net.save(dir.path(), "score").unwrap();
        let back = ScoreNet::load(&dir.path().join("score.json")).unwrap();
        assert_eq!(back.netspec(), net.netspec());
        for (a, b) in back.params().iter().zip(net.params()) {
            assert_eq!(*a, *b as f32 as f64);
        }
        std::fs::write(dir.path().join("score.bin"), [0u8; 3]).unwrap();
        assert!(ScoreNet::load(&dir.path().join("score.json")).is_err());
    }
}
