//! The six experiment kinds. Each reads its inputs, writes artifacts into
//! the run directory and records metrics.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use spvi_core::baselines::{run_sweep, SweepGrid, SweepPoint, ALD_MAPPING};
use spvi_core::eval::{
    coverage_3sigma, diag_gaussian_kl, gaussian_posterior, gmm_log_density, gmm_posterior, psnr, reverse_kl,
    sample_moments, ssim,
};
use spvi_core::forward::{
    poisson_disc_mask, ClosureOp, DenoiseOp, DenseOp, Forward, ForwardOp, LowFreqOp, Measurement, MriOp,
    PoissonDiscMask, UvCoverage, MICROARCSEC,
};
use spvi_core::io::{read_json, Tensor};
use spvi_core::prior::{bound_gap_probe, bound_validity};
use spvi_core::rng::{derive_seed, stream};
use spvi_core::score::{train_dsm, GaussianScore, GmmScore, ScoreField, ScoreNet};
use spvi_core::variational::{Family, Variational};
use spvi_core::vi::{fit, PriorKind, PriorTerm};

use crate::artifacts::RunDir;
use crate::config::{Experiment, OperatorSpec, PriorSource, RunConfig};
use crate::error::{CliError, CliResult};

/// Posterior draws used for image summaries of a fitted family.
pub const POSTERIOR_SAMPLES: usize = 1024;

// Stream labels under the run seed.
const S_INIT: u64 = 1;
const S_SAMPLES: u64 = 2;
const S_MASK: u64 = 3;
const S_NOISE: u64 = 4;
const S_TRAIN: u64 = 5;
const S_PROBE: u64 = 6;
const S_SWEEP: u64 = 7;

pub fn execute(cfg: &RunConfig, rd: &mut RunDir) -> CliResult<()> {
    rd.seed("run", cfg.seed);
    match cfg.experiment {
        Experiment::TrainScore => train_score(cfg, rd),
        Experiment::Infer => infer(cfg, rd),
        Experiment::BaselineSweep => baseline_sweep(cfg, rd),
        Experiment::ProbeBound => probe_bound(cfg, rd),
        Experiment::Evaluate => evaluate(cfg, rd),
        Experiment::MakeMeasurements => make_measurements_run(cfg, rd),
    }
}

fn section<'a, T>(s: &'a Option<T>, name: &str) -> CliResult<&'a T> {
    s.as_ref().ok_or_else(|| CliError::validation(format!("missing [{name}] section")))
}

fn load_measurement(path: &Path) -> CliResult<Measurement> {
    let m: Measurement = read_json(path)?;
    Ok(Measurement::new(m.values, m.noise_sigma, m.op)?)
}

fn load_score(cfg: &RunConfig) -> CliResult<Box<dyn ScoreField>> {
    let spec = *section(&cfg.diffusion, "diffusion")?;
    let score: Box<dyn ScoreField> = match section(&cfg.prior, "prior")? {
        PriorSource::Gaussian(p) => Box::new(GaussianScore::new(p.clone(), spec)?),
        PriorSource::Gmm(p) => Box::new(GmmScore::new(p.clone(), spec)?),
        PriorSource::Checkpoint { path } => {
            let net = ScoreNet::load(path)?;
            if *net.diffusion() != spec {
                return Err(CliError::validation("score checkpoint was trained under a different diffusion"));
            }
            Box::new(net)
        }
    };
    Ok(score)
}

/// Tensor dims for an image of `d` pixels: `[h, w]` when the shape is known.
fn image_dims(shape: Option<(usize, usize)>, d: usize) -> Vec<usize> {
    match shape {
        Some((h, w)) if h * w == d => vec![h, w],
        _ => vec![d],
    }
}

fn tensor_shape(t: &Tensor) -> Option<(usize, usize)> {
    match t.dims[..] {
        [h, w] => Some((h, w)),
        _ => None,
    }
}

/// Posterior mean/std tensors and, with a truth image, PSNR, SSIM and 3σ
/// coverage of the posterior mean.
fn image_summary(
    rd: &mut RunDir,
    fam: &Family,
    shape: Option<(usize, usize)>,
    truth: Option<&Tensor>,
    data_range: Option<f64>,
    n: usize,
    seed: u64,
) -> CliResult<(Vec<f64>, Vec<f64>)> {
    let (xs, _) = fam.sample(&mut stream(seed, S_SAMPLES), n);
    let (mean, std) = sample_moments(&xs);
    let dims = image_dims(shape, mean.len());
    rd.write_tensor("mean.spvi", &Tensor::from_f64(dims.clone(), &mean)?, "posterior_mean")?;
    rd.write_tensor("std.spvi", &Tensor::from_f64(dims, &std)?, "posterior_std")?;
    if let Some(t) = truth {
        let x = t.to_f64();
        if x.len() != mean.len() {
            return Err(CliError::validation("truth image size disagrees with the posterior"));
        }
        let range = data_range.unwrap_or_else(|| {
            let (lo, hi) = x.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
            (hi - lo).max(1e-12)
        });
        rd.metric("psnr_mean", psnr(&x, &mean, range)?, n, seed);
        if let Some(s) = shape.or_else(|| tensor_shape(t)) {
            if s.0 * s.1 == x.len() && s.0 >= 7 && s.1 >= 7 {
                rd.metric("ssim_mean", ssim(&x, &mean, s, range)?, n, seed);
            }
        }
        rd.metric("coverage_3sigma", coverage_3sigma(&x, &mean, &std)?.fraction, n, seed);
    }
    Ok((mean, std))
}

fn train_score(cfg: &RunConfig, rd: &mut RunDir) -> CliResult<()> {
    let spec = *section(&cfg.diffusion, "diffusion")?;
    let tc = section(&cfg.train, "train")?;
    tc.net.validate()?;
    let data = Tensor::read(&tc.dataset)?;
    if data.dims.len() != 2 || data.dims[1] != spec.dim {
        return Err(CliError::validation(format!(
            "dataset must have shape [n, {}], got {:?}",
            spec.dim, data.dims
        )));
    }
    let rows = data.rows()?;
    let seed = derive_seed(cfg.seed, S_TRAIN);
    rd.seed("train", seed);
    let out = train_dsm(&rows, &tc.net, &spec, &tc.schedule, &mut stream(seed, 0))?;
    let dir = rd.subdir("checkpoints")?;
    out.net.save(&dir, "score")?;
    rd.record_dir("checkpoints", "checkpoint")?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in out.losses.iter().enumerate() {
        let _ = writeln!(csv, "{},{:e}", i + 1, l);
    }
    rd.write_bytes("history.csv", csv.as_bytes(), "history")?;
    let w = (out.losses.len() / 10).max(1);
    let windows = out.windowed_losses(w);
    if let (Some(first), Some(last)) = (windows.first(), windows.last()) {
        rd.metric("loss_first_window", *first, w, seed);
        rd.metric("loss_last_window", *last, w, seed);
    }
    rd.metric("n_params", out.net.n_params() as f64, 1, seed);
    Ok(())
}

fn infer(cfg: &RunConfig, rd: &mut RunDir) -> CliResult<()> {
    let problem = section(&cfg.problem, "problem")?;
    let vi = section(&cfg.vi, "vi")?;
    let kind = section(&cfg.objective, "objective")?;
    let y = load_measurement(&problem.measurement)?;
    let dim = y.op.input_dim();
    let score = match kind {
        PriorKind::Tv { .. } => None,
        _ => Some(load_score(cfg)?),
    };
    if let Some(s) = &score {
        if s.dim() != dim {
            return Err(CliError::validation(format!("prior dimension {} vs image dimension {dim}", s.dim())));
        }
    }
    let shape = y.op.image_shape();
    let prior = PriorTerm::new(kind, score.as_deref(), shape)?;
    let mut fam = Family::init(&cfg.family.clone().unwrap_or_default(), dim, &mut stream(cfg.seed, S_INIT))?;
    rd.seed("vi", vi.seed);
    rd.seed("snapshot", vi.snapshot_seed());
    let dir = rd.subdir("checkpoints")?;
    let hist = fit(&y, &prior, kind, &mut fam, vi, Some(&dir));
    rd.record_dir("checkpoints", "checkpoint")?;
    let hist = hist?;
    fam.save(&dir, "final", hist.steps.len())?;
    rd.record_dir("checkpoints", "checkpoint")?;
    rd.write_bytes("history.csv", hist.to_csv().as_bytes(), "history")?;

    let n = hist.steps.len();
    if let Some(last) = hist.steps.last() {
        rd.metric("final_loss_smoothed", last.smoothed, n, vi.seed);
    }
    rd.metric("steps", n as f64, n, vi.seed);
    rd.metric("converged", if hist.converged { 1.0 } else { 0.0 }, n, vi.seed);

    let truth = problem.truth.as_deref().map(Tensor::read).transpose()?;
    image_summary(rd, &fam, shape, truth.as_ref(), None, POSTERIOR_SAMPLES, cfg.seed)?;
    if let Some(kl) = analytic_kl(cfg, &y, &fam, cfg.seed)? {
        rd.metric("kl_to_posterior", kl, POSTERIOR_SAMPLES, cfg.seed);
    }
    Ok(())
}

/// KL(q‖posterior) when the posterior is available in closed form: exact
/// for a diagonal Gaussian under a Gaussian prior, Monte Carlo for a
/// mixture prior.
fn analytic_kl(cfg: &RunConfig, y: &Measurement, fam: &Family, seed: u64) -> CliResult<Option<f64>> {
    if !y.op.is_linear() || matches!(cfg.objective, Some(PriorKind::Tv { .. })) {
        return Ok(None);
    }
    match &cfg.prior {
        Some(PriorSource::Gaussian(p)) => {
            let post = gaussian_posterior(p, &y.op.to_dense()?, &y.values, &y.noise_sigma)?;
            match fam {
                Family::DiagGaussian(q) => Ok(Some(diag_gaussian_kl(q.mean(), &q.std(), &post)?)),
                Family::RealNvp(_) => Ok(None),
            }
        }
        Some(PriorSource::Gmm(p)) => {
            let post = gmm_posterior(p, &y.op.to_dense()?, &y.values, &y.noise_sigma)?;
            let (xs, _) = fam.sample(&mut stream(seed, S_SAMPLES), POSTERIOR_SAMPLES);
            let (kl, _) = reverse_kl(
                &xs,
                |x| fam.log_density(x).unwrap_or(f64::NAN),
                |x| gmm_log_density(&post, x).unwrap_or(f64::NAN),
            )?;
            Ok(Some(kl))
        }
        _ => Ok(None),
    }
}

fn baseline_sweep(cfg: &RunConfig, rd: &mut RunDir) -> CliResult<()> {
    let spec = *section(&cfg.diffusion, "diffusion")?;
    let sc = section(&cfg.sweep, "sweep")?;
    let Some(PriorSource::Gmm(prior)) = &cfg.prior else {
        return Err(CliError::validation("baseline sweeps need an analytic mixture prior"));
    };
    let y = load_measurement(&section(&cfg.problem, "problem")?.measurement)?;
    let score = GmmScore::new(prior.clone(), spec)?;
    let post = gmm_posterior(prior, &y.op.to_dense()?, &y.values, &y.noise_sigma)?;
    let mut all: Vec<SweepPoint> = Vec::new();
    for (mi, method) in sc.methods.iter().enumerate() {
        let mut grid = SweepGrid::reference(*method, sc.samples_per_value);
        if let Some(v) = &sc.values {
            grid.values = v.clone();
        }
        let seed = derive_seed(derive_seed(cfg.seed, S_SWEEP), mi as u64);
        rd.seed(&format!("sweep_{}", method.name()), seed);
        let res = run_sweep(&grid, &score, &y, &post, &sc.sampler, seed, false)?;
        let best = &res.points[res.oracle()];
        rd.metric(&format!("oracle_kl_{}", method.name()), best.kl, best.n_samples, best.seed);
        rd.metric(&format!("oracle_weight_{}", method.name()), best.weight, best.n_samples, best.seed);
        rd.metric(
            &format!("interior_minimum_{}", method.name()),
            if res.interior_minimum() { 1.0 } else { 0.0 },
            res.points.len(),
            seed,
        );
        all.extend(res.points);
    }
    rd.write_json("sweep.json", &all, "sweep_points")?;
    rd.note("ald_mapping", ALD_MAPPING);
    Ok(())
}

fn probe_bound(cfg: &RunConfig, rd: &mut RunDir) -> CliResult<()> {
    let pc = section(&cfg.probe, "probe")?;
    let score = load_score(cfg)?;
    let (fam, _) = Family::load(&pc.checkpoint)?;
    if fam.dim() != score.dim() {
        return Err(CliError::validation("probe family and prior dimensions differ"));
    }
    let seed = derive_seed(cfg.seed, S_PROBE);
    rd.seed("probe", seed);
    let (xs, _) = fam.sample(&mut stream(seed, 0), pc.n_samples);
    let rows = bound_gap_probe(&*score, &xs, pc.n_repeats, &pc.surrogate, &pc.ode, seed)?;
    let validity = bound_validity(&rows, pc.k);
    let gap = rows.iter().map(|r| r.ode_value - r.b_value).sum::<f64>() / rows.len() as f64;
    rd.write_json("bound_gap.json", &rows, "bound_gap_rows")?;
    rd.metric("bound_validity", validity, pc.n_samples, seed);
    rd.metric("mean_gap", gap, rows.len(), seed);
    rd.metric("rows", rows.len() as f64, rows.len(), seed);
    Ok(())
}

fn evaluate(cfg: &RunConfig, rd: &mut RunDir) -> CliResult<()> {
    let ec = section(&cfg.evaluate, "evaluate")?;
    let problem = section(&cfg.problem, "problem")?;
    let (fam, _) = Family::load(&ec.checkpoint)?;
    let truth = Tensor::read(problem.truth.as_deref().expect("validated"))?;
    let y = load_measurement(&problem.measurement)?;
    if y.op.input_dim() != fam.dim() {
        return Err(CliError::validation("family and measurement dimensions differ"));
    }
    let shape = y.op.image_shape().or_else(|| tensor_shape(&truth));
    image_summary(rd, &fam, shape, Some(&truth), Some(ec.data_range), ec.n_samples, cfg.seed)?;
    if let ForwardOp::Mri(op) = &y.op {
        let zf = op.zero_filled(&y.values)?;
        rd.metric("psnr_zero_filled", psnr(&truth.to_f64(), &zf, ec.data_range)?, 1, cfg.seed);
    }
    Ok(())
}

/// Build the operator of a measurement spec. The MRI mask is drawn from
/// `rng`; the closure operator reads its coverage text.
pub fn build_operator<R: Rng + ?Sized>(
    spec: &OperatorSpec,
    coverage_text: Option<&str>,
    rng: &mut R,
) -> CliResult<(ForwardOp, Option<PoissonDiscMask>)> {
    Ok(match spec {
        OperatorSpec::Denoise { dim } => (ForwardOp::Denoise(DenoiseOp { dim: *dim }), None),
        OperatorSpec::Dense { rows, cols, matrix } => (ForwardOp::Dense(DenseOp::new(*rows, *cols, matrix.clone())?), None),
        OperatorSpec::LowFreq { height, width, fraction } => {
            (ForwardOp::LowFreq(LowFreqOp::new(*height, *width, *fraction)?), None)
        }
        OperatorSpec::Mri { height, width, accel } => {
            let m = poisson_disc_mask(*height, *width, *accel, rng)?;
            (ForwardOp::Mri(MriOp::new(*height, *width, m.mask.clone())?), Some(m))
        }
        OperatorSpec::Vlbi { height, width, fov_uas, .. } => {
            let text = coverage_text.ok_or_else(|| CliError::validation("closure operator needs a coverage file"))?;
            let cov = UvCoverage::parse(text)?;
            (ForwardOp::VlbiClosure(ClosureOp::new(*height, *width, fov_uas * MICROARCSEC, cov)?), None)
        }
    })
}

/// Forward-model output of `x` plus noise at `sigma`. The closure operator
/// draws thermal noise on the visibilities from its coverage instead.
pub fn make_measurements<R: Rng + ?Sized>(op: &ForwardOp, x: &[f64], sigma: f64, rng: &mut R) -> CliResult<Measurement> {
    if x.len() != op.input_dim() {
        return Err(CliError::validation(format!(
            "truth has {} pixels but the operator expects {}",
            x.len(),
            op.input_dim()
        )));
    }
    Ok(match op {
        ForwardOp::VlbiClosure(c) => c.measure(x, rng)?,
        _ => Measurement::simulate(op.clone(), x, &vec![sigma; op.output_len()], rng)?,
    })
}

fn make_measurements_run(cfg: &RunConfig, rd: &mut RunDir) -> CliResult<()> {
    let mc = section(&cfg.measure, "measure")?;
    let truth = Tensor::read(&mc.truth)?;
    let x = truth.to_f64();
    let coverage = match &mc.operator {
        OperatorSpec::Vlbi { coverage, .. } => Some(std::fs::read_to_string(coverage)?),
        _ => None,
    };
    let mask_seed = derive_seed(cfg.seed, S_MASK);
    let noise_seed = derive_seed(cfg.seed, S_NOISE);
    rd.seed("mask", mask_seed);
    rd.seed("noise", noise_seed);
    let (op, mask) = build_operator(&mc.operator, coverage.as_deref(), &mut stream(mask_seed, 0))?;
    let y = make_measurements(&op, &x, mc.sigma, &mut stream(noise_seed, 0))?;
    rd.write_json("measurement.json", &y, "measurement")?;
    if let Some(m) = &mask {
        let bits: Vec<f64> = m.mask.iter().map(|b| if *b { 1.0 } else { 0.0 }).collect();
        rd.write_tensor("mask.spvi", &Tensor::from_f64(vec![m.height, m.width], &bits)?, "mask")?;
        rd.metric("mask_fraction", m.fraction(), m.mask.len(), mask_seed);
    }
    if let (ForwardOp::VlbiClosure(c), Some(_)) = (&op, &coverage) {
        rd.write_bytes("coverage.txt", c.coverage.to_text().as_bytes(), "coverage")?;
    }
    let clean = op.forward(&x)?;
    rd.write_tensor("clean.spvi", &Tensor::from_f64(vec![clean.len()], &clean)?, "noiseless_output")?;
    let r = op.residual(&y.values, &clean);
    let rms = (r.iter().map(|v| v * v).sum::<f64>() / r.len() as f64).sqrt();
    rd.metric("n_measurements", y.values.len() as f64, y.values.len(), noise_seed);
    rd.metric("residual_rms", rms, y.values.len(), noise_seed);
    Ok(())
}
