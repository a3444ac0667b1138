//! Synthetic sources, metrics and the rate-distortion and gap experiments.
//!
//! Every experiment is a pure function of its arguments and a base seed.
//! Trials run in parallel, results are collected in trial order and reduced
//! with pairwise summation, so output does not depend on the thread count.

use std::io::Write;
use std::path::PathBuf;

use rand::{Rng, RngCore};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;

use crate::codec::{compress, psnr, rate_of, read_pgm, receive_latent, reconstruct, Transform};
use crate::diffusion::{
    ddim_reconstruct_counted, empirical_channel_priors, gaussian_analytic, gmm_gaussian_denoiser,
    gmm_uniform_aware_denoiser, per_channel_gaussian_denoiser, per_channel_uniform_aware_denoiser, Denoiser,
    GmmComponent, GmmSource, PosteriorMeanDenoiser, StepPath,
};
use crate::error::{Error, Result};
use crate::quantizer::{dequantize, forward_quantize, hard_dequantize, hard_quantize};
use crate::schedule::{Snr, VarianceSchedule};
use crate::tensor::{pairwise_sum, LatentTensor};

/// Timestep grid used throughout the experiments.
pub const DEFAULT_T_GRID: [usize; 7] = [1, 2, 5, 10, 20, 30, 40];

/// Three-component mixture used when a GMM source is requested without a file.
///
/// Two narrow modes sit close together on the left so that, on the cosine
/// schedule, both the uniform-noise likelihood and dithered quantization pay
/// off measurably at every grid timestep. Sources with modes centred on
/// quantization cells can reverse the dithered-vs-hard ordering.
pub fn default_gmm() -> GmmSource {
    GmmSource::new(DEFAULT_GMM.to_vec()).expect("valid built-in mixture")
}

const DEFAULT_GMM: [GmmComponent; 3] = [
    GmmComponent { weight: 0.2482, mean: -2.609, std: 0.0543 },
    GmmComponent { weight: 0.4052, mean: -1.7315, std: 0.0818 },
    GmmComponent { weight: 0.3466, mean: 1.6489, std: 0.5897 },
];

#[derive(Debug, Clone, PartialEq)]
pub enum SourceSpec {
    Gaussian { mean: f64, std: f64 },
    Laplace { scale: f64 },
    Gmm(GmmSource),
    Pgm(PathBuf),
}

impl std::str::FromStr for SourceSpec {
    type Err = Error;

    /// `gaussian`, `gaussian(m,s)`, `laplace(b)`, `gmm`, `gmm:<json>`,
    /// `pgm:<file>`.
    fn from_str(s: &str) -> Result<Self> {
        let args = |inner: &str| -> Result<Vec<f64>> {
            inner
                .split(',')
                .map(|p| p.trim().parse::<f64>().map_err(|e| Error::Parse(format!("source argument {p:?}: {e}"))))
                .collect()
        };
        let call = |name: &str| s.strip_prefix(name).and_then(|r| r.strip_prefix('(')).and_then(|r| r.strip_suffix(')'));
        let spec = if s == "gaussian" {
            SourceSpec::Gaussian { mean: 0.0, std: 1.0 }
        } else if let Some(inner) = call("gaussian") {
            match args(inner)?[..] {
                [mean, std] => SourceSpec::Gaussian { mean, std },
                _ => return Err(Error::Parse("gaussian(m,s) takes two arguments".into())),
            }
        } else if let Some(inner) = call("laplace") {
            match args(inner)?[..] {
                [scale] => SourceSpec::Laplace { scale },
                _ => return Err(Error::Parse("laplace(b) takes one argument".into())),
            }
        } else if s == "gmm" {
            SourceSpec::Gmm(default_gmm())
        } else if let Some(path) = s.strip_prefix("gmm:") {
            SourceSpec::Gmm(GmmSource::load(path)?)
        } else if let Some(path) = s.strip_prefix("pgm:") {
            SourceSpec::Pgm(PathBuf::from(path))
        } else {
            return Err(Error::Parse(format!("unknown source `{s}`")));
        };
        match spec {
            SourceSpec::Gaussian { std, .. } | SourceSpec::Laplace { scale: std } if !(std > 0.0 && std.is_finite()) => {
                Err(Error::Parse(format!("source `{s}` needs a positive finite scale")))
            }
            SourceSpec::Gaussian { mean, .. } if !mean.is_finite() => Err(Error::Parse(format!("source `{s}` has a non-finite mean"))),
            _ => Ok(spec),
        }
    }
}

impl SourceSpec {
    /// Exact prior for sources that have one.
    pub fn prior(&self) -> Option<GmmSource> {
        match self {
            SourceSpec::Gaussian { mean, std } => GmmSource::gaussian(*mean, *std).ok(),
            SourceSpec::Gmm(g) => Some(g.clone()),
            SourceSpec::Laplace { .. } | SourceSpec::Pgm(_) => None,
        }
    }

    pub fn is_image(&self) -> bool {
        matches!(self, SourceSpec::Pgm(_))
    }
}

/// Draws `n` i.i.d. samples as a rank-1 tensor. PGM sources ignore `n` and
/// `seed` and return the image as `1 x h x w` in `[-1, 1]`.
///
/// Laplace samples use the inverse CDF of one uniform draw per element.
pub fn sample_source(spec: &SourceSpec, n: usize, seed: u64) -> Result<LatentTensor> {
    let values = match spec {
        SourceSpec::Gaussian { mean, std } => GmmSource::gaussian(*mean, *std)?.sample(n, seed),
        SourceSpec::Gmm(g) => g.sample(n, seed),
        SourceSpec::Laplace { scale } => {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            (0..n)
                .map(|_| {
                    let u: f64 = rng.random::<f64>() - 0.5;
                    -scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
                })
                .collect()
        }
        SourceSpec::Pgm(path) => return read_pgm(path),
    };
    LatentTensor::from_flat(values)
}

/// `mean(signal^2) / mean((noisy - signal)^2)`.
pub fn snr_empirical(signal: &LatentTensor, noisy: &LatentTensor) -> Result<Snr> {
    let noise_power = signal.mse(noisy)?;
    Ok(Snr::from_powers(signal.mean_square(), noise_power))
}

/// Trial layout shared by all experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trials {
    pub trials: usize,
    pub samples: usize,
    pub seed: u64,
}

impl Default for Trials {
    fn default() -> Self {
        Self {
            trials: 256,
            samples: 4096,
            seed: 0,
        }
    }
}

impl Trials {
    /// Source and dither seeds of trial `i`.
    pub fn seeds(&self, i: usize) -> (u64, u64) {
        let mut rng = ChaCha20Rng::seed_from_u64(self.seed);
        rng.set_stream(i as u64);
        (rng.next_u64(), rng.next_u64())
    }

    fn check(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::invalid("need at least one trial"));
        }
        Ok(())
    }
}

/// Which noise family the posterior-mean denoiser assumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseAssumption {
    Gaussian,
    Uniform,
}

impl std::str::FromStr for NoiseAssumption {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(NoiseAssumption::Gaussian),
            "uniform" => Ok(NoiseAssumption::Uniform),
            _ => Err(Error::Parse(format!("unknown denoiser `{s}`; expected gaussian or uniform"))),
        }
    }
}

/// Posterior-mean denoiser for `prior`, or for per-channel Gaussian priors
/// estimated from `y_t` when the source has no known prior.
pub fn build_denoiser(
    assumption: NoiseAssumption,
    prior: Option<&GmmSource>,
    vs: &VarianceSchedule,
    y_t: &LatentTensor,
    t: usize,
) -> Result<PosteriorMeanDenoiser> {
    Ok(match (assumption, prior) {
        (NoiseAssumption::Gaussian, Some(g)) if g.components().len() == 1 => {
            let c = g.components()[0];
            gaussian_analytic(c.mean, c.std)?
        }
        (NoiseAssumption::Gaussian, Some(g)) => gmm_gaussian_denoiser(g.clone()),
        (NoiseAssumption::Uniform, Some(g)) => gmm_uniform_aware_denoiser(g.clone(), vs.quantization_schedule()),
        (NoiseAssumption::Gaussian, None) => per_channel_gaussian_denoiser(empirical_channel_priors(y_t, t, vs)?),
        (NoiseAssumption::Uniform, None) => per_channel_uniform_aware_denoiser(empirical_channel_priors(y_t, t, vs)?),
    })
}

/// Mean and standard error over trials.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
}

impl Estimate {
    pub fn from_trials(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = pairwise_sum(xs, |x| x) / n;
        let var = if xs.len() > 1 {
            pairwise_sum(xs, |x| (x - mean) * (x - mean)) / (n - 1.0)
        } else {
            0.0
        };
        Self {
            mean,
            stderr: (var / n).sqrt(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RdPoint {
    pub t: usize,
    /// Entropy-coded payload bits per sample.
    pub bits_per_sample: f64,
    /// Container header bits per sample, reported separately.
    pub header_bits_per_sample: f64,
    pub mse: f64,
    /// Only for image sources.
    pub psnr: Option<f64>,
    pub fallbacks: usize,
}

/// Settings of [`rd_sweep`] beyond the source and schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub denoiser: NoiseAssumption,
    pub path: StepPath,
    pub transform: Transform,
    pub trials: Trials,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            denoiser: NoiseAssumption::Uniform,
            path: StepPath::Direct,
            transform: Transform::Identity,
            trials: Trials::default(),
        }
    }
}

/// Full codec round trip per trial and per `t`: rate from the container,
/// distortion after denoising.
pub fn rd_sweep(source: &SourceSpec, vs: &VarianceSchedule, t_list: &[usize], cfg: &SweepConfig) -> Result<Vec<RdPoint>> {
    if t_list.is_empty() {
        return Err(Error::invalid("t list is empty"));
    }
    cfg.trials.check()?;
    let prior = source.prior();
    let image = if source.is_image() { Some(sample_source(source, 0, 0)?) } else { None };
    t_list
        .iter()
        .map(|&t| {
            let per_trial = (0..cfg.trials.trials)
                .into_par_iter()
                .map(|i| {
                    let (src_seed, dither_seed) = cfg.trials.seeds(i);
                    let x = match &image {
                        Some(img) => img.clone(),
                        None => sample_source(source, cfg.trials.samples, src_seed)?,
                    };
                    let c = compress(&x, t, vs, cfg.transform, dither_seed)?;
                    let rate = rate_of(&c);
                    let y_t = receive_latent(&c, vs)?;
                    let d = build_denoiser(cfg.denoiser, prior.as_ref(), vs, &y_t, t)?;
                    let r = reconstruct(&c, &y_t, &d, vs, &cfg.path)?;
                    Ok((
                        rate.payload_bits_per_sample(),
                        rate.header_bits_per_sample(),
                        r.output.mse(&x)?,
                        r.fallbacks,
                    ))
                })
                .collect::<Result<Vec<_>>>()?;
            let col = |f: fn(&(f64, f64, f64, usize)) -> f64| Estimate::from_trials(&per_trial.iter().map(f).collect::<Vec<_>>()).mean;
            let mse = col(|p| p.2);
            Ok(RdPoint {
                t,
                bits_per_sample: col(|p| p.0),
                header_bits_per_sample: col(|p| p.1),
                mse,
                psnr: image.as_ref().map(|_| psnr(mse)),
                fallbacks: per_trial.iter().map(|p| p.3).sum(),
            })
        })
        .collect()
}

pub fn rd_points_csv(points: &[RdPoint], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Io(e.into());
    w.write_record(["t", "bits_per_sample", "header_bits_per_sample", "mse", "psnr", "fallbacks"])
        .map_err(io)?;
    for p in points {
        w.write_record([
            p.t.to_string(),
            num(p.bits_per_sample),
            num(p.header_bits_per_sample),
            num(p.mse),
            p.psnr.map(num).unwrap_or_default(),
            p.fallbacks.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

/// 17 significant digits.
fn num(x: f64) -> String {
    format!("{x:.16e}")
}

/// Strict monotonicity of rate (down) and distortion (up) along increasing `t`.
pub fn check_rd_monotone(points: &[RdPoint]) -> Vec<String> {
    let mut v = Vec::new();
    for w in points.windows(2) {
        if !(w[1].bits_per_sample < w[0].bits_per_sample) {
            v.push(format!("rate does not decrease from t={} to t={}", w[0].t, w[1].t));
        }
        if !(w[1].mse > w[0].mse) {
            v.push(format!("mse does not increase from t={} to t={}", w[0].t, w[1].t));
        }
    }
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Experiment {
    NoiseLevel,
    NoiseType,
    Discretization,
}

impl Experiment {
    pub fn id(self) -> &'static str {
        match self {
            Experiment::NoiseLevel => "noise-level",
            Experiment::NoiseType => "noise-type",
            Experiment::Discretization => "discretization",
        }
    }
}

/// MSE grid over (row condition, column condition). Rows are timesteps.
#[derive(Debug, Clone, PartialEq)]
pub struct GapReport {
    pub experiment: Experiment,
    pub rows: Vec<usize>,
    pub cols: Vec<String>,
    /// `trial_mse[r][c][i]`: MSE of trial `i` in cell `(r, c)`.
    pub trial_mse: Vec<Vec<Vec<f64>>>,
    pub fallbacks: Vec<Vec<usize>>,
}

impl GapReport {
    pub fn mse(&self, r: usize, c: usize) -> f64 {
        Estimate::from_trials(&self.trial_mse[r][c]).mean
    }

    pub fn stderr(&self, r: usize, c: usize) -> f64 {
        Estimate::from_trials(&self.trial_mse[r][c]).stderr
    }

    /// Trial-paired difference `mse(r, a) - mse(r, b)`.
    pub fn paired_diff(&self, r: usize, a: usize, b: usize) -> Estimate {
        let d: Vec<f64> = self.trial_mse[r][a]
            .iter()
            .zip(&self.trial_mse[r][b])
            .map(|(x, y)| x - y)
            .collect();
        Estimate::from_trials(&d)
    }

    /// Column with the smallest MSE in row `r`; ties go to the first.
    pub fn winner(&self, r: usize) -> usize {
        (0..self.cols.len()).fold(0, |best, c| if self.mse(r, c) < self.mse(r, best) { c } else { best })
    }

    /// For the noise-level grid, the column whose `t_r` equals the row's `t_s`.
    pub fn diagonal(&self, r: usize) -> Option<usize> {
        match self.experiment {
            Experiment::NoiseLevel => self.cols.iter().position(|c| c == &self.rows[r].to_string()),
            _ => None,
        }
    }

    /// Long-format CSV, one line per cell.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| Error::Io(e.into());
        w.write_record(["experiment", "t", "condition", "mse", "stderr", "fallbacks", "winner", "diagonal"])
            .map_err(io)?;
        for (r, t) in self.rows.iter().enumerate() {
            let win = self.winner(r);
            let diag = self.diagonal(r);
            for (c, name) in self.cols.iter().enumerate() {
                w.write_record([
                    self.experiment.id().to_string(),
                    t.to_string(),
                    name.clone(),
                    num(self.mse(r, c)),
                    num(self.stderr(r, c)),
                    self.fallbacks[r][c].to_string(),
                    (c == win).to_string(),
                    (diag == Some(c)).to_string(),
                ])
                .map_err(io)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// The ordering each experiment is expected to show; one message per
    /// violated row.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        for (r, t) in self.rows.iter().enumerate() {
            match self.experiment {
                Experiment::NoiseLevel => {
                    if let Some(d) = self.diagonal(r) {
                        if (0..self.cols.len()).any(|c| self.mse(r, c) < self.mse(r, d)) {
                            v.push(format!("t_s={t}: diagonal is not the row minimum"));
                        }
                    }
                }
                Experiment::NoiseType | Experiment::Discretization => {
                    if self.mse(r, 0) > self.mse(r, 1) {
                        v.push(format!("t={t}: {} MSE exceeds {} MSE", self.cols[0], self.cols[1]));
                    }
                }
            }
        }
        v
    }
}

fn require_prior(source: &SourceSpec) -> Result<GmmSource> {
    source
        .prior()
        .ok_or_else(|| Error::invalid("this experiment needs a source with a known prior (gaussian or gmm)"))
}

fn one_step(d: &dyn Denoiser, y: &LatentTensor, t: usize, vs: &VarianceSchedule) -> Result<(LatentTensor, usize)> {
    ddim_reconstruct_counted(y, t, &StepPath::Direct.steps(t, vs)?, d, vs)
}

type Cell = (f64, usize);

// Runs `trial(y0, dither_seed)` for every trial; each call returns one row
// of cells per outer condition.
fn run_grid(
    source: &SourceSpec,
    trials: &Trials,
    n_rows: usize,
    n_cols: usize,
    trial: impl Fn(&LatentTensor, u64) -> Result<Vec<Vec<Cell>>> + Sync,
) -> Result<(Vec<Vec<Vec<f64>>>, Vec<Vec<usize>>)> {
    trials.check()?;
    let per_trial = (0..trials.trials)
        .into_par_iter()
        .map(|i| {
            let (src_seed, dither_seed) = trials.seeds(i);
            let y0 = sample_source(source, trials.samples, src_seed)?;
            trial(&y0, dither_seed)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut mse = vec![vec![Vec::with_capacity(trials.trials); n_cols]; n_rows];
    let mut fallbacks = vec![vec![0; n_cols]; n_rows];
    for cells in per_trial {
        for (r, row) in cells.into_iter().enumerate() {
            for (c, (m, f)) in row.into_iter().enumerate() {
                mse[r][c].push(m);
                fallbacks[r][c] += f;
            }
        }
    }
    Ok((mse, fallbacks))
}

/// Universally quantize at `t_s`, then denoise as if the data were at `t_r`.
pub fn ablate_noise_level(
    source: &SourceSpec,
    vs: &VarianceSchedule,
    ts_grid: &[usize],
    tr_grid: &[usize],
    denoiser: NoiseAssumption,
    trials: &Trials,
) -> Result<GapReport> {
    if ts_grid.is_empty() || tr_grid.is_empty() {
        return Err(Error::invalid("noise-level grids must be non-empty"));
    }
    let prior = require_prior(source)?;
    let placeholder = LatentTensor::zeros(vec![0]);
    let d = build_denoiser(denoiser, Some(&prior), vs, &placeholder, 0)?;
    let (trial_mse, fallbacks) = run_grid(source, trials, ts_grid.len(), tr_grid.len(), |y0, seed| {
        ts_grid
            .iter()
            .map(|&ts| {
                let y_hat = dequantize(&forward_quantize(y0, vs, ts, seed)?, vs)?;
                tr_grid
                    .iter()
                    .map(|&tr| {
                        let (est, f) = one_step(&d, &y_hat, tr, vs)?;
                        Ok((est.mse(y0)?, f))
                    })
                    .collect()
            })
            .collect()
    })?;
    Ok(GapReport {
        experiment: Experiment::NoiseLevel,
        rows: ts_grid.to_vec(),
        cols: tr_grid.iter().map(|t| t.to_string()).collect(),
        trial_mse,
        fallbacks,
    })
}

/// Universally quantized data denoised by the uniform-aware and by the
/// Gaussian-assumption posterior mean.
pub fn ablate_noise_type(source: &SourceSpec, vs: &VarianceSchedule, t_list: &[usize], trials: &Trials) -> Result<GapReport> {
    if t_list.is_empty() {
        return Err(Error::invalid("t list is empty"));
    }
    let prior = require_prior(source)?;
    let uniform = gmm_uniform_aware_denoiser(prior.clone(), vs.quantization_schedule());
    let gaussian = gmm_gaussian_denoiser(prior);
    let (trial_mse, fallbacks) = run_grid(source, trials, t_list.len(), 2, |y0, seed| {
        t_list
            .iter()
            .map(|&t| {
                let y_hat = dequantize(&forward_quantize(y0, vs, t, seed)?, vs)?;
                [&uniform, &gaussian]
                    .into_iter()
                    .map(|d| {
                        let (est, f) = one_step(d, &y_hat, t, vs)?;
                        Ok((est.mse(y0)?, f))
                    })
                    .collect()
            })
            .collect()
    })?;
    Ok(GapReport {
        experiment: Experiment::NoiseType,
        rows: t_list.to_vec(),
        cols: vec!["uniform-aware".into(), "gaussian".into()],
        trial_mse,
        fallbacks,
    })
}

/// Universal versus hard quantization, both denoised by the same
/// posterior-mean denoiser.
pub fn ablate_discretization(
    source: &SourceSpec,
    vs: &VarianceSchedule,
    t_list: &[usize],
    denoiser: NoiseAssumption,
    trials: &Trials,
) -> Result<GapReport> {
    if t_list.is_empty() {
        return Err(Error::invalid("t list is empty"));
    }
    let prior = require_prior(source)?;
    let placeholder = LatentTensor::zeros(vec![0]);
    let d = build_denoiser(denoiser, Some(&prior), vs, &placeholder, 0)?;
    let (trial_mse, fallbacks) = run_grid(source, trials, t_list.len(), 2, |y0, seed| {
        t_list
            .iter()
            .map(|&t| {
                let universal = dequantize(&forward_quantize(y0, vs, t, seed)?, vs)?;
                let hard = hard_dequantize(&hard_quantize(y0, vs, t)?, vs)?;
                [universal, hard]
                    .iter()
                    .map(|y| {
                        let (est, f) = one_step(&d, y, t, vs)?;
                        Ok((est.mse(y0)?, f))
                    })
                    .collect()
            })
            .collect()
    })?;
    Ok(GapReport {
        experiment: Experiment::Discretization,
        rows: t_list.to_vec(),
        cols: vec!["universal".into(), "hard".into()],
        trial_mse,
        fallbacks,
    })
}
