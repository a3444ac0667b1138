//! Noise predictors and the deterministic DDIM reverse sampler.
//!
//! The analytic denoisers compute the posterior mean `E[y0 | y_t]` under a
//! diagonal Gaussian-mixture prior, either for the Gaussian forward process
//! `y_t = sqrt(a) * y0 + N(0, 1 - a)` or for the uniform one
//! `y_t = sqrt(a) * y0 + U(-delta/2, delta/2)`.

use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::{QuantizationSchedule, Spacing, VarianceSchedule};
use crate::special::{log_norm_interval, truncated_mean};
use crate::tensor::{channels_of, pairwise_sum, LatentTensor};

// Below this total interval mass the uniform posterior is replaced by a fallback.
const MIN_INTERVAL_MASS_LN: f64 = -690.775_527_898_213_7; // ln(1e-300)
const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GmmComponent {
    pub weight: f64,
    pub mean: f64,
    pub std: f64,
}

/// One-dimensional Gaussian mixture, applied independently to every element.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGmm", into = "RawGmm")]
pub struct GmmSource {
    components: Vec<GmmComponent>,
}

#[derive(Serialize, Deserialize)]
struct RawGmm {
    components: Vec<GmmComponent>,
}

impl TryFrom<RawGmm> for GmmSource {
    type Error = Error;
    fn try_from(raw: RawGmm) -> Result<Self> {
        GmmSource::new(raw.components)
    }
}

impl From<GmmSource> for RawGmm {
    fn from(g: GmmSource) -> Self {
        RawGmm { components: g.components }
    }
}

impl GmmSource {
    /// Weights must be non-negative and sum to 1 within 1e-9; they are then
    /// renormalized exactly.
    pub fn new(mut components: Vec<GmmComponent>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::invalid("mixture needs at least one component"));
        }
        for (i, c) in components.iter().enumerate() {
            if !(c.weight >= 0.0 && c.weight.is_finite()) {
                return Err(Error::invalid(format!("component {i} has weight {}", c.weight)));
            }
            if !c.mean.is_finite() {
                return Err(Error::invalid(format!("component {i} has non-finite mean")));
            }
            if !(c.std > 0.0 && c.std.is_finite()) {
                return Err(Error::invalid(format!("component {i} has std {}", c.std)));
            }
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("weights sum to {total}, not 1")));
        }
        for c in &mut components {
            c.weight /= total;
        }
        Ok(Self { components })
    }

    pub fn gaussian(mean: f64, std: f64) -> Result<Self> {
        Self::new(vec![GmmComponent { weight: 1.0, mean, std }])
    }

    pub fn components(&self) -> &[GmmComponent] {
        &self.components
    }

    pub fn mean(&self) -> f64 {
        self.components.iter().map(|c| c.weight * c.mean).sum()
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.components
            .iter()
            .map(|c| c.weight * (c.std * c.std + (c.mean - m) * (c.mean - m)))
            .sum()
    }

    /// `E[y0^2]`.
    pub fn power(&self) -> f64 {
        self.components
            .iter()
            .map(|c| c.weight * (c.std * c.std + c.mean * c.mean))
            .sum()
    }

    pub fn sample(&self, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let cum: Vec<f64> = self
            .components
            .iter()
            .scan(0.0, |acc, c| {
                *acc += c.weight;
                Some(*acc)
            })
            .collect();
        let last = self.components.len() - 1;
        (0..n)
            .map(|_| {
                let u: f64 = rng.random();
                let k = cum.partition_point(|&c| c <= u).min(last);
                let z: f64 = rng.sample(StandardNormal);
                let c = &self.components[k];
                c.mean + c.std * z
            })
            .collect()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse(format!("mixture: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("mixture serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Posterior mean of `y0` given `y = sqrt(a) * y0 + N(0, 1 - a)`.
    pub fn posterior_mean_gaussian(&self, y: f64, alpha_bar: f64) -> f64 {
        let sa = alpha_bar.sqrt();
        let noise = 1.0 - alpha_bar;
        if self.components.len() == 1 {
            let c = &self.components[0];
            let s2 = c.std * c.std;
            return (c.mean * noise + sa * s2 * y) / (alpha_bar * s2 + noise);
        }
        let term = |c: &GmmComponent| {
            let s2 = c.std * c.std;
            let v = alpha_bar * s2 + noise;
            let r = y - sa * c.mean;
            let logw = c.weight.ln() - 0.5 * r * r / v - 0.5 * v.ln() - LN_SQRT_2PI;
            (logw, (c.mean * noise + sa * s2 * y) / v)
        };
        let best = self.components.iter().map(|c| term(c).0).fold(f64::NEG_INFINITY, f64::max);
        let (mut num, mut den) = (0.0, 0.0);
        for c in &self.components {
            let (lw, mk) = term(c);
            let w = (lw - best).exp();
            num += w * mk;
            den += w;
        }
        num / den
    }

    /// Posterior mean of `y0` given `|y - sqrt(a) * y0| <= delta / 2`.
    ///
    /// Returns `None` when the prior puts less than 1e-300 mass on the
    /// admissible interval.
    pub fn posterior_mean_uniform(&self, y: f64, alpha_bar: f64, delta: f64) -> Option<f64> {
        let sa = alpha_bar.sqrt();
        let lo = (y - 0.5 * delta) / sa;
        let hi = (y + 0.5 * delta) / sa;
        let mut best = f64::NEG_INFINITY;
        let mut slots = Vec::with_capacity(self.components.len());
        for c in &self.components {
            let a = (lo - c.mean) / c.std;
            let b = (hi - c.mean) / c.std;
            let lz = log_norm_interval(a, b);
            let logw = c.weight.ln() + lz;
            let mk = if lz == f64::NEG_INFINITY {
                0.0
            } else {
                (c.mean + c.std * truncated_mean(a, b)).clamp(lo, hi)
            };
            slots.push((logw, mk));
            best = best.max(logw);
        }
        let log_total = best + slots.iter().map(|(lw, _)| (lw - best).exp()).sum::<f64>().ln();
        if !(log_total >= MIN_INTERVAL_MASS_LN) {
            return None;
        }
        Some(weighted_mean(&slots, best))
    }

    /// Fallback for an interval the prior cannot reach: the interval point
    /// nearest the component that is fewest of its own deviations away.
    fn uniform_fallback(&self, y: f64, alpha_bar: f64, delta: f64) -> f64 {
        let sa = alpha_bar.sqrt();
        let lo = (y - 0.5 * delta) / sa;
        let hi = (y + 0.5 * delta) / sa;
        let nearest = self
            .components
            .iter()
            .map(|c| {
                let d = if c.mean < lo { lo - c.mean } else if c.mean > hi { c.mean - hi } else { 0.0 };
                (d / c.std, c.mean)
            })
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .expect("non-empty mixture");
        nearest.1.clamp(lo, hi)
    }
}

fn weighted_mean(slots: &[(f64, f64)], best: f64) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for &(lw, mk) in slots {
        let w = (lw - best).exp();
        num += w * mk;
        den += w;
    }
    num / den
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DenoiserKind {
    GaussianAnalytic,
    GmmGaussian,
    GmmUniformAware,
    Oracle,
}

impl DenoiserKind {
    pub fn tag(self) -> &'static str {
        match self {
            DenoiserKind::GaussianAnalytic => "gaussian-analytic",
            DenoiserKind::GmmGaussian => "gmm-gaussian",
            DenoiserKind::GmmUniformAware => "gmm-uniform-aware",
            DenoiserKind::Oracle => "oracle",
        }
    }
}

/// Output of one denoiser call.
///
/// `clean_hat = (y_t - sqrt(1 - a) * eps_hat) / sqrt(a)` up to rounding.
/// `fallbacks` counts elements whose posterior could not be evaluated.
#[derive(Debug, Clone, PartialEq)]
pub struct EpsEstimate {
    pub eps_hat: LatentTensor,
    pub clean_hat: LatentTensor,
    pub fallbacks: usize,
}

pub trait Denoiser: Sync {
    fn kind(&self) -> DenoiserKind;

    fn predict_eps(&self, y_t: &LatentTensor, t: usize, vs: &VarianceSchedule) -> Result<EpsEstimate>;
}

fn eps_from_clean(y: &[f64], clean: &[f64], alpha_bar: f64) -> Vec<f64> {
    if alpha_bar >= 1.0 {
        return vec![0.0; y.len()];
    }
    let sa = alpha_bar.sqrt();
    let sn = (1.0 - alpha_bar).sqrt();
    y.par_iter().zip(clean.par_iter()).map(|(&y, &c)| (y - sa * c) / sn).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum NoiseModel {
    Gaussian,
    Uniform,
}

/// Prior shared by every element, or one prior per channel of a rank-3 tensor.
#[derive(Debug, Clone, PartialEq)]
pub enum Prior {
    Shared(GmmSource),
    PerChannel(Vec<GmmSource>),
}

impl Prior {
    fn for_shape(&self, shape: &[usize]) -> Result<Vec<&GmmSource>> {
        match self {
            Prior::Shared(g) => Ok(vec![g]),
            Prior::PerChannel(gs) => {
                let c = channels_of(shape);
                if gs.len() != c {
                    return Err(Error::invalid(format!(
                        "prior has {} channels but tensor has {c}",
                        gs.len()
                    )));
                }
                Ok(gs.iter().collect())
            }
        }
    }
}

/// Exact MMSE denoiser for a known diagonal mixture prior.
#[derive(Debug, Clone)]
pub struct PosteriorMeanDenoiser {
    kind: DenoiserKind,
    noise: NoiseModel,
    prior: Prior,
    qs: Option<QuantizationSchedule>,
}

impl PosteriorMeanDenoiser {
    pub fn prior(&self) -> &Prior {
        &self.prior
    }
}

impl Denoiser for PosteriorMeanDenoiser {
    fn kind(&self) -> DenoiserKind {
        self.kind
    }

    fn predict_eps(&self, y_t: &LatentTensor, t: usize, vs: &VarianceSchedule) -> Result<EpsEstimate> {
        let a = vs.alpha_bar(t)?;
        let priors = self.prior.for_shape(y_t.shape())?;
        let per = if y_t.is_empty() { 1 } else { y_t.len() / priors.len() };
        let ys = y_t.values();

        let (clean, fallbacks): (Vec<f64>, usize) = match self.noise {
            NoiseModel::Gaussian => {
                let clean = ys
                    .par_iter()
                    .enumerate()
                    .map(|(i, &y)| priors[i / per].posterior_mean_gaussian(y, a))
                    .collect();
                (clean, 0)
            }
            NoiseModel::Uniform => {
                let delta = match &self.qs {
                    Some(qs) => {
                        if qs.deltas().len() != vs.n_steps() + 1 {
                            return Err(Error::invalid(
                                "quantization schedule length does not match variance schedule",
                            ));
                        }
                        qs.delta(t)?
                    }
                    None => vs.delta_at(t)?,
                };
                if delta <= 0.0 {
                    return Err(Error::InvalidTimestep(t));
                }
                let out: Vec<(f64, bool)> = ys
                    .par_iter()
                    .enumerate()
                    .map(|(i, &y)| {
                        let g = priors[i / per];
                        match g.posterior_mean_uniform(y, a, delta) {
                            Some(m) => (m, false),
                            None => (g.uniform_fallback(y, a, delta), true),
                        }
                    })
                    .collect();
                let fallbacks = out.iter().filter(|o| o.1).count();
                (out.into_iter().map(|o| o.0).collect(), fallbacks)
            }
        };
        let eps = eps_from_clean(ys, &clean, a);
        let shape = y_t.shape().to_vec();
        Ok(EpsEstimate {
            eps_hat: LatentTensor::from_parts(shape.clone(), eps),
            clean_hat: LatentTensor::from_parts(shape, clean),
            fallbacks,
        })
    }
}

/// Posterior mean for a single Gaussian prior under Gaussian noise: a linear
/// shrinkage toward `mean`.
pub fn gaussian_analytic(mean: f64, std: f64) -> Result<PosteriorMeanDenoiser> {
    Ok(PosteriorMeanDenoiser {
        kind: DenoiserKind::GaussianAnalytic,
        noise: NoiseModel::Gaussian,
        prior: Prior::Shared(GmmSource::gaussian(mean, std)?),
        qs: None,
    })
}

pub fn gmm_gaussian_denoiser(src: GmmSource) -> PosteriorMeanDenoiser {
    PosteriorMeanDenoiser {
        kind: DenoiserKind::GmmGaussian,
        noise: NoiseModel::Gaussian,
        prior: Prior::Shared(src),
        qs: None,
    }
}

pub fn gmm_uniform_aware_denoiser(src: GmmSource, qs: QuantizationSchedule) -> PosteriorMeanDenoiser {
    PosteriorMeanDenoiser {
        kind: DenoiserKind::GmmUniformAware,
        noise: NoiseModel::Uniform,
        prior: Prior::Shared(src),
        qs: Some(qs),
    }
}

/// Gaussian-noise denoiser with one prior per channel.
pub fn per_channel_gaussian_denoiser(priors: Vec<GmmSource>) -> PosteriorMeanDenoiser {
    PosteriorMeanDenoiser {
        kind: DenoiserKind::GmmGaussian,
        noise: NoiseModel::Gaussian,
        prior: Prior::PerChannel(priors),
        qs: None,
    }
}

/// Uniform-noise denoiser with one prior per channel; bin widths come from
/// the schedule passed to `predict_eps`.
pub fn per_channel_uniform_aware_denoiser(priors: Vec<GmmSource>) -> PosteriorMeanDenoiser {
    PosteriorMeanDenoiser {
        kind: DenoiserKind::GmmUniformAware,
        noise: NoiseModel::Uniform,
        prior: Prior::PerChannel(priors),
        qs: None,
    }
}

/// Moment-matched Gaussian prior per channel, estimated from a noisy
/// observation `y_t` whose noise variance is `1 - alpha_bar_t`.
pub fn empirical_channel_priors(y_t: &LatentTensor, t: usize, vs: &VarianceSchedule) -> Result<Vec<GmmSource>> {
    const MIN_STD: f64 = 1e-6;
    let a = vs.alpha_bar(t)?;
    let c = y_t.channels();
    if y_t.is_empty() {
        return (0..c).map(|_| GmmSource::gaussian(0.0, 1.0)).collect();
    }
    let per = y_t.len() / c;
    y_t.values()
        .chunks(per)
        .map(|ch| {
            let n = ch.len() as f64;
            let mean = pairwise_sum(ch, |v| v) / n;
            let var = pairwise_sum(ch, |v| (v - mean) * (v - mean)) / n;
            let s2 = (var - (1.0 - a)).max(0.0) / a;
            GmmSource::gaussian(mean / a.sqrt(), s2.sqrt().max(MIN_STD))
        })
        .collect()
}

/// Returns the exact noise it was built with.
#[derive(Debug, Clone)]
pub struct OracleDenoiser {
    eps: LatentTensor,
}

pub fn oracle_denoiser(true_eps: LatentTensor) -> OracleDenoiser {
    OracleDenoiser { eps: true_eps }
}

impl Denoiser for OracleDenoiser {
    fn kind(&self) -> DenoiserKind {
        DenoiserKind::Oracle
    }

    fn predict_eps(&self, y_t: &LatentTensor, t: usize, vs: &VarianceSchedule) -> Result<EpsEstimate> {
        self.eps.ensure_shape(y_t.shape())?;
        let a = vs.alpha_bar(t)?;
        let sa = a.sqrt();
        let sn = (1.0 - a).sqrt();
        let clean = y_t
            .values()
            .iter()
            .zip(self.eps.values())
            .map(|(&y, &e)| (y - sn * e) / sa)
            .collect();
        Ok(EpsEstimate {
            eps_hat: self.eps.clone(),
            clean_hat: LatentTensor::from_parts(y_t.shape().to_vec(), clean),
            fallbacks: 0,
        })
    }
}

/// One deterministic DDIM update from `t` to `t_prev`; returns the new state
/// and the number of denoiser fallbacks.
pub fn ddim_step_counted(
    y_t: &LatentTensor,
    t: usize,
    t_prev: usize,
    d: &dyn Denoiser,
    vs: &VarianceSchedule,
) -> Result<(LatentTensor, usize)> {
    if t_prev >= t {
        return Err(Error::invalid(format!("DDIM step must decrease t, got {t} -> {t_prev}")));
    }
    let a_prev = vs.alpha_bar(t_prev)?;
    vs.alpha_bar(t)?;
    let est = d.predict_eps(y_t, t, vs)?;
    est.clean_hat.ensure_shape(y_t.shape())?;
    let sa = a_prev.sqrt();
    let sn = (1.0 - a_prev).sqrt();
    let out = est
        .clean_hat
        .values()
        .par_iter()
        .zip(est.eps_hat.values().par_iter())
        .map(|(&c, &e)| sa * c + sn * e)
        .collect();
    Ok((LatentTensor::from_parts(y_t.shape().to_vec(), out), est.fallbacks))
}

pub fn ddim_step(
    y_t: &LatentTensor,
    t: usize,
    t_prev: usize,
    d: &dyn Denoiser,
    vs: &VarianceSchedule,
) -> Result<LatentTensor> {
    ddim_step_counted(y_t, t, t_prev, d, vs).map(|(y, _)| y)
}

fn check_steps(t_start: usize, steps: &[usize]) -> Result<()> {
    if steps.first() != Some(&t_start) {
        return Err(Error::invalid(format!("step list must start at {t_start}")));
    }
    if steps.last() != Some(&0) {
        return Err(Error::invalid("step list must end at 0"));
    }
    if steps.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::invalid("step list must be strictly descending"));
    }
    Ok(())
}

/// Folds [`ddim_step`] along `steps`; returns `y_0` and the total fallback count.
pub fn ddim_sample_counted(
    y_t: &LatentTensor,
    t_start: usize,
    steps: &[usize],
    d: &dyn Denoiser,
    vs: &VarianceSchedule,
) -> Result<(LatentTensor, usize)> {
    check_steps(t_start, steps)?;
    vs.alpha_bar(t_start)?;
    fold_steps(y_t, steps, d, vs)
}

fn fold_steps(y_t: &LatentTensor, steps: &[usize], d: &dyn Denoiser, vs: &VarianceSchedule) -> Result<(LatentTensor, usize)> {
    let mut y = y_t.clone();
    let mut fallbacks = 0;
    for w in steps.windows(2) {
        let (next, f) = ddim_step_counted(&y, w[0], w[1], d, vs)?;
        y = next;
        fallbacks += f;
    }
    Ok((y, fallbacks))
}

pub fn ddim_sample(
    y_t: &LatentTensor,
    t_start: usize,
    steps: &[usize],
    d: &dyn Denoiser,
    vs: &VarianceSchedule,
) -> Result<LatentTensor> {
    ddim_sample_counted(y_t, t_start, steps, d, vs).map(|(y, _)| y)
}

/// Like [`ddim_sample`], except the last step returns the denoiser's clean
/// estimate instead of re-noising to `alpha_bar_0`. Built-in schedules clip
/// `alpha_bar_0` below 1, so this is the step that lands on clean data.
pub fn ddim_reconstruct_counted(
    y_t: &LatentTensor,
    t_start: usize,
    steps: &[usize],
    d: &dyn Denoiser,
    vs: &VarianceSchedule,
) -> Result<(LatentTensor, usize)> {
    check_steps(t_start, steps)?;
    vs.alpha_bar(t_start)?;
    if steps.len() == 1 {
        return Ok((y_t.clone(), 0));
    }
    let last = steps[steps.len() - 2];
    let (y, mut fallbacks) = fold_steps(y_t, &steps[..steps.len() - 1], d, vs)?;
    let est = d.predict_eps(&y, last, vs)?;
    est.clean_hat.ensure_shape(y_t.shape())?;
    fallbacks += est.fallbacks;
    Ok((est.clean_hat, fallbacks))
}

/// How the reverse process walks from `t` down to 0.
#[derive(Debug, Clone, PartialEq)]
pub enum StepPath {
    /// `[t, 0]`: one denoiser call.
    Direct,
    /// Every index from `t` down to 0.
    Full,
    /// The indices of an `n`-step sub-grid below `t`, then 0.
    Strided { n: usize, spacing: Spacing },
    /// Explicit list; must start at `t` and end at 0.
    Explicit(Vec<usize>),
}

impl StepPath {
    pub fn steps(&self, t: usize, vs: &VarianceSchedule) -> Result<Vec<usize>> {
        let steps = match self {
            StepPath::Direct if t == 0 => vec![0],
            StepPath::Direct => vec![t, 0],
            StepPath::Full => (0..=t).rev().collect(),
            StepPath::Strided { n, spacing } => {
                let grid = spacing.indices(vs.n_steps(), *n)?;
                let mut s = vec![t];
                s.extend(grid.into_iter().rev().filter(|&k| k < t && k > 0));
                if t > 0 {
                    s.push(0);
                }
                s
            }
            StepPath::Explicit(v) => v.clone(),
        };
        check_steps(t, &steps)?;
        Ok(steps)
    }
}

impl std::str::FromStr for StepPath {
    type Err = Error;

    /// `direct`, `full`, `<n>` or `<n>:<spacing>`, or a comma list `40,30,0`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => return Ok(StepPath::Direct),
            "full" => return Ok(StepPath::Full),
            _ => {}
        }
        if s.contains(',') {
            let v = s
                .split(',')
                .map(|p| p.trim().parse::<usize>().map_err(|e| Error::Parse(format!("step {p:?}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            return Ok(StepPath::Explicit(v));
        }
        let (n, spacing) = match s.split_once(':') {
            Some((n, sp)) => (n, sp.parse()?),
            None => (s, Spacing::Leading),
        };
        let n = n.parse().map_err(|e| Error::Parse(format!("step count {n:?}: {e}")))?;
        Ok(StepPath::Strided { n, spacing })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_point(a_t: f64, a_prev: f64) -> VarianceSchedule {
        VarianceSchedule::from_alphas(vec![1.0, a_prev, a_t]).unwrap()
    }

    #[test]
    fn single_gaussian_closed_form() {
        let g = GmmSource::gaussian(0.3, 0.7).unwrap();
        for &a in &[1e-6f64, 0.1, 0.5, 0.99] {
            for &y in &[-3.0, 0.0, 0.4, 2.5] {
                let want = (0.3 * (1.0 - a) + a.sqrt() * 0.49 * y) / (a * 0.49 + 1.0 - a);
                assert!((g.posterior_mean_gaussian(y, a) - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn mixture_limits() {
        let g = GmmSource::new(vec![
            GmmComponent { weight: 0.3, mean: -1.0, std: 0.4 },
            GmmComponent { weight: 0.7, mean: 2.0, std: 0.5 },
        ])
        .unwrap();
        // no noise: identity
        let a = 1.0 - 1e-12;
        assert!((g.posterior_mean_gaussian(0.77, a) - 0.77).abs() < 1e-5);
        // all noise: prior mean
        assert!((g.posterior_mean_gaussian(0.77, 1e-12) - g.mean()).abs() < 1e-5);
        // interval much wider than the prior: prior mean
        let m = g.posterior_mean_uniform(0.0, 1.0, 1e3).unwrap();
        assert!((m - g.mean()).abs() < 1e-12);
    }

    #[test]
    fn symmetric_truncation_is_centered() {
        let g = GmmSource::gaussian(0.0, 1.0).unwrap();
        assert_eq!(g.posterior_mean_uniform(0.0, 1.0, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn unreachable_interval_falls_back() {
        let g = GmmSource::gaussian(0.0, 1e-3).unwrap();
        assert!(g.posterior_mean_uniform(50.0, 1.0, 0.1).is_none());
        let d = gmm_uniform_aware_denoiser(g, QuantizationSchedule::from_deltas(vec![0.0, 0.1]));
        let vs = VarianceSchedule::from_alphas(vec![1.0, 1.0 - 0.1f64.powi(2) / 12.0]).unwrap();
        let y = LatentTensor::from_flat(vec![50.0, 0.0]).unwrap();
        let est = d.predict_eps(&y, 1, &vs).unwrap();
        assert_eq!(est.fallbacks, 1);
        let lo = (50.0 - 0.05) / vs.alpha_bar(1).unwrap().sqrt();
        assert_eq!(est.clean_hat.values()[0], lo);
    }

    #[test]
    fn hand_ddim_step() {
        let vs = two_point(0.5, 0.8);
        let y_t = LatentTensor::from_flat(vec![0.5f64.sqrt() + 0.5f64.sqrt() * 0.2]).unwrap();
        let d = oracle_denoiser(LatentTensor::from_flat(vec![0.2]).unwrap());
        let out = ddim_step(&y_t, 2, 1, &d, &vs).unwrap();
        let want = 0.8f64.sqrt() + 0.2f64.sqrt() * 0.2;
        assert!((out.values()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn step_to_clean_returns_clean_hat() {
        let vs = VarianceSchedule::cosine(50).unwrap();
        let d = gmm_gaussian_denoiser(GmmSource::gaussian(0.0, 1.0).unwrap());
        let y = LatentTensor::from_flat(vec![0.3, -1.2, 2.0]).unwrap();
        let est = d.predict_eps(&y, 20, &vs).unwrap();
        let out = ddim_step(&y, 20, 0, &d, &vs).unwrap();
        // alpha_bar_0 is clipped just below 1
        for (o, c) in out.values().iter().zip(est.clean_hat.values()) {
            assert!((o - c).abs() < 1e-2);
        }
        let exact = VarianceSchedule::from_alphas(vec![1.0, 0.5]).unwrap();
        let est = d.predict_eps(&y, 1, &exact).unwrap();
        assert_eq!(ddim_step(&y, 1, 0, &d, &exact).unwrap(), est.clean_hat);
    }

    #[test]
    fn reconstruct_matches_sample_when_alpha_bar_0_is_one() {
        let vs = VarianceSchedule::from_alphas(vec![1.0, 0.9, 0.6, 0.3]).unwrap();
        let d = gmm_gaussian_denoiser(GmmSource::gaussian(0.2, 1.3).unwrap());
        let y = LatentTensor::from_flat(vec![0.3, -1.2, 2.0]).unwrap();
        let steps = [3, 1, 0];
        let (a, _) = ddim_reconstruct_counted(&y, 3, &steps, &d, &vs).unwrap();
        let b = ddim_sample(&y, 3, &steps, &d, &vs).unwrap();
        for (x, z) in a.values().iter().zip(b.values()) {
            assert!((x - z).abs() < 1e-14);
        }
    }

    #[test]
    fn step_list_validation() {
        let vs = VarianceSchedule::cosine(50).unwrap();
        let d = gmm_gaussian_denoiser(GmmSource::gaussian(0.0, 1.0).unwrap());
        let y = LatentTensor::zeros(vec![4]);
        assert!(ddim_sample(&y, 40, &[40, 30, 30, 0], &d, &vs).is_err());
        assert!(ddim_sample(&y, 40, &[30, 0], &d, &vs).is_err());
        assert!(ddim_sample(&y, 40, &[40, 10], &d, &vs).is_err());
        assert!(ddim_sample(&y, 40, &[40, 30, 20, 10, 5, 1, 0], &d, &vs).is_ok());
        assert!(ddim_step(&y, 5, 5, &d, &vs).is_err());
        assert_eq!(ddim_sample(&y, 0, &[0], &d, &vs).unwrap(), y);
    }

    #[test]
    fn step_paths() {
        let vs = VarianceSchedule::cosine(50).unwrap();
        assert_eq!(StepPath::Direct.steps(7, &vs).unwrap(), vec![7, 0]);
        assert_eq!(StepPath::Full.steps(3, &vs).unwrap(), vec![3, 2, 1, 0]);
        let p: StepPath = "10".parse().unwrap();
        assert_eq!(p.steps(23, &vs).unwrap(), vec![23, 20, 15, 10, 5, 0]);
        let p: StepPath = "40,30,0".parse().unwrap();
        assert_eq!(p.steps(40, &vs).unwrap(), vec![40, 30, 0]);
        assert!(p.steps(41, &vs).is_err());
    }

    #[test]
    fn oracle_rejects_shape_mismatch() {
        let vs = VarianceSchedule::cosine(50).unwrap();
        let d = oracle_denoiser(LatentTensor::zeros(vec![3]));
        assert!(d.predict_eps(&LatentTensor::zeros(vec![4]), 3, &vs).is_err());
    }

    #[test]
    fn json_round_trip_and_validation() {
        let g = GmmSource::new(vec![
            GmmComponent { weight: 0.25, mean: -1.0, std: 0.3 },
            GmmComponent { weight: 0.75, mean: 1.0, std: 0.6 },
        ])
        .unwrap();
        assert_eq!(GmmSource::from_json(&g.to_json()).unwrap(), g);
        assert!(GmmSource::from_json(r#"{"components":[{"weight":0.5,"mean":0,"std":1}]}"#).is_err());
        assert!(GmmSource::from_json(r#"{"components":[{"weight":1,"mean":0,"std":0}]}"#).is_err());
    }

    #[test]
    fn sampling_is_seeded() {
        let g = GmmSource::gaussian(0.0, 1.0).unwrap();
        assert_eq!(g.sample(100, 4), g.sample(100, 4));
        assert_ne!(g.sample(100, 4), g.sample(100, 5));
    }

    #[test]
    fn empirical_prior_recovers_moments() {
        let vs = VarianceSchedule::cosine(50).unwrap();
        let t = 10;
        let a = vs.alpha_bar(t).unwrap();
        let g = GmmSource::gaussian(0.5, 2.0).unwrap();
        let y0 = g.sample(200_000, 1);
        let noise = GmmSource::gaussian(0.0, 1.0).unwrap().sample(200_000, 2);
        let yt: Vec<f64> = y0.iter().zip(&noise).map(|(y, e)| a.sqrt() * y + (1.0 - a).sqrt() * e).collect();
        let p = empirical_channel_priors(&LatentTensor::from_flat(yt).unwrap(), t, &vs).unwrap();
        let c = p[0].components()[0];
        assert!((c.mean - 0.5).abs() < 0.02, "{c:?}");
        assert!((c.std - 2.0).abs() < 0.02, "{c:?}");
    }
}
