//! Variance schedules and the quantization schedule derived from them.
//!
//! Timestep `t = 0` is clean data and `t = N` is maximal noise. A schedule
//! stores the cumulative signal fraction `alpha_bar[t]` for `t = 0..=N`.
//!
//! The quantization schedule picks the bin width of a uniform quantizer so
//! that the dither noise it injects has exactly the variance of the Gaussian
//! noise at the same timestep: `delta^2 / 12 = 1 - alpha_bar`, hence
//! `delta = sqrt(12 * (1 - alpha_bar))`.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Lower clip bound for built-in schedules.
pub const ALPHA_BAR_MIN: f64 = 1e-6;
/// Upper clip bound for built-in schedules.
pub const ALPHA_BAR_MAX: f64 = 1.0 - 1e-6;

const COSINE_OFFSET: f64 = 0.008;

/// Bin width whose uniform noise variance equals `1 - alpha_bar`.
pub fn delta_for_alpha_bar(alpha_bar: f64) -> f64 {
    (12.0 * (1.0 - alpha_bar)).max(0.0).sqrt()
}

/// Signal-to-noise ratio. Zero noise power is reported as [`Snr::Infinite`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Snr {
    Finite(f64),
    Infinite,
}

impl Snr {
    pub fn from_powers(signal_power: f64, noise_power: f64) -> Self {
        if noise_power <= 0.0 {
            Snr::Infinite
        } else {
            Snr::Finite(signal_power / noise_power)
        }
    }

    pub fn value(self) -> f64 {
        match self {
            Snr::Finite(v) => v,
            Snr::Infinite => f64::INFINITY,
        }
    }

    pub fn is_infinite(self) -> bool {
        matches!(self, Snr::Infinite)
    }
}

/// SNR of `sqrt(alpha_bar) * y0 + noise` given `E[y0^2]` and the noise variance.
pub fn snr_with_noise_variance(alpha_bar: f64, signal_power: f64, noise_variance: f64) -> Snr {
    Snr::from_powers(alpha_bar * signal_power, noise_variance)
}

/// How a coarse timestep grid is mapped onto a fine schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Spacing {
    /// Coarse step `k` maps to `k * (N / n)` (integer ratio).
    #[default]
    Leading,
    /// Coarse step `k` maps to `round(k * N / n)`.
    Linspace,
}

impl Spacing {
    /// Fine-schedule indices of coarse steps `0..=n`, ascending.
    pub fn indices(self, big_n: usize, n: usize) -> Result<Vec<usize>> {
        if n == 0 || n > big_n {
            return Err(Error::invalid(format!("cannot take {n} steps from a {big_n}-step schedule")));
        }
        Ok((0..=n)
            .map(|k| match self {
                Spacing::Leading => k * (big_n / n),
                Spacing::Linspace => ((k * big_n) as f64 / n as f64).round() as usize,
            })
            .collect())
    }
}

impl std::str::FromStr for Spacing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "leading" => Ok(Spacing::Leading),
            "linspace" => Ok(Spacing::Linspace),
            other => Err(Error::Parse(format!("unknown spacing `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceSchedule {
    alphas: Vec<f64>,
}

impl VarianceSchedule {
    /// Accepts any strictly decreasing sequence with `alpha_bar[0] in (0, 1]`
    /// and every later entry in `(0, 1)`.
    pub fn from_alphas(alphas: Vec<f64>) -> Result<Self> {
        if alphas.len() < 2 {
            return Err(Error::invalid("a schedule needs at least one step"));
        }
        for (t, &a) in alphas.iter().enumerate() {
            let upper_ok = if t == 0 { a <= 1.0 } else { a < 1.0 };
            if !(a.is_finite() && a > 0.0 && upper_ok) {
                return Err(Error::invalid(format!("alpha_bar[{t}] = {a} is outside (0, 1)")));
            }
        }
        if let Some(t) = alphas.windows(2).position(|w| w[1] >= w[0]) {
            return Err(Error::invalid(format!(
                "alpha_bar must be strictly decreasing (violated between t={t} and t={})",
                t + 1
            )));
        }
        Ok(Self { alphas })
    }

    /// DDPM-style schedule: `beta` linearly spaced over `t = 1..=N` and
    /// `alpha_bar[t] = prod_{s<=t} (1 - beta_s)`.
    pub fn linear(n_steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::invalid("n_steps must be at least 1"));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::invalid(format!(
                "require 0 < beta_min <= beta_max < 1, got beta_min={beta_min}, beta_max={beta_max}"
            )));
        }
        let mut alphas = Vec::with_capacity(n_steps + 1);
        alphas.push(1.0);
        let mut prod = 1.0;
        for s in 1..=n_steps {
            let beta = if n_steps == 1 {
                beta_min
            } else {
                beta_min + (beta_max - beta_min) * (s - 1) as f64 / (n_steps - 1) as f64
            };
            prod *= 1.0 - beta;
            alphas.push(prod);
        }
        Self::from_alphas(clip(alphas))
    }

    /// Squared-cosine schedule with the usual small offset at `t = 0`.
    pub fn cosine(n_steps: usize) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::invalid("n_steps must be at least 1"));
        }
        let f = |t: usize| {
            let x = (t as f64 / n_steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
            (x * std::f64::consts::FRAC_PI_2).cos().powi(2)
        };
        let f0 = f(0);
        let alphas = (0..=n_steps).map(|t| f(t) / f0).collect();
        Self::from_alphas(clip(alphas))
    }

    /// Parses `linear`, `linear:<n>:<beta_min>:<beta_max>`, `cosine`,
    /// `cosine:<n>` or `file:<path>`.
    ///
    /// Bare `linear` is the 1000-step DDPM schedule (1e-4 .. 0.02); bare
    /// `cosine` has 50 steps.
    pub fn from_spec(spec: &str) -> Result<Self> {
        let parts: Vec<&str> = spec.splitn(2, ':').collect();
        let num = |s: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|e| Error::Parse(format!("`{s}`: {e}")))
        };
        let count = |s: &str| -> Result<usize> {
            s.parse::<usize>().map_err(|e| Error::Parse(format!("`{s}`: {e}")))
        };
        match parts.as_slice() {
            ["linear"] => Self::linear(1000, 1e-4, 0.02),
            ["linear", rest] => {
                let p: Vec<&str> = rest.split(':').collect();
                if p.len() != 3 {
                    return Err(Error::Parse(format!("expected linear:<n>:<beta_min>:<beta_max>, got `{spec}`")));
                }
                Self::linear(count(p[0])?, num(p[1])?, num(p[2])?)
            }
            ["cosine"] => Self::cosine(50),
            ["cosine", n] => Self::cosine(count(n)?),
            ["file", path] => Self::load(path),
            _ => Err(Error::Parse(format!("unknown schedule `{spec}`"))),
        }
    }

    pub fn n_steps(&self) -> usize {
        self.alphas.len() - 1
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alphas.get(t).copied().ok_or(Error::IndexOutOfRange {
            t,
            n_steps: self.n_steps(),
        })
    }

    pub fn delta_at(&self, t: usize) -> Result<f64> {
        Ok(delta_for_alpha_bar(self.alpha_bar(t)?))
    }

    pub fn snr_theoretical(&self, t: usize, signal_power: f64) -> Result<Snr> {
        if signal_power < 0.0 {
            return Err(Error::invalid("signal power must be non-negative"));
        }
        let a = self.alpha_bar(t)?;
        Ok(snr_with_noise_variance(a, signal_power, 1.0 - a))
    }

    pub fn quantization_schedule(&self) -> QuantizationSchedule {
        QuantizationSchedule {
            deltas: self.alphas.iter().map(|&a| delta_for_alpha_bar(a)).collect(),
        }
    }

    /// Restricts the schedule to `n` coarse steps, keeping `t = 0`.
    pub fn subsample(&self, n: usize, spacing: Spacing) -> Result<Self> {
        let idx = spacing.indices(self.n_steps(), n)?;
        Self::from_alphas(idx.into_iter().map(|k| self.alphas[k]).collect())
    }

    /// First 8 bytes of SHA-256 over the step count and the raw bits of every
    /// `alpha_bar`.
    pub fn fingerprint(&self) -> [u8; 8] {
        let mut h = Sha256::new();
        h.update((self.n_steps() as u64).to_le_bytes());
        for a in &self.alphas {
            h.update(a.to_bits().to_le_bytes());
        }
        let digest = h.finalize();
        let mut out = [0u8; 8];
        out.copy_from_slice(&digest[..8]);
        out
    }

    /// Plain-text form: the step count on the first line, then `N + 1`
    /// decimal values. Values print in shortest round-trip form, so parsing
    /// the text restores the schedule bit for bit.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{}", self.n_steps()).unwrap();
        for a in &self.alphas {
            writeln!(s, "{a}").unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        let n: usize = lines
            .next()
            .ok_or_else(|| Error::Parse("empty schedule file".into()))?
            .parse()
            .map_err(|e| Error::Parse(format!("step count: {e}")))?;
        let alphas = lines
            .map(|l| l.parse::<f64>().map_err(|e| Error::Parse(format!("`{l}`: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        if alphas.len() != n + 1 {
            return Err(Error::Parse(format!(
                "header declares {n} steps but {} values follow (expected {})",
                alphas.len(),
                n + 1
            )));
        }
        Self::from_alphas(alphas)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

fn clip(alphas: Vec<f64>) -> Vec<f64> {
    alphas
        .into_iter()
        .map(|a| a.clamp(ALPHA_BAR_MIN, ALPHA_BAR_MAX))
        .collect()
}

/// Per-timestep bin widths matched to a variance schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizationSchedule {
    deltas: Vec<f64>,
}

impl QuantizationSchedule {
    pub fn from_deltas(deltas: Vec<f64>) -> Self {
        Self { deltas }
    }

    pub fn deltas(&self) -> &[f64] {
        &self.deltas
    }

    pub fn delta(&self, t: usize) -> Result<f64> {
        self.deltas.get(t).copied().ok_or(Error::IndexOutOfRange {
            t,
            n_steps: self.deltas.len().saturating_sub(1),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_single_step() {
        let vs = VarianceSchedule::linear(1, 0.5, 0.5).unwrap();
        assert_eq!(vs.alpha_bar(1).unwrap(), 0.5);
        assert_eq!(vs.alpha_bar(0).unwrap(), ALPHA_BAR_MAX);
    }

    #[test]
    fn linear_two_steps() {
        let vs = VarianceSchedule::linear(2, 0.5, 0.5).unwrap();
        assert_eq!(vs.alpha_bar(2).unwrap(), 0.25);
    }

    #[test]
    fn linear_ddpm_matches_direct_product() {
        let vs = VarianceSchedule::linear(1000, 1e-4, 0.02).unwrap();
        // oracle: accumulate log(1 - beta) instead of the running product
        let mut log_sum = 0.0f64;
        for s in 1..=1000usize {
            let beta = 1e-4 + (0.02 - 1e-4) * (s - 1) as f64 / 999.0;
            log_sum += (1.0 - beta).ln();
            let a = vs.alpha_bar(s).unwrap();
            assert!((a - log_sum.exp()).abs() <= 1e-12 * log_sum.exp().max(1e-300));
        }
        assert!(vs.alpha_bar(1000).unwrap() < 1e-4);
        assert!(vs.alphas().windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn linear_rejects_bad_parameters() {
        assert!(VarianceSchedule::linear(0, 0.1, 0.2).is_err());
        assert!(VarianceSchedule::linear(10, 0.0, 0.2).is_err());
        assert!(VarianceSchedule::linear(10, 0.3, 0.2).is_err());
        assert!(VarianceSchedule::linear(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn cosine_endpoints_and_monotonicity() {
        let vs = VarianceSchedule::cosine(10).unwrap();
        assert_eq!(vs.alpha_bar(0).unwrap(), ALPHA_BAR_MAX);
        assert_eq!(vs.alpha_bar(10).unwrap(), ALPHA_BAR_MIN);
        let f = |t: f64| (((t / 10.0 + 0.008) / 1.008) * std::f64::consts::FRAC_PI_2).cos().powi(2);
        for t in 1..10 {
            let expect = f(t as f64) / f(0.0);
            assert!((vs.alpha_bar(t).unwrap() - expect).abs() < 1e-15);
        }
        assert!(vs.alphas().windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn delta_examples() {
        assert_eq!(delta_for_alpha_bar(1.0), 0.0);
        assert!((delta_for_alpha_bar(0.25) - 3.0).abs() < 1e-15);
        assert!((delta_for_alpha_bar(0.75) - 3f64.sqrt()).abs() < 1e-15);
        let vs = VarianceSchedule::from_alphas(vec![1.0, 0.75, 0.25]).unwrap();
        assert_eq!(vs.delta_at(0).unwrap(), 0.0);
        assert!((vs.delta_at(2).unwrap() - 3.0).abs() < 1e-15);
        assert!(matches!(vs.delta_at(3), Err(Error::IndexOutOfRange { t: 3, n_steps: 2 })));
    }

    #[test]
    fn snr_examples() {
        let vs = VarianceSchedule::from_alphas(vec![1.0, 0.5, 0.25]).unwrap();
        assert_eq!(vs.snr_theoretical(1, 1.0).unwrap(), Snr::Finite(1.0));
        assert!(vs.snr_theoretical(0, 1.0).unwrap().is_infinite());
        let Snr::Finite(v) = vs.snr_theoretical(2, 4.0).unwrap() else { panic!() };
        assert!((v - 4.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn quantization_schedule_tracks_noise_variance() {
        let vs = VarianceSchedule::cosine(50).unwrap();
        let qs = vs.quantization_schedule();
        for (t, &d) in qs.deltas().iter().enumerate() {
            let a = vs.alpha_bar(t).unwrap();
            assert!((d * d / 12.0 - (1.0 - a)).abs() <= 1e-15);
        }
        assert!(qs.deltas().windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn text_round_trip_is_bit_exact() {
        for vs in [
            VarianceSchedule::linear(1000, 1e-4, 0.02).unwrap(),
            VarianceSchedule::cosine(37).unwrap(),
        ] {
            let back = VarianceSchedule::from_text(&vs.to_text()).unwrap();
            assert_eq!(back, vs);
            assert_eq!(back.fingerprint(), vs.fingerprint());
        }
    }

    #[test]
    fn from_text_rejects_count_mismatch_and_non_monotone() {
        assert!(VarianceSchedule::from_text("2\n0.9\n0.5\n").is_err());
        assert!(VarianceSchedule::from_text("2\n0.9\n0.5\n0.6\n").is_err());
        assert!(VarianceSchedule::from_text("1\n0.9\n1.0\n").is_err());
    }

    #[test]
    fn subsample_leading() {
        let fine = VarianceSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let coarse = fine.subsample(50, Spacing::Leading).unwrap();
        assert_eq!(coarse.n_steps(), 50);
        assert_eq!(coarse.alpha_bar(1).unwrap(), fine.alpha_bar(20).unwrap());
        assert_eq!(coarse.alpha_bar(50).unwrap(), fine.alpha_bar(1000).unwrap());
        assert!(fine.subsample(1001, Spacing::Leading).is_err());
    }

    #[test]
    fn spec_strings() {
        assert_eq!(VarianceSchedule::from_spec("cosine").unwrap().n_steps(), 50);
        assert_eq!(VarianceSchedule::from_spec("linear").unwrap().n_steps(), 1000);
        assert_eq!(VarianceSchedule::from_spec("linear:2:0.5:0.5").unwrap().alpha_bar(2).unwrap(), 0.25);
        assert!(VarianceSchedule::from_spec("quadratic").is_err());
    }

    #[test]
    fn fingerprint_distinguishes_schedules() {
        let a = VarianceSchedule::cosine(50).unwrap();
        let b = VarianceSchedule::cosine(51).unwrap();
        assert_ne!(a.fingerprint(), b.fingerprint());
    }
}
