//! Universal (subtractively dithered) quantization in scaled-symbol form,
//! plus the hard-rounding baseline.
//!
//! Sender and receiver share a dither field `u ~ U[-1/2, 1/2)` per element.
//! The sender transmits `z = round(sqrt(alpha_bar) * y0 / delta - u)` and the
//! receiver reconstructs `(z + u) * delta`. The reconstruction error is
//! uniform on `[-delta/2, delta/2]` and independent of `y0`.
//!
//! Rounding is ties-to-even everywhere.

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::schedule::VarianceSchedule;
use crate::tensor::LatentTensor;

/// Smallest transmittable symbol.
pub const SYMBOL_MIN: i32 = -(1 << 15);
/// Largest transmittable symbol.
pub const SYMBOL_MAX: i32 = (1 << 15) - 1;

// Separates dither streams from any other use of the same seed.
const DITHER_DOMAIN: &[u8; 8] = b"uqdither";
const CHUNK: usize = 1 << 15;
const INV_2_53: f64 = 1.0 / (1u64 << 53) as f64;

/// Shared dither in scaled-bin units.
#[derive(Debug, Clone, PartialEq)]
pub struct DitherField {
    pub seed: u64,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

fn dither_rng(seed: u64) -> ChaCha20Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(DITHER_DOMAIN);
    ChaCha20Rng::from_seed(key)
}

/// Element `i` is drawn from the 64-bit word at position `i` of the ChaCha20
/// stream keyed by `seed`, so any sub-range can be regenerated on its own.
pub fn dither_values(seed: u64, len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    out.par_chunks_mut(CHUNK).enumerate().for_each(|(ci, chunk)| {
        let mut rng = dither_rng(seed);
        rng.set_word_pos(2 * (ci * CHUNK) as u128);
        for v in chunk.iter_mut() {
            *v = (rng.next_u64() >> 11) as f64 * INV_2_53 - 0.5;
        }
    });
    out
}

pub fn sample_dither(seed: u64, shape: &[usize]) -> DitherField {
    let n = shape.iter().product();
    DitherField {
        seed,
        shape: shape.to_vec(),
        values: dither_values(seed, n),
    }
}

/// Integer symbols plus everything the receiver needs to rescale them.
///
/// `seed` is `None` for hard-quantized data.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLatent {
    pub symbols: Vec<i32>,
    pub t: usize,
    pub seed: Option<u64>,
    pub shape: Vec<usize>,
}

fn bin_width(vs: &VarianceSchedule, t: usize) -> Result<(f64, f64)> {
    let a = vs.alpha_bar(t)?;
    let delta = vs.delta_at(t)?;
    if delta <= 0.0 {
        return Err(Error::InvalidTimestep(t));
    }
    Ok((a.sqrt(), delta))
}

fn to_symbol(x: f64) -> Result<i32> {
    let r = x.round_ties_even();
    if !(r >= SYMBOL_MIN as f64 && r <= SYMBOL_MAX as f64) {
        return Err(Error::AlphabetOverflow {
            symbol: if r.is_nan() { i64::MAX } else { r as i64 },
            min: SYMBOL_MIN as i64,
            max: SYMBOL_MAX as i64,
        });
    }
    Ok(r as i32)
}

/// Quantizes with explicit offsets (scaled-bin units). `offsets` must match
/// `y0` in length; pass zeros to force `u = 0`.
pub fn quantize_with_offsets(
    y0: &LatentTensor,
    vs: &VarianceSchedule,
    t: usize,
    offsets: &[f64],
) -> Result<Vec<i32>> {
    if offsets.len() != y0.len() {
        return Err(Error::invalid("offset count does not match tensor length"));
    }
    let (scale, delta) = bin_width(vs, t)?;
    y0.values()
        .par_iter()
        .zip(offsets.par_iter())
        .map(|(&y, &u)| to_symbol(scale * y / delta - u))
        .collect()
}

/// Reconstructs `(z + u) * delta` elementwise.
pub fn reconstruct_with_offsets(symbols: &[i32], offsets: &[f64], delta: f64) -> Vec<f64> {
    symbols
        .par_iter()
        .zip(offsets.par_iter())
        .map(|(&z, &u)| (z as f64 + u) * delta)
        .collect()
}

pub fn forward_quantize(
    y0: &LatentTensor,
    vs: &VarianceSchedule,
    t: usize,
    seed: u64,
) -> Result<QuantizedLatent> {
    bin_width(vs, t)?;
    let u = dither_values(seed, y0.len());
    Ok(QuantizedLatent {
        symbols: quantize_with_offsets(y0, vs, t, &u)?,
        t,
        seed: Some(seed),
        shape: y0.shape().to_vec(),
    })
}

/// Inverts either quantizer. Dithered latents regenerate `u` from their seed.
pub fn dequantize(q: &QuantizedLatent, vs: &VarianceSchedule) -> Result<LatentTensor> {
    let n: usize = q.shape.iter().product();
    if n != q.symbols.len() {
        return Err(Error::invalid(format!(
            "shape {:?} does not match {} symbols",
            q.shape,
            q.symbols.len()
        )));
    }
    let (_, delta) = bin_width(vs, q.t)?;
    let values = match q.seed {
        Some(seed) => reconstruct_with_offsets(&q.symbols, &dither_values(seed, n), delta),
        None => q.symbols.iter().map(|&z| z as f64 * delta).collect(),
    };
    Ok(LatentTensor::from_parts(q.shape.clone(), values))
}

pub fn hard_quantize(y0: &LatentTensor, vs: &VarianceSchedule, t: usize) -> Result<QuantizedLatent> {
    let zeros = vec![0.0; y0.len()];
    Ok(QuantizedLatent {
        symbols: quantize_with_offsets(y0, vs, t, &zeros)?,
        t,
        seed: None,
        shape: y0.shape().to_vec(),
    })
}

pub fn hard_dequantize(q: &QuantizedLatent, vs: &VarianceSchedule) -> Result<LatentTensor> {
    if q.seed.is_some() {
        return Err(Error::invalid("latent was quantized with dither; use dequantize"));
    }
    dequantize(q, vs)
}
