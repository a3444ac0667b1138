//! Per-channel parametric symbol models and an rANS coder.
//!
//! Symbols are always coded in scaled (unit-bin) space, so the probability of
//! symbol `k` is the density integrated over `[k - 1/2, k + 1/2]`, i.e. the
//! density convolved with a unit box and sampled at `k`. Mass outside the
//! channel's alphabet `[k_min, k_max]` is folded into the two edge bins.
//!
//! The coder works on 16-bit integer frequency tables derived only from the
//! serialized (32-bit float) model parameters, so identical headers give
//! identical tables on every machine.

use crate::error::{Error, Result};
use crate::quantizer::{SYMBOL_MAX, SYMBOL_MIN};
use crate::special::norm_interval;

pub const PRECISION_BITS: u32 = 16;
const TOTAL_FREQ: u32 = 1 << PRECISION_BITS;
/// Widest per-channel alphabet the coder accepts. The one-count escape floor
/// then takes at most 1/16 of the probability mass.
pub const MAX_ALPHABET_SIZE: usize = 1 << 12;
/// Scale floor in scaled-symbol units.
pub const SIGMA_FLOOR: f64 = 1e-3;

const RANS_L: u32 = 1 << 23;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DensityFamily {
    Normal,
    Logistic,
    /// Flat over the alphabet; location and scale are ignored.
    Uniform,
}

impl DensityFamily {
    fn tag(self) -> u8 {
        match self {
            DensityFamily::Normal => 0,
            DensityFamily::Logistic => 1,
            DensityFamily::Uniform => 2,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(DensityFamily::Normal),
            1 => Ok(DensityFamily::Logistic),
            2 => Ok(DensityFamily::Uniform),
            t => Err(Error::corrupt(format!("unknown density family tag {t}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelParams {
    pub mean: f32,
    pub scale: f32,
    pub k_min: i16,
    pub k_max: i16,
}

impl ChannelParams {
    pub fn alphabet_size(&self) -> usize {
        (self.k_max as i32 - self.k_min as i32 + 1) as usize
    }

    pub fn contains(&self, k: i32) -> bool {
        (self.k_min as i32..=self.k_max as i32).contains(&k)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SymbolModel {
    family: DensityFamily,
    channels: Vec<ChannelParams>,
}

pub const CHANNEL_PARAM_BYTES: usize = 12;

impl SymbolModel {
    pub fn new(family: DensityFamily, channels: Vec<ChannelParams>) -> Result<Self> {
        for (c, p) in channels.iter().enumerate() {
            if !(p.scale.is_finite() && p.scale > 0.0 && p.mean.is_finite()) {
                return Err(Error::invalid(format!("channel {c}: location/scale must be finite with scale > 0")));
            }
            if p.k_min > p.k_max {
                return Err(Error::invalid(format!("channel {c}: empty alphabet")));
            }
            if p.alphabet_size() > MAX_ALPHABET_SIZE {
                return Err(Error::AlphabetTooWide {
                    channel: c,
                    size: p.alphabet_size(),
                    max: MAX_ALPHABET_SIZE,
                });
            }
        }
        Ok(Self { family, channels })
    }

    pub fn family(&self) -> DensityFamily {
        self.family
    }

    pub fn channels(&self) -> &[ChannelParams] {
        &self.channels
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    fn params(&self, channel: usize) -> Result<&ChannelParams> {
        self.channels
            .get(channel)
            .ok_or_else(|| Error::invalid(format!("model has no channel {channel}")))
    }

    /// Probability of symbol `k`: `c(k + 1/2) - c(k - 1/2)` with the tails
    /// folded into the edge bins.
    pub fn bin_probability(&self, channel: usize, k: i32) -> Result<f64> {
        let p = self.params(channel)?;
        if !p.contains(k) {
            return Err(Error::AlphabetOverflow {
                symbol: k as i64,
                min: p.k_min as i64,
                max: p.k_max as i64,
            });
        }
        Ok(bin_mass(self.family, p, k))
    }

    /// Integer frequency table at [`PRECISION_BITS`] precision. Every symbol
    /// gets at least one count and the counts sum to exactly `2^16`.
    pub fn frequency_table(&self, channel: usize) -> Result<FrequencyTable> {
        let p = self.params(channel)?;
        Ok(FrequencyTable::from_params(self.family, p))
    }

    pub fn to_bytes(&self, out: &mut Vec<u8>) {
        out.push(self.family.tag());
        out.extend_from_slice(&(self.channels.len() as u32).to_le_bytes());
        for p in &self.channels {
            out.extend_from_slice(&p.mean.to_le_bytes());
            out.extend_from_slice(&p.scale.to_le_bytes());
            out.extend_from_slice(&p.k_min.to_le_bytes());
            out.extend_from_slice(&p.k_max.to_le_bytes());
        }
    }

    /// Parses a model from the front of `bytes`, returning it with the number
    /// of bytes consumed.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, usize)> {
        let short = || Error::corrupt("truncated symbol model");
        let family = DensityFamily::from_tag(*bytes.first().ok_or_else(short)?)?;
        let n = u32::from_le_bytes(bytes.get(1..5).ok_or_else(short)?.try_into().unwrap()) as usize;
        let body = n.checked_mul(CHANNEL_PARAM_BYTES).ok_or_else(short)?;
        let data = bytes.get(5..5 + body).ok_or_else(short)?;
        let channels = data
            .chunks_exact(CHANNEL_PARAM_BYTES)
            .map(|c| ChannelParams {
                mean: f32::from_le_bytes(c[0..4].try_into().unwrap()),
                scale: f32::from_le_bytes(c[4..8].try_into().unwrap()),
                k_min: i16::from_le_bytes(c[8..10].try_into().unwrap()),
                k_max: i16::from_le_bytes(c[10..12].try_into().unwrap()),
            })
            .collect();
        let model = Self::new(family, channels).map_err(|e| Error::corrupt(e.to_string()))?;
        Ok((model, 5 + body))
    }
}

fn bin_mass(family: DensityFamily, p: &ChannelParams, k: i32) -> f64 {
    let mu = p.mean as f64;
    let sigma = p.scale as f64;
    let lo = if k == p.k_min as i32 { f64::NEG_INFINITY } else { (k as f64 - 0.5 - mu) / sigma };
    let hi = if k == p.k_max as i32 { f64::INFINITY } else { (k as f64 + 0.5 - mu) / sigma };
    match family {
        DensityFamily::Normal => norm_interval(lo, hi),
        DensityFamily::Logistic => logistic_interval(lo, hi),
        DensityFamily::Uniform => 1.0 / p.alphabet_size() as f64,
    }
}

fn logistic_interval(a: f64, b: f64) -> f64 {
    // upper-tail form when the bin is right of the mode
    let sig = |x: f64| 1.0 / (1.0 + libm::exp(-x));
    let upper = |x: f64| 1.0 / (1.0 + libm::exp(x));
    if a >= 0.0 {
        upper(a) - upper(b)
    } else {
        sig(b) - sig(a)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrequencyTable {
    k_min: i32,
    /// Cumulative counts, `cum[0] = 0`, `cum[n] = 2^16`.
    cum: Vec<u32>,
}

impl FrequencyTable {
    fn from_params(family: DensityFamily, p: &ChannelParams) -> Self {
        let n = p.alphabet_size();
        let k_min = p.k_min as i32;
        let spare = (TOTAL_FREQ as usize - n) as f64;
        let mut freq = Vec::with_capacity(n);
        let mut frac = Vec::with_capacity(n);
        for i in 0..n {
            let scaled = bin_mass(family, p, k_min + i as i32).max(0.0) * spare;
            let whole = scaled.floor();
            freq.push(1 + whole as u32);
            frac.push(scaled - whole);
        }
        let assigned: u32 = freq.iter().sum();
        let mut remainder = TOTAL_FREQ.saturating_sub(assigned) as usize;
        if remainder > 0 {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&i, &j| frac[j].total_cmp(&frac[i]).then(i.cmp(&j)));
            for &i in order.iter().cycle() {
                if remainder == 0 {
                    break;
                }
                freq[i] += 1;
                remainder -= 1;
            }
        }
        let mut cum = Vec::with_capacity(n + 1);
        cum.push(0u32);
        for f in freq {
            cum.push(cum.last().unwrap() + f);
        }
        debug_assert_eq!(*cum.last().unwrap(), TOTAL_FREQ);
        Self { k_min, cum }
    }

    pub fn len(&self) -> usize {
        self.cum.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn freq(&self, k: i32) -> Option<u32> {
        self.range(k).map(|(_, f)| f)
    }

    fn range(&self, k: i32) -> Option<(u32, u32)> {
        let i = k.checked_sub(self.k_min)?;
        if i < 0 || i as usize >= self.len() {
            return None;
        }
        let i = i as usize;
        Some((self.cum[i], self.cum[i + 1] - self.cum[i]))
    }

    fn lookup(&self, slot: u32) -> (i32, u32, u32) {
        let i = self.cum.partition_point(|&c| c <= slot) - 1;
        (self.k_min + i as i32, self.cum[i], self.cum[i + 1] - self.cum[i])
    }
}

/// Entropy-coded bytes plus the symbol count they decode to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodedPayload {
    pub bytes: Vec<u8>,
    pub symbol_count: usize,
}

/// Moment-matching fit: per channel, `mean` is the sample mean, `scale` is
/// the sample standard deviation floored at [`SIGMA_FLOOR`], and the alphabet
/// spans the observed symbol range. Channels need at least one symbol.
///
/// `symbols` is laid out channel-major: channel `c` owns the `c`-th of
/// `n_channels` equal contiguous blocks.
pub fn fit_model(symbols: &[i32], n_channels: usize, family: DensityFamily) -> Result<SymbolModel> {
    let per = channel_len(symbols.len(), n_channels)?;
    let mut params = Vec::with_capacity(n_channels);
    for c in 0..n_channels {
        let chunk = &symbols[c * per..(c + 1) * per];
        if chunk.is_empty() {
            return Err(Error::EmptyChannel(c));
        }
        let n = chunk.len() as f64;
        let mean = chunk.iter().map(|&s| s as f64).sum::<f64>() / n;
        let ss = chunk.iter().map(|&s| (s as f64 - mean).powi(2)).sum::<f64>();
        let var = if chunk.len() > 1 { ss / (n - 1.0) } else { 0.0 };
        let (lo, hi) = chunk
            .iter()
            .fold((i32::MAX, i32::MIN), |(lo, hi), &s| (lo.min(s), hi.max(s)));
        for s in [lo, hi] {
            if !(SYMBOL_MIN..=SYMBOL_MAX).contains(&s) {
                return Err(Error::AlphabetOverflow {
                    symbol: s as i64,
                    min: SYMBOL_MIN as i64,
                    max: SYMBOL_MAX as i64,
                });
            }
        }
        params.push(ChannelParams {
            mean: mean as f32,
            scale: var.sqrt().max(SIGMA_FLOOR) as f32,
            k_min: lo as i16,
            k_max: hi as i16,
        });
    }
    SymbolModel::new(family, params)
}

fn channel_len(total: usize, n_channels: usize) -> Result<usize> {
    if n_channels == 0 {
        return if total == 0 {
            Ok(0)
        } else {
            Err(Error::invalid("symbols given for a model with no channels"))
        };
    }
    if total % n_channels != 0 {
        return Err(Error::invalid(format!("{total} symbols do not split into {n_channels} equal channels")));
    }
    Ok(total / n_channels)
}

fn tables_for(model: &SymbolModel, total: usize) -> Result<(Vec<FrequencyTable>, usize)> {
    let per = channel_len(total, model.n_channels())?;
    let tables = (0..model.n_channels())
        .map(|c| model.frequency_table(c))
        .collect::<Result<Vec<_>>>()?;
    Ok((tables, per))
}

fn out_of_alphabet(model: &SymbolModel, channel: usize, s: i32) -> Error {
    let p = &model.channels[channel];
    Error::AlphabetOverflow {
        symbol: s as i64,
        min: p.k_min as i64,
        max: p.k_max as i64,
    }
}

pub fn encode(symbols: &[i32], model: &SymbolModel) -> Result<CodedPayload> {
    let (tables, per) = tables_for(model, symbols.len())?;
    if symbols.is_empty() {
        return Ok(CodedPayload {
            bytes: Vec::new(),
            symbol_count: 0,
        });
    }
    let mut out = Vec::with_capacity(symbols.len() / 2 + 8);
    let mut state = RANS_L;
    for (i, &s) in symbols.iter().enumerate().rev() {
        let c = i / per;
        let (start, freq) = tables[c].range(s).ok_or_else(|| out_of_alphabet(model, c, s))?;
        let x_max = ((RANS_L >> PRECISION_BITS) << 8) * freq;
        while state >= x_max {
            out.push(state as u8);
            state >>= 8;
        }
        state = ((state / freq) << PRECISION_BITS) + (state % freq) + start;
    }
    out.extend_from_slice(&state.to_le_bytes());
    out.reverse();
    Ok(CodedPayload {
        bytes: out,
        symbol_count: symbols.len(),
    })
}

/// Decodes exactly `payload.symbol_count` symbols. Fails unless the stream
/// is consumed to the last byte and the coder returns to its initial state.
pub fn decode(payload: &CodedPayload, model: &SymbolModel) -> Result<Vec<i32>> {
    let n = payload.symbol_count;
    let bytes = &payload.bytes;
    let (tables, per) = tables_for(model, n)?;
    if n == 0 {
        if !bytes.is_empty() {
            return Err(Error::corrupt("bytes present for an empty payload"));
        }
        return Ok(Vec::new());
    }
    if bytes.len() < 4 {
        return Err(Error::corrupt("payload shorter than the coder state"));
    }
    let mut state = u32::from_be_bytes(bytes[..4].try_into().unwrap());
    if !(RANS_L..RANS_L << 8).contains(&state) {
        return Err(Error::corrupt("initial coder state out of range"));
    }
    let mut pos = 4;
    let mask = TOTAL_FREQ - 1;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let table = &tables[i / per];
        let slot = state & mask;
        let (sym, start, freq) = table.lookup(slot);
        out.push(sym);
        state = freq * (state >> PRECISION_BITS) + slot - start;
        while state < RANS_L {
            let b = *bytes
                .get(pos)
                .ok_or_else(|| Error::corrupt(format!("payload truncated after {} of {n} symbols", i + 1)))?;
            state = (state << 8) | b as u32;
            pos += 1;
        }
    }
    if pos != bytes.len() || state != RANS_L {
        return Err(Error::corrupt("payload does not terminate cleanly"));
    }
    Ok(out)
}

/// Ideal code length `-sum log2 p(s)` under the coder's integer tables.
pub fn cross_entropy_bits(symbols: &[i32], model: &SymbolModel) -> Result<f64> {
    let (tables, per) = tables_for(model, symbols.len())?;
    let mut bits = 0.0;
    for (i, &s) in symbols.iter().enumerate() {
        let c = i / per;
        let f = tables[c].freq(s).ok_or_else(|| out_of_alphabet(model, c, s))?;
        bits += PRECISION_BITS as f64 - (f as f64).log2();
    }
    Ok(bits)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn normal(mean: f32, scale: f32, k_min: i16, k_max: i16) -> SymbolModel {
        SymbolModel::new(
            DensityFamily::Normal,
            vec![ChannelParams { mean, scale, k_min, k_max }],
        )
        .unwrap()
    }

    #[test]
    fn standard_normal_center_bin() {
        let m = normal(0.0, 1.0, -20, 20);
        let p = m.bin_probability(0, 0).unwrap();
        // erf(1 / (2 sqrt 2)) = 0.38292492254802624
        assert!((p - 0.382_924_922_548_026_24).abs() < 1e-15);
    }

    #[test]
    fn symmetric_model_is_symmetric() {
        for family in [DensityFamily::Normal, DensityFamily::Logistic] {
            let m = SymbolModel::new(
                family,
                vec![ChannelParams { mean: 0.0, scale: 2.5, k_min: -15, k_max: 15 }],
            )
            .unwrap();
            for k in 0..=15 {
                assert_eq!(m.bin_probability(0, k).unwrap(), m.bin_probability(0, -k).unwrap());
            }
        }
    }

    #[test]
    fn probabilities_sum_to_one() {
        for (mean, scale) in [(0.0, 1.0), (3.3, 0.2), (-7.0, 40.0), (0.5, 1e-3)] {
            for family in [DensityFamily::Normal, DensityFamily::Logistic, DensityFamily::Uniform] {
                let m = SymbolModel::new(
                    family,
                    vec![ChannelParams { mean, scale, k_min: -60, k_max: 60 }],
                )
                .unwrap();
                let total: f64 = (-60..=60).map(|k| m.bin_probability(0, k).unwrap()).sum();
                assert!((total - 1.0).abs() < 1e-9, "{family:?} {mean} {scale}: {total}");
            }
        }
    }

    #[test]
    fn out_of_alphabet_probability_is_an_error() {
        let m = normal(0.0, 1.0, -2, 2);
        assert!(m.bin_probability(0, 3).is_err());
        assert!(m.bin_probability(1, 0).is_err());
    }

    #[test]
    fn frequency_table_floor_and_total() {
        let m = normal(0.0, 0.05, -100, 100);
        let t = m.frequency_table(0).unwrap();
        assert_eq!(t.len(), 201);
        assert!((-100..=100).all(|k| t.freq(k).unwrap() >= 1));
        let total: u32 = (-100..=100).map(|k| t.freq(k).unwrap()).sum();
        assert_eq!(total, TOTAL_FREQ);
    }

    #[test]
    fn fit_degenerate_channel() {
        let m = fit_model(&[0; 64], 1, DensityFamily::Normal).unwrap();
        let p = m.channels()[0];
        assert_eq!(p.mean, 0.0);
        assert_eq!(p.scale, SIGMA_FLOOR as f32);
        assert_eq!((p.k_min, p.k_max), (0, 0));
    }

    #[test]
    fn fit_is_order_invariant() {
        let s: Vec<i32> = (0..500).map(|i| (i * 37 % 23) - 11).collect();
        let mut r = s.clone();
        r[..250].reverse();
        r[250..].rotate_left(17);
        let a = fit_model(&s, 2, DensityFamily::Normal).unwrap();
        let b = fit_model(&r, 2, DensityFamily::Normal).unwrap();
        for (x, y) in a.channels().iter().zip(b.channels()) {
            assert!((x.mean - y.mean).abs() < 1e-6 && (x.scale - y.scale).abs() < 1e-6);
            assert_eq!((x.k_min, x.k_max), (y.k_min, y.k_max));
        }
    }

    #[test]
    fn fit_short_and_uneven_channels() {
        let m = fit_model(&[1, 2, 3], 3, DensityFamily::Normal).unwrap();
        assert_eq!(m.channels()[1].scale, SIGMA_FLOOR as f32);
        assert_eq!((m.channels()[2].k_min, m.channels()[2].k_max), (3, 3));
        assert!(fit_model(&[1, 2, 3], 2, DensityFamily::Normal).is_err());
    }

    #[test]
    fn empty_round_trip() {
        let m = normal(0.0, 1.0, -3, 3);
        let p = encode(&[], &m).unwrap();
        assert!(p.bytes.is_empty());
        assert_eq!(decode(&p, &m).unwrap(), Vec::<i32>::new());
    }

    #[test]
    fn edge_symbols_round_trip() {
        let m = normal(0.0, 1.0, -40, 40);
        let s: Vec<i32> = (0..5000).map(|i| if i % 2 == 0 { 40 } else { -40 }).collect();
        let p = encode(&s, &m).unwrap();
        assert_eq!(decode(&p, &m).unwrap(), s);
    }

    #[test]
    fn encode_rejects_out_of_alphabet() {
        let m = normal(0.0, 1.0, -3, 3);
        assert!(matches!(encode(&[0, 4], &m), Err(Error::AlphabetOverflow { symbol: 4, .. })));
    }

    #[test]
    fn uniform_model_costs_log2_n() {
        let m = SymbolModel::new(
            DensityFamily::Uniform,
            vec![ChannelParams { mean: 0.0, scale: 1.0, k_min: 0, k_max: 255 }],
        )
        .unwrap();
        let s: Vec<i32> = (0..1000).map(|i| i % 256).collect();
        assert_eq!(cross_entropy_bits(&s, &m).unwrap(), 8.0 * 1000.0);
    }

    #[test]
    fn single_symbol_alphabet_is_free() {
        let m = normal(0.3, 1.0, 5, 5);
        let s = vec![5; 10_000];
        assert_eq!(cross_entropy_bits(&s, &m).unwrap(), 0.0);
        let p = encode(&s, &m).unwrap();
        assert_eq!(p.bytes.len(), 4);
        assert_eq!(decode(&p, &m).unwrap(), s);
    }

    #[test]
    fn decode_rejects_trailing_garbage() {
        let m = normal(0.0, 2.0, -10, 10);
        let s: Vec<i32> = (0..300).map(|i| (i % 7) - 3).collect();
        let mut p = encode(&s, &m).unwrap();
        p.bytes.push(0);
        assert!(decode(&p, &m).is_err());
    }

    #[test]
    fn model_bytes_round_trip() {
        let m = SymbolModel::new(
            DensityFamily::Logistic,
            vec![
                ChannelParams { mean: -1.5, scale: 0.25, k_min: -9, k_max: 3 },
                ChannelParams { mean: 8.0, scale: 3.0, k_min: 0, k_max: 30 },
            ],
        )
        .unwrap();
        let mut buf = Vec::new();
        m.to_bytes(&mut buf);
        assert_eq!(buf.len(), 5 + 2 * CHANNEL_PARAM_BYTES);
        let (back, used) = SymbolModel::from_bytes(&buf).unwrap();
        assert_eq!(used, buf.len());
        assert_eq!(back, m);
        assert!(SymbolModel::from_bytes(&buf[..buf.len() - 1]).is_err());
    }
}
