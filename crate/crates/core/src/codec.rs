//! Compress/decompress pipeline and the `.uqd` container.
//!
//! Container layout, all integers little-endian:
//!
//! | field            | size                                 |
//! |------------------|--------------------------------------|
//! | magic `UQDC`     | 4                                    |
//! | version          | 1                                    |
//! | flags (zero)     | 1                                    |
//! | t                | 2                                    |
//! | dither seed      | 8                                    |
//! | schedule id      | 8                                    |
//! | transform kind   | 1 (0 identity, 1 block DCT)          |
//! | transform block  | 2                                    |
//! | rank             | 1                                    |
//! | dims             | 4 per axis                           |
//! | symbol model     | 5 + 12 per channel                   |
//! | symbol count     | 8                                    |
//! | payload length   | 4                                    |
//! | payload          | payload length                       |
//! | CRC-32           | 4, over every preceding byte         |

use std::f64::consts::PI;
use std::path::Path;

use rayon::prelude::*;

use crate::diffusion::{ddim_reconstruct_counted, Denoiser, StepPath};
use crate::entropy::{decode, encode, fit_model, CodedPayload, DensityFamily, SymbolModel};
use crate::error::{Error, Result};
use crate::quantizer::{dequantize, forward_quantize, QuantizedLatent};
use crate::schedule::VarianceSchedule;
use crate::tensor::{channels_of, LatentTensor};

pub const MAGIC: &[u8; 4] = b"UQDC";
pub const VERSION: u8 = 1;
const MAX_RANK: usize = 8;

/// Fixed analysis/synthesis pair applied around quantization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transform {
    Identity,
    /// Orthonormal 2-D DCT-II over non-overlapping `block x block` tiles.
    /// Coefficient `(u, v)` of every tile goes to its own channel, so a
    /// `c x h x w` input becomes `c*b*b x h/b x w/b`.
    BlockDct { block: usize },
}

impl Transform {
    fn tag(self) -> (u8, u16) {
        match self {
            Transform::Identity => (0, 0),
            Transform::BlockDct { block } => (1, block as u16),
        }
    }

    fn from_tag(kind: u8, block: u16) -> Result<Self> {
        match (kind, block) {
            (0, 0) => Ok(Transform::Identity),
            (1, b) if b >= 1 => Ok(Transform::BlockDct { block: b as usize }),
            _ => Err(Error::corrupt(format!("unknown transform {kind}/{block}"))),
        }
    }

    /// Shape of the coefficients produced from an input of `shape`.
    pub fn latent_shape(self, shape: &[usize]) -> Result<Vec<usize>> {
        match self {
            Transform::Identity => Ok(shape.to_vec()),
            Transform::BlockDct { block: b } => {
                let (c, h, w) = image_dims(shape)?;
                if b == 0 || b > u16::MAX as usize || h % b != 0 || w % b != 0 {
                    return Err(Error::invalid(format!("block size {b} does not tile {h}x{w}")));
                }
                Ok(vec![c * b * b, h / b, w / b])
            }
        }
    }

    pub fn analysis(self, x: &LatentTensor) -> Result<LatentTensor> {
        let out_shape = self.latent_shape(x.shape())?;
        match self {
            Transform::Identity => Ok(x.clone()),
            Transform::BlockDct { block } => {
                let (c, h, w) = image_dims(x.shape())?;
                let vals = block_dct(x.values(), c, h, w, block, false);
                Ok(LatentTensor::from_parts(out_shape, vals))
            }
        }
    }

    /// Inverse of [`Transform::analysis`] for an input of `shape`.
    pub fn synthesis(self, coeffs: &LatentTensor, shape: &[usize]) -> Result<LatentTensor> {
        coeffs.ensure_shape(&self.latent_shape(shape)?)?;
        match self {
            Transform::Identity => Ok(coeffs.clone()),
            Transform::BlockDct { block } => {
                let (c, h, w) = image_dims(shape)?;
                let vals = block_dct(coeffs.values(), c, h, w, block, true);
                Ok(LatentTensor::from_parts(shape.to_vec(), vals))
            }
        }
    }
}

impl std::str::FromStr for Transform {
    type Err = Error;

    /// `identity` or `dct:<block>`.
    fn from_str(s: &str) -> Result<Self> {
        if s == "identity" {
            return Ok(Transform::Identity);
        }
        match s.strip_prefix("dct:").map(str::parse::<usize>) {
            Some(Ok(block)) if (1..=u16::MAX as usize).contains(&block) => Ok(Transform::BlockDct { block }),
            _ => Err(Error::Parse(format!("unknown transform `{s}`"))),
        }
    }
}

fn image_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [h, w] => Ok((1, h, w)),
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::invalid(format!("block transform needs a rank-2 or rank-3 shape, got {shape:?}"))),
    }
}

fn dct_basis(b: usize) -> Vec<f64> {
    let mut m = vec![0.0; b * b];
    for k in 0..b {
        let scale = if k == 0 { (1.0 / b as f64).sqrt() } else { (2.0 / b as f64).sqrt() };
        for n in 0..b {
            m[k * b + n] = scale * (PI * (2 * n + 1) as f64 * k as f64 / (2 * b) as f64).cos();
        }
    }
    m
}

// Forward: pixels (c, h, w) -> coefficients (c*b*b, h/b, w/b). Inverse swaps roles.
fn block_dct(src: &[f64], c: usize, h: usize, w: usize, b: usize, inverse: bool) -> Vec<f64> {
    let basis = dct_basis(b);
    let (bh, bw) = (h / b, w / b);
    let bb = b * b;
    let plane = bh * bw;
    let pixel = |ci: usize, y: usize, x: usize| (ci * h + y) * w + x;
    let coef = |ci: usize, u: usize, v: usize, by: usize, bx: usize| (ci * bb + u * b + v) * plane + by * bw + bx;

    let tiles: Vec<Vec<f64>> = (0..c * plane)
        .into_par_iter()
        .map(|idx| {
            let (ci, by, bx) = (idx / plane, (idx % plane) / bw, idx % bw);
            let mut inp = vec![0.0; bb];
            for i in 0..b {
                for j in 0..b {
                    inp[i * b + j] = if inverse {
                        src[coef(ci, i, j, by, bx)]
                    } else {
                        src[pixel(ci, by * b + i, bx * b + j)]
                    };
                }
            }
            // forward Y = C X C^T, inverse X = C^T Y C
            let at = |r: usize, k: usize| if inverse { basis[k * b + r] } else { basis[r * b + k] };
            let mut tmp = vec![0.0; bb];
            for r in 0..b {
                for j in 0..b {
                    tmp[r * b + j] = (0..b).map(|k| at(r, k) * inp[k * b + j]).sum();
                }
            }
            let mut out = vec![0.0; bb];
            for r in 0..b {
                for s in 0..b {
                    out[r * b + s] = (0..b).map(|k| tmp[r * b + k] * at(s, k)).sum();
                }
            }
            out
        })
        .collect();

    let mut dst = vec![0.0; src.len()];
    for (idx, tile) in tiles.into_iter().enumerate() {
        let (ci, by, bx) = (idx / plane, (idx % plane) / bw, idx % bw);
        for i in 0..b {
            for j in 0..b {
                let d = if inverse { pixel(ci, by * b + i, bx * b + j) } else { coef(ci, i, j, by, bx) };
                dst[d] = tile[i * b + j];
            }
        }
    }
    dst
}

/// Everything the receiver needs, plus the coded symbols.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub t: u16,
    pub seed: u64,
    pub schedule_id: [u8; 8],
    pub transform: Transform,
    /// Shape of the input before the analysis transform.
    pub shape: Vec<usize>,
    pub model: SymbolModel,
    pub payload: CodedPayload,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::corrupt(format!("container truncated at byte {}", self.bytes.len())))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().unwrap())
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
}

impl Container {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.payload.bytes.len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(0);
        out.extend_from_slice(&self.t.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.schedule_id);
        let (kind, block) = self.transform.tag();
        out.push(kind);
        out.extend_from_slice(&block.to_le_bytes());
        out.push(self.shape.len() as u8);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        self.model.to_bytes(&mut out);
        out.extend_from_slice(&(self.payload.symbol_count as u64).to_le_bytes());
        out.extend_from_slice(&(self.payload.bytes.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.payload.bytes);
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// Parses and validates a container. Any truncation, trailing data,
    /// inconsistent field or checksum mismatch is an error.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if &r.array::<4>()? != MAGIC {
            return Err(Error::corrupt("bad magic"));
        }
        let version = r.u8()?;
        if version != VERSION {
            return Err(Error::corrupt(format!("unsupported version {version}")));
        }
        let flags = r.u8()?;
        if flags != 0 {
            return Err(Error::corrupt(format!("unknown flags {flags:#04x}")));
        }
        let t = r.u16()?;
        let seed = r.u64()?;
        let schedule_id = r.array::<8>()?;
        let kind = r.u8()?;
        let block = r.u16()?;
        let transform = Transform::from_tag(kind, block)?;
        let rank = r.u8()? as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::corrupt(format!("rank {rank}")));
        }
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let latent = transform.latent_shape(&shape).map_err(|e| Error::corrupt(e.to_string()))?;
        let n = latent
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::corrupt("shape overflows"))?;
        let (model, used) = SymbolModel::from_bytes(&bytes[r.pos..])?;
        r.pos += used;
        let symbol_count = r.u64()?;
        if symbol_count != n as u64 {
            return Err(Error::corrupt(format!("{symbol_count} symbols for a {n}-element shape")));
        }
        let expected_channels = if n == 0 { 0 } else { channels_of(&latent) };
        if model.n_channels() != expected_channels {
            return Err(Error::corrupt(format!(
                "model has {} channels, latent has {expected_channels}",
                model.n_channels()
            )));
        }
        let len = r.u32()? as usize;
        let payload = r.take(len)?.to_vec();
        let body_end = r.pos;
        let crc = r.u32()?;
        if r.pos != bytes.len() {
            return Err(Error::corrupt("trailing bytes after checksum"));
        }
        if crc32fast::hash(&bytes[..body_end]) != crc {
            return Err(Error::corrupt("checksum mismatch"));
        }
        Ok(Self {
            t,
            seed,
            schedule_id,
            transform,
            shape,
            model,
            payload: CodedPayload {
                bytes: payload,
                symbol_count: n,
            },
        })
    }

    pub fn latent_shape(&self) -> Vec<usize> {
        self.transform
            .latent_shape(&self.shape)
            .expect("validated at construction")
    }

    pub fn len_bytes(&self) -> usize {
        self.to_bytes().len()
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }
}

fn hex(id: &[u8; 8]) -> String {
    id.iter().map(|b| format!("{b:02x}")).collect()
}

/// Analysis transform, dithered quantization at `t`, per-channel model fit
/// and entropy coding.
pub fn compress(
    x: &LatentTensor,
    t: usize,
    vs: &VarianceSchedule,
    tr: Transform,
    seed: u64,
) -> Result<Container> {
    if t == 0 {
        return Err(Error::InvalidTimestep(0));
    }
    let t16 = u16::try_from(t).map_err(|_| Error::invalid(format!("timestep {t} does not fit in 16 bits")))?;
    if x.shape().is_empty() || x.shape().len() > MAX_RANK || x.shape().iter().any(|&d| d > u32::MAX as usize) {
        return Err(Error::invalid(format!("unsupported shape {:?}", x.shape())));
    }
    let y = tr.analysis(x)?;
    let q = forward_quantize(&y, vs, t, seed)?;
    let channels = if y.is_empty() { 0 } else { y.channels() };
    let model = fit_model(&q.symbols, channels, DensityFamily::Normal)?;
    let payload = encode(&q.symbols, &model)?;
    Ok(Container {
        t: t16,
        seed,
        schedule_id: vs.fingerprint(),
        transform: tr,
        shape: x.shape().to_vec(),
        model,
        payload,
    })
}

/// Decodes the symbols and rebuilds the dithered latent `y_hat_t` in the
/// transform domain. This is exactly the sender's reconstruction.
pub fn receive_latent(c: &Container, vs: &VarianceSchedule) -> Result<LatentTensor> {
    let fp = vs.fingerprint();
    if fp != c.schedule_id {
        return Err(Error::ScheduleMismatch {
            expected: hex(&c.schedule_id),
            actual: hex(&fp),
        });
    }
    let symbols = decode(&c.payload, &c.model)?;
    let q = QuantizedLatent {
        symbols,
        t: c.t as usize,
        seed: Some(c.seed),
        shape: c.latent_shape(),
    };
    dequantize(&q, vs)
}

/// Decoder output plus the number of elements where the denoiser fell back.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub output: LatentTensor,
    pub fallbacks: usize,
}

/// Runs the reverse process from `c.t` along `path` on a received latent and
/// applies the synthesis transform.
pub fn reconstruct(
    c: &Container,
    y_t: &LatentTensor,
    d: &dyn Denoiser,
    vs: &VarianceSchedule,
    path: &StepPath,
) -> Result<Reconstruction> {
    let t = c.t as usize;
    let steps = path.steps(t, vs)?;
    let (y0, fallbacks) = ddim_reconstruct_counted(y_t, t, &steps, d, vs)?;
    Ok(Reconstruction {
        output: c.transform.synthesis(&y0, &c.shape)?,
        fallbacks,
    })
}

/// [`receive_latent`] followed by a single posterior-mean step to `t = 0`.
pub fn decompress(c: &Container, d: &dyn Denoiser, vs: &VarianceSchedule) -> Result<LatentTensor> {
    let y_t = receive_latent(c, vs)?;
    reconstruct(c, &y_t, d, vs, &StepPath::Direct).map(|r| r.output)
}

/// Exact size accounting of a container.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rate {
    pub samples: usize,
    pub payload_bits: u64,
    pub header_bits: u64,
}

impl Rate {
    pub fn payload_bits_per_sample(&self) -> f64 {
        per_sample(self.payload_bits, self.samples)
    }

    pub fn header_bits_per_sample(&self) -> f64 {
        per_sample(self.header_bits, self.samples)
    }

    pub fn total_bits_per_sample(&self) -> f64 {
        per_sample(self.payload_bits + self.header_bits, self.samples)
    }
}

fn per_sample(bits: u64, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        bits as f64 / n as f64
    }
}

/// Payload bits are the entropy-coded bytes; header bits are every other
/// byte of the serialized container, checksum included.
pub fn rate_of(c: &Container) -> Rate {
    let payload = c.payload.bytes.len() as u64 * 8;
    Rate {
        samples: c.shape.iter().product(),
        payload_bits: payload,
        header_bits: c.len_bytes() as u64 * 8 - payload,
    }
}

/// Reads an 8-bit binary PGM (P5) as a `1 x h x w` tensor in `[-1, 1]`.
pub fn read_pgm(path: impl AsRef<Path>) -> Result<LatentTensor> {
    parse_pgm(&std::fs::read(path)?)
}

pub fn parse_pgm(bytes: &[u8]) -> Result<LatentTensor> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(Error::Parse("PGM header truncated".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            pos += 1;
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P5" {
        return Err(Error::Parse("not a binary PGM (P5)".into()));
    }
    let mut num = |what: &str| -> Result<usize> {
        token()?.parse().map_err(|e| Error::Parse(format!("PGM {what}: {e}")))
    };
    let w = num("width")?;
    let h = num("height")?;
    let maxval = num("maxval")?;
    if !(1..=255).contains(&maxval) {
        return Err(Error::Parse(format!("PGM maxval {maxval} is not 8-bit")));
    }
    // exactly one whitespace byte separates the header from the raster
    let start = pos + 1;
    let data = bytes
        .get(start..start + w * h)
        .ok_or_else(|| Error::Parse("PGM raster truncated".into()))?;
    let scale = 2.0 / maxval as f64;
    let values = data.iter().map(|&v| v as f64 * scale - 1.0).collect();
    LatentTensor::new(vec![1, h, w], values)
}

/// Inverse of [`parse_pgm`]: clamps to `[-1, 1]` and rounds to 8 bits.
pub fn encode_pgm(img: &LatentTensor) -> Result<Vec<u8>> {
    let (c, h, w) = image_dims(img.shape())?;
    if c != 1 {
        return Err(Error::invalid("PGM output needs a single channel"));
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(
        img.values()
            .iter()
            .map(|&v| ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8),
    );
    Ok(out)
}

pub fn write_pgm(path: impl AsRef<Path>, img: &LatentTensor) -> Result<()> {
    std::fs::write(path, encode_pgm(img)?)?;
    Ok(())
}

/// PSNR in dB for signals with peak-to-peak range 2 (the `[-1, 1]` mapping).
pub fn psnr(mse: f64) -> f64 {
    10.0 * (4.0 / mse).log10()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::gmm_gaussian_denoiser;
    use crate::diffusion::GmmSource;

    fn ramp(shape: Vec<usize>) -> LatentTensor {
        let n: usize = shape.iter().product();
        let v = (0..n).map(|i| ((i * 7919) % 1000) as f64 / 500.0 - 1.0).collect();
        LatentTensor::new(shape, v).unwrap()
    }

    #[test]
    fn dct_is_orthonormal() {
        for b in [1, 2, 4, 8] {
            let x = ramp(vec![2, 16, 24]);
            let tr = Transform::BlockDct { block: b };
            let y = tr.analysis(&x).unwrap();
            assert_eq!(y.shape(), &[2 * b * b, 16 / b, 24 / b]);
            let back = tr.synthesis(&y, x.shape()).unwrap();
            assert!(back.mse(&x).unwrap().sqrt() < 1e-12);
            assert!((y.mean_square() - x.mean_square()).abs() < 1e-12);
        }
    }

    #[test]
    fn dct_dc_channel_holds_block_means() {
        let x = LatentTensor::new(vec![4, 4], vec![1.0; 16]).unwrap();
        let y = Transform::BlockDct { block: 2 }.analysis(&x).unwrap();
        // DC channel first: 2 * mean for an orthonormal 2x2 DCT
        assert!(y.values()[..4].iter().all(|&v| (v - 2.0).abs() < 1e-14));
        assert!(y.values()[4..].iter().all(|&v| v.abs() < 1e-14));
    }

    #[test]
    fn dct_rejects_untiled_shape() {
        assert!(Transform::BlockDct { block: 8 }.analysis(&ramp(vec![12, 16])).is_err());
        assert!(Transform::BlockDct { block: 2 }.analysis(&ramp(vec![16])).is_err());
    }

    #[test]
    fn container_round_trip() {
        let vs = VarianceSchedule::cosine(50).unwrap();
        let x = ramp(vec![1, 16, 16]);
        let c = compress(&x, 5, &vs, Transform::BlockDct { block: 4 }, 11).unwrap();
        assert_eq!(c.t, 5);
        let parsed = Container::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(parsed, c);
    }

    #[test]
    fn empty_tensor() {
        let vs = VarianceSchedule::cosine(50).unwrap();
        let x = LatentTensor::zeros(vec![0]);
        let c = compress(&x, 3, &vs, Transform::Identity, 1).unwrap();
        let r = rate_of(&c);
        assert_eq!(r.payload_bits, 0);
        let c1 = compress(&LatentTensor::zeros(vec![0]), 7, &vs, Transform::Identity, 99).unwrap();
        assert_eq!(rate_of(&c1).header_bits, r.header_bits);
        let back = Container::from_bytes(&c.to_bytes()).unwrap();
        let d = gmm_gaussian_denoiser(GmmSource::gaussian(0.0, 1.0).unwrap());
        assert!(decompress(&back, &d, &vs).unwrap().is_empty());
    }

    #[test]
    fn t_zero_is_rejected() {
        let vs = VarianceSchedule::cosine(50).unwrap();
        assert!(compress(&ramp(vec![8]), 0, &vs, Transform::Identity, 1).is_err());
    }

    #[test]
    fn schedule_mismatch_is_detected() {
        let vs = VarianceSchedule::cosine(50).unwrap();
        let other = VarianceSchedule::cosine(60).unwrap();
        let c = compress(&ramp(vec![64]), 5, &vs, Transform::Identity, 1).unwrap();
        assert!(matches!(receive_latent(&c, &other), Err(Error::ScheduleMismatch { .. })));
    }

    #[test]
    fn single_byte_corruption_is_detected() {
        let vs = VarianceSchedule::cosine(50).unwrap();
        let c = compress(&ramp(vec![256]), 3, &vs, Transform::Identity, 1).unwrap();
        let bytes = c.to_bytes();
        for i in 0..bytes.len() {
            let mut b = bytes.clone();
            b[i] ^= 0x5a;
            assert!(Container::from_bytes(&b).is_err(), "flip at {i} accepted");
        }
    }

    #[test]
    fn pgm_round_trip() {
        let mut raw = b"P5\n# comment\n3 2\n255\n".to_vec();
        raw.extend_from_slice(&[0, 128, 255, 1, 2, 3]);
        let img = parse_pgm(&raw).unwrap();
        assert_eq!(img.shape(), &[1, 2, 3]);
        assert_eq!(img.values()[0], -1.0);
        assert_eq!(img.values()[2], 1.0);
        let enc = encode_pgm(&img).unwrap();
        assert_eq!(parse_pgm(&enc).unwrap(), img);
        assert!(parse_pgm(&raw[..raw.len() - 1]).is_err());
    }
}
