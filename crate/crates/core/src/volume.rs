//! Volumetric sample grids, the RVF1 raw container, PGM slice import,
//! synthetic test volumes and the bits-per-pixel metric.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::VolumeError;

pub const RVF_MAGIC: &[u8; 4] = b"RVF1";
pub const RVF_HEADER_LEN: usize = 17;

/// Bit depths accepted everywhere in the codec.
pub const SUPPORTED_DEPTHS: [u8; 3] = [8, 12, 16];

/// A `t × h × w` grid of unsigned samples, slice-major then row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Volume {
    depth_bits: u8,
    t: usize,
    h: usize,
    w: usize,
    samples: Vec<u16>,
}

impl Volume {
    pub fn new(
        depth_bits: u8,
        t: usize,
        h: usize,
        w: usize,
        samples: Vec<u16>,
    ) -> Result<Self, VolumeError> {
        if !SUPPORTED_DEPTHS.contains(&depth_bits) {
            return Err(VolumeError::BadDepth(depth_bits));
        }
        if t == 0 || h == 0 || w == 0 {
            return Err(VolumeError::EmptyDims { t, h, w });
        }
        let expected = t * h * w;
        if samples.len() != expected {
            return Err(VolumeError::SampleCount {
                expected,
                actual: samples.len(),
            });
        }
        let limit = 1u32 << depth_bits;
        if let Some((index, &value)) = samples
            .iter()
            .enumerate()
            .find(|(_, &v)| u32::from(v) >= limit)
        {
            return Err(VolumeError::SampleOutOfRange {
                index,
                value: u32::from(value),
                depth_bits,
            });
        }
        Ok(Self {
            depth_bits,
            t,
            h,
            w,
            samples,
        })
    }

    pub fn depth_bits(&self) -> u8 {
        self.depth_bits
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.t, self.h, self.w)
    }

    pub fn slices(&self) -> usize {
        self.t
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn num_samples(&self) -> usize {
        self.samples.len()
    }

    pub fn samples(&self) -> &[u16] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<u16> {
        self.samples
    }

    /// Samples of slice `t` in row-major order.
    pub fn slice(&self, t: usize) -> &[u16] {
        let n = self.h * self.w;
        &self.samples[t * n..(t + 1) * n]
    }

    pub fn get(&self, t: usize, i: usize, j: usize) -> u16 {
        self.samples[(t * self.h + i) * self.w + j]
    }
}

/// Parses an RVF1 byte buffer.
pub fn read_rvf(bytes: &[u8]) -> Result<Volume, VolumeError> {
    if bytes.len() < 4 || &bytes[..4] != RVF_MAGIC {
        return Err(VolumeError::BadMagic);
    }
    if bytes.len() < RVF_HEADER_LEN {
        return Err(VolumeError::TruncatedPayload {
            expected: RVF_HEADER_LEN,
            actual: bytes.len(),
        });
    }
    let depth_bits = bytes[4];
    if !SUPPORTED_DEPTHS.contains(&depth_bits) {
        return Err(VolumeError::BadDepth(depth_bits));
    }
    let dim = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
    let (t, h, w) = (dim(5), dim(9), dim(13));
    let count = t
        .checked_mul(h)
        .and_then(|n| n.checked_mul(w))
        .ok_or(VolumeError::EmptyDims { t, h, w })?;
    let width = if depth_bits == 8 { 1 } else { 2 };
    let payload = &bytes[RVF_HEADER_LEN..];
    if payload.len() < count * width {
        return Err(VolumeError::TruncatedPayload {
            expected: RVF_HEADER_LEN + count * width,
            actual: bytes.len(),
        });
    }
    let samples = if width == 1 {
        payload[..count].iter().map(|&b| u16::from(b)).collect()
    } else {
        payload[..count * 2]
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]))
            .collect()
    };
    Volume::new(depth_bits, t, h, w, samples)
}

/// Serializes a volume as RVF1: 17-byte header followed by the samples
/// (u8 for 8-bit data, u16 little-endian otherwise).
pub fn write_rvf(v: &Volume) -> Vec<u8> {
    let width = if v.depth_bits == 8 { 1 } else { 2 };
    let mut out = Vec::with_capacity(RVF_HEADER_LEN + v.samples.len() * width);
    out.extend_from_slice(RVF_MAGIC);
    out.push(v.depth_bits);
    for d in [v.t, v.h, v.w] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    if width == 1 {
        out.extend(v.samples.iter().map(|&s| s as u8));
    } else {
        for &s in &v.samples {
            out.extend_from_slice(&s.to_le_bytes());
        }
    }
    out
}

struct Pgm {
    width: usize,
    height: usize,
    maxval: u32,
    samples: Vec<u16>,
}

fn parse_pgm(bytes: &[u8]) -> Result<Pgm, VolumeError> {
    let unsupported = |why: &str| VolumeError::UnsupportedFormat(why.to_string());
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(unsupported("not a binary PGM (P5)"));
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for field in fields.iter_mut() {
        // whitespace and '#' comments between header tokens
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(unsupported("malformed PGM header"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| unsupported("malformed PGM header"))?;
    }
    // exactly one whitespace byte before the raster
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(unsupported("malformed PGM header"));
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(unsupported("zero PGM dimension"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(unsupported("PGM maxval out of range"));
    }
    let (width, height) = (width as usize, height as usize);
    let count = width * height;
    let raster = &bytes[pos..];
    let samples: Vec<u16> = if maxval <= 255 {
        if raster.len() < count {
            return Err(unsupported("truncated PGM raster"));
        }
        raster[..count].iter().map(|&b| u16::from(b)).collect()
    } else {
        if raster.len() < count * 2 {
            return Err(unsupported("truncated PGM raster"));
        }
        // PGM stores 16-bit samples big-endian
        raster[..count * 2]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect()
    };
    Ok(Pgm {
        width,
        height,
        maxval,
        samples,
    })
}

/// Stacks binary PGM slices into a volume, in list order. Depth is 8 bits
/// when maxval ≤ 255 and 16 bits otherwise.
pub fn import_pgm_stack<P: AsRef<Path>>(paths: &[P]) -> Result<Volume, VolumeError> {
    let mut slices = Vec::with_capacity(paths.len());
    for path in paths {
        let bytes = std::fs::read(path.as_ref())?;
        slices.push(parse_pgm(&bytes)?);
    }
    let first = slices
        .first()
        .ok_or_else(|| VolumeError::UnsupportedFormat("empty slice list".into()))?;
    let (h, w, maxval) = (first.height, first.width, first.maxval);
    if let Some(bad) = slices
        .iter()
        .find(|s| s.height != h || s.width != w || s.maxval != maxval)
    {
        return Err(VolumeError::DimensionMismatch {
            expected: (h, w, maxval),
            actual: (bad.height, bad.width, bad.maxval),
        });
    }
    let depth_bits = if maxval <= 255 { 8 } else { 16 };
    let t = slices.len();
    let samples = slices.into_iter().flat_map(|s| s.samples).collect();
    Volume::new(depth_bits, t, h, w, samples)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    Constant,
    Noise,
    Smooth3d,
}

impl std::str::FromStr for SynthKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "constant" => Ok(Self::Constant),
            "noise" => Ok(Self::Noise),
            "smooth3d" => Ok(Self::Smooth3d),
            other => Err(format!("unknown synth kind `{other}`")),
        }
    }
}

/// Deterministic synthetic volume.
///
/// `Smooth3d` is a sum of three separable low-frequency sinusoids with
/// seeded frequencies and phases, drifting slowly along x from slice to
/// slice, plus uniform noise in `[-2^(D-6), 2^(D-6)]`,
/// clamped to the sample range. Slice-to-slice change is slow, so
/// consecutive slices are strongly correlated.
pub fn synth_volume(
    kind: SynthKind,
    seed: u64,
    dims: (usize, usize, usize),
    depth_bits: u8,
) -> Result<Volume, VolumeError> {
    if !SUPPORTED_DEPTHS.contains(&depth_bits) {
        return Err(VolumeError::BadDepth(depth_bits));
    }
    let (t, h, w) = dims;
    let n = t * h * w;
    let top = (1u32 << depth_bits) - 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = match kind {
        SynthKind::Constant => vec![1u16 << (depth_bits - 1); n],
        SynthKind::Noise => (0..n).map(|_| rng.gen_range(0..=top) as u16).collect(),
        SynthKind::Smooth3d => {
            let mid = f64::from(1u32 << (depth_bits - 1));
            let amp = 0.28 * mid;
            let noise = 1i64 << (depth_bits - 6);
            // (spatial rad/pixel in y, x; temporal drift rad/slice; phases)
            let comps: Vec<[f64; 5]> = (0..3)
                .map(|_| {
                    [
                        rng.gen_range(0.5..2.0) * PI / h.max(8) as f64,
                        rng.gen_range(0.5..2.0) * PI / w.max(8) as f64,
                        rng.gen_range(0.04..0.15),
                        rng.gen_range(0.0..2.0 * PI),
                        rng.gen_range(0.0..2.0 * PI),
                    ]
                })
                .collect();
            let mut out = Vec::with_capacity(n);
            for z in 0..t {
                for y in 0..h {
                    for x in 0..w {
                        let signal: f64 = comps
                            .iter()
                            .map(|c| {
                                (c[0] * y as f64 + c[3]).sin()
                                    * (c[1] * x as f64 + c[2] * z as f64 + c[4]).sin()
                            })
                            .sum();
                        let jitter = rng.gen_range(-noise..=noise) as f64;
                        let v = (mid + amp * signal + jitter).round();
                        out.push(v.clamp(0.0, f64::from(top)) as u16);
                    }
                }
            }
            out
        }
    };
    Volume::new(depth_bits, t, h, w, samples)
}

/// Bits per pixel of a compressed artifact of `compressed_bytes` total bytes.
pub fn bpp(v: &Volume, compressed_bytes: u64) -> f64 {
    8.0 * compressed_bytes as f64 / v.num_samples() as f64
}
