//! Whole-volume compression into the SRLV container.
//!
//! Container layout (little-endian):
//!
//! | field          | type                                   |
//! |----------------|----------------------------------------|
//! | magic          | `"SRLV"`                               |
//! | version        | u8 = 1                                 |
//! | depth_bits     | u8                                     |
//! | M              | u16                                    |
//! | scale_l        | f32                                    |
//! | t, h, w        | u32 × 3                                |
//! | weight digest  | 32 bytes, SHA-256 of the f32 SRLW file |
//! | escape_count   | u32                                    |
//! | escape table   | escape_count × (u64 index, u8/u16 value) |
//! | payload_len    | u64                                    |
//! | payload        | range-coded bytes                      |
//!
//! Pixels are visited slice by slice in raster order. Each slice opens with
//! one coded mode symbol: model-coded (`[0, 2^15)`) or raw (`[2^15, 2^16)`).
//! Model-coded slices code each pixel with its quantized logistic interval,
//! except escapes, which are skipped by the coder and stored in the table.
//! Raw slices code every pixel with a uniform interval of `2^(16-D)`; the
//! encoder picks raw when the model would spend more bits than `D` per pixel.

use crate::coder::{RangeDecoder, RangeEncoder};
use crate::error::CodecError;
use crate::model::{normalize_slice, HiddenState, ModelParams, SlicePredictor};
use crate::prob::{
    locate_symbol, quantize_interval, CoderInterval, LogisticParams, Quantized, FREQ_BITS,
    FREQ_TOTAL,
};
use crate::volume::Volume;
pub use crate::weights::{load_weights, save_weights, weights_digest, WeightDtype};

pub const STREAM_MAGIC: &[u8; 4] = b"SRLV";
pub const STREAM_VERSION: u8 = 1;
/// Bytes of fixed header before the escape table.
pub const FIXED_HEADER_LEN: usize = 60;
const MODE_MODEL: CoderInterval = CoderInterval {
    lo: 0,
    hi: FREQ_TOTAL / 2,
};
const MODE_RAW: CoderInterval = CoderInterval {
    lo: FREQ_TOTAL / 2,
    hi: FREQ_TOTAL,
};

/// Evaluation switches that must be identical on both sides.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CodecOptions {
    /// Run every slice with an all-zero hidden state (inter-slice ablation).
    pub zero_hidden: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Escape {
    pub index: u64,
    pub value: u16,
}

/// Parsed SRLV header.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamHeader {
    pub version: u8,
    pub depth_bits: u8,
    pub m: u16,
    pub scale_l: f32,
    pub t: u32,
    pub h: u32,
    pub w: u32,
    pub digest: [u8; 32],
    pub escapes: Vec<Escape>,
    pub payload_len: u64,
    /// Offset of the payload within the stream.
    pub payload_offset: usize,
}

/// What the encoder did, for reporting and verification.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CompressionStats {
    pub total_bytes: usize,
    pub payload_bytes: usize,
    pub escapes: usize,
    pub raw_slices: usize,
    /// Σ −log2(width / 2^16) over every interval sent to the coder,
    /// mode symbols included.
    pub ideal_payload_bits: f64,
}

fn escape_value_len(depth_bits: u8) -> usize {
    if depth_bits == 8 {
        1
    } else {
        2
    }
}

fn raw_interval(x: u32, depth_bits: u8) -> CoderInterval {
    let shift = FREQ_BITS - u32::from(depth_bits);
    CoderInterval {
        lo: x << shift,
        hi: (x + 1) << shift,
    }
}

pub fn compress_volume(v: &Volume, p: &ModelParams) -> Result<Vec<u8>, CodecError> {
    compress_volume_with(v, p, CodecOptions::default()).map(|(bytes, _)| bytes)
}

pub fn compress_volume_with(
    v: &Volume,
    p: &ModelParams,
    opts: CodecOptions,
) -> Result<(Vec<u8>, CompressionStats), CodecError> {
    let d = v.depth_bits();
    if d != p.depth_bits {
        return Err(CodecError::DepthMismatch {
            volume: d,
            model: p.depth_bits,
        });
    }
    let p = p.canonical();
    let (t, h, w) = v.dims();
    let m = p.m();
    let l = p.scale_l;
    let escape_bits = 8.0 * (8 + escape_value_len(d)) as f64;

    let mut enc = RangeEncoder::new();
    let mut escapes = Vec::new();
    let mut stats = CompressionStats::default();
    let mut state = HiddenState::zeros(h, w, m);
    let zeros = HiddenState::zeros(h, w, m);
    let mut plan: Vec<Quantized> = Vec::with_capacity(h * w);

    for z in 0..t {
        let samples = v.slice(z);
        let plane = normalize_slice(samples, d);
        let prev = if opts.zero_hidden { &zeros } else { &state };
        let mut predictor = SlicePredictor::new(&p, prev);

        plan.clear();
        let mut model_bits = 0.0;
        for (k, &x) in samples.iter().enumerate() {
            let lp = predictor.predict_at(&plane, k / w, k % w);
            let q = quantize_interval(u32::from(x), &lp, d, l);
            model_bits += match q {
                Quantized::Interval(iv) => iv.bits(),
                Quantized::Escape => escape_bits,
            };
            plan.push(q);
        }
        let raw_bits = f64::from(d) * (h * w) as f64;

        if model_bits < raw_bits {
            enc.encode(MODE_MODEL)?;
            stats.ideal_payload_bits += MODE_MODEL.bits();
            for (k, q) in plan.iter().enumerate() {
                match *q {
                    Quantized::Interval(iv) => {
                        enc.encode(iv)?;
                        stats.ideal_payload_bits += iv.bits();
                    }
                    Quantized::Escape => escapes.push(Escape {
                        index: ((z * h * w) + k) as u64,
                        value: samples[k],
                    }),
                }
            }
        } else {
            enc.encode(MODE_RAW)?;
            stats.ideal_payload_bits += MODE_RAW.bits() + raw_bits;
            stats.raw_slices += 1;
            for &x in samples {
                enc.encode(raw_interval(u32::from(x), d))?;
            }
        }

        if !opts.zero_hidden {
            state = predictor.update(&plane);
        }
    }

    let payload = enc.finish();
    let vlen = escape_value_len(d);
    let mut out =
        Vec::with_capacity(FIXED_HEADER_LEN + escapes.len() * (8 + vlen) + 8 + payload.len());
    out.extend_from_slice(STREAM_MAGIC);
    out.push(STREAM_VERSION);
    out.push(d);
    out.extend_from_slice(&(m as u16).to_le_bytes());
    out.extend_from_slice(&(l as f32).to_le_bytes());
    for dim in [t, h, w] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    out.extend_from_slice(&weights_digest(&p));
    out.extend_from_slice(&(escapes.len() as u32).to_le_bytes());
    for e in &escapes {
        out.extend_from_slice(&e.index.to_le_bytes());
        if vlen == 1 {
            out.push(e.value as u8);
        } else {
            out.extend_from_slice(&e.value.to_le_bytes());
        }
    }
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);

    stats.total_bytes = out.len();
    stats.payload_bytes = payload.len();
    stats.escapes = escapes.len();
    Ok((out, stats))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        let end = self
            .pos
            .checked_add(n)
            .ok_or(CodecError::TruncatedPayload)?;
        let s = self
            .bytes
            .get(self.pos..end)
            .ok_or(CodecError::TruncatedPayload)?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CodecError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CodecError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parses and validates the SRLV header and escape table.
pub fn read_stream_header(bytes: &[u8]) -> Result<StreamHeader, CodecError> {
    if bytes.len() < 4 || &bytes[..4] != STREAM_MAGIC {
        return Err(CodecError::BadMagic);
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u8()?;
    if version != STREAM_VERSION {
        return Err(CodecError::BadVersion(version));
    }
    let depth_bits = r.u8()?;
    if !crate::volume::SUPPORTED_DEPTHS.contains(&depth_bits) {
        return Err(CodecError::Corrupt(format!("depth_bits {depth_bits}")));
    }
    let m = r.u16()?;
    let scale_l = f32::from_le_bytes(r.take(4)?.try_into().unwrap());
    let (t, h, w) = (r.u32()?, r.u32()?, r.u32()?);
    let digest: [u8; 32] = r.take(32)?.try_into().unwrap();
    let count = r.u32()? as usize;
    let total = u64::from(t) * u64::from(h) * u64::from(w);
    if total == 0 {
        return Err(CodecError::Corrupt("zero volume dimension".into()));
    }
    if count as u64 > total {
        return Err(CodecError::CorruptEscapeTable(format!(
            "{count} escapes for {total} pixels"
        )));
    }
    let vlen = escape_value_len(depth_bits);
    let limit = 1u32 << depth_bits;
    let mut escapes = Vec::with_capacity(count.min(bytes.len() / (8 + vlen)));
    for k in 0..count {
        let index = r.u64()?;
        let value = if vlen == 1 {
            u16::from(r.u8()?)
        } else {
            r.u16()?
        };
        if index >= total {
            return Err(CodecError::CorruptEscapeTable(format!(
                "entry {k}: index {index} outside {total} pixels"
            )));
        }
        if u32::from(value) >= limit {
            return Err(CodecError::CorruptEscapeTable(format!(
                "entry {k}: value {value} exceeds {depth_bits} bits"
            )));
        }
        if escapes.last().is_some_and(|e: &Escape| e.index >= index) {
            return Err(CodecError::CorruptEscapeTable(format!(
                "entry {k}: indices not strictly increasing"
            )));
        }
        escapes.push(Escape { index, value });
    }
    let payload_len = r.u64()?;
    let payload_offset = r.pos;
    let available = (bytes.len() - payload_offset) as u64;
    if available < payload_len {
        return Err(CodecError::TruncatedPayload);
    }
    if available > payload_len {
        return Err(CodecError::Corrupt(format!(
            "{} trailing bytes after payload",
            available - payload_len
        )));
    }
    Ok(StreamHeader {
        version,
        depth_bits,
        m,
        scale_l,
        t,
        h,
        w,
        digest,
        escapes,
        payload_len,
        payload_offset,
    })
}

pub fn decompress_volume(bytes: &[u8], p: &ModelParams) -> Result<Volume, CodecError> {
    decompress_volume_with(bytes, p, CodecOptions::default())
}

pub fn decompress_volume_with(
    bytes: &[u8],
    p: &ModelParams,
    opts: CodecOptions,
) -> Result<Volume, CodecError> {
    let header = read_stream_header(bytes)?;
    let p = p.canonical();
    if header.digest != weights_digest(&p) {
        return Err(CodecError::DigestMismatch);
    }
    if header.depth_bits != p.depth_bits
        || usize::from(header.m) != p.m()
        || f64::from(header.scale_l) != p.scale_l
    {
        return Err(CodecError::ModelMismatch(format!(
            "stream (D={}, M={}, L={}) vs weights (D={}, M={}, L={})",
            header.depth_bits,
            header.m,
            header.scale_l,
            p.depth_bits,
            p.m(),
            p.scale_l
        )));
    }
    let (t, h, w) = (header.t as usize, header.h as usize, header.w as usize);
    let d = header.depth_bits;
    let l = p.scale_l;
    let m = p.m();
    let scale = f64::from(1u32 << d);
    let payload = &bytes[header.payload_offset..];
    let mut dec = RangeDecoder::new(payload)?;
    let mut escapes = header.escapes.iter().peekable();
    let mut samples = Vec::with_capacity(t * h * w);
    let mut state = HiddenState::zeros(h, w, m);
    let zeros = HiddenState::zeros(h, w, m);
    let shift = FREQ_BITS - u32::from(d);

    for z in 0..t {
        let base = (z * h * w) as u64;
        let mut plane = vec![0.0; h * w];
        let slice_start = samples.len();
        let prev = if opts.zero_hidden { &zeros } else { &state };
        let mut predictor = SlicePredictor::new(&p, prev);
        let mode = dec.target()?;
        if mode < MODE_MODEL.hi {
            dec.update(MODE_MODEL)?;
            for k in 0..h * w {
                let flat = base + k as u64;
                let x = if escapes.peek().is_some_and(|e| e.index == flat) {
                    escapes.next().unwrap().value
                } else {
                    let lp: LogisticParams = predictor.predict_at(&plane, k / w, k % w);
                    let f = dec.target()?;
                    let x = locate_symbol(f, &lp, d, l);
                    match quantize_interval(x, &lp, d, l) {
                        Quantized::Interval(iv) => dec.update(iv)?,
                        Quantized::Escape => {
                            return Err(CodecError::Corrupt(format!(
                                "decoded an escape symbol at pixel {flat}"
                            )))
                        }
                    }
                    x as u16
                };
                plane[k] = f64::from(x) / scale;
                samples.push(x);
            }
        } else {
            dec.update(MODE_RAW)?;
            if escapes
                .peek()
                .is_some_and(|e| e.index < base + (h * w) as u64)
            {
                return Err(CodecError::CorruptEscapeTable(format!(
                    "escape inside raw slice {z}"
                )));
            }
            for k in 0..h * w {
                let x = dec.target()? >> shift;
                dec.update(raw_interval(x, d))?;
                plane[k] = f64::from(x) / scale;
                samples.push(x as u16);
            }
        }
        debug_assert_eq!(samples.len() - slice_start, h * w);
        if !opts.zero_hidden {
            state = predictor.update(&plane);
        }
    }
    if let Some(e) = escapes.next() {
        return Err(CodecError::CorruptEscapeTable(format!(
            "escape at {} was never consumed",
            e.index
        )));
    }
    Ok(Volume::new(d, t, h, w, samples)?)
}
