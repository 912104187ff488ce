//! SRLW weights files.
//!
//! Layout (little-endian): `"SRLW"`, u8 version (1), u8 dtype (0 = f32,
//! 1 = f16), u16 M, u16 K, u16 k_dsc, u8 depth_bits, f32 scale_l,
//! u32 parameter_count, then the ten tensors in canonical order, row-major.

use sha2::{Digest, Sha256};

use crate::error::WeightsError;
use crate::model::{parameter_count, ModelParams, Shape, TENSOR_NAMES};
use crate::volume::SUPPORTED_DEPTHS;

pub const WEIGHTS_MAGIC: &[u8; 4] = b"SRLW";
pub const WEIGHTS_VERSION: u8 = 1;
pub const WEIGHTS_HEADER_LEN: usize = 21;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightDtype {
    F32 = 0,
    F16 = 1,
}

impl WeightDtype {
    fn width(self) -> usize {
        match self {
            Self::F32 => 4,
            Self::F16 => 2,
        }
    }
}

/// Parsed SRLW header fields.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightsHeader {
    pub version: u8,
    pub dtype: WeightDtype,
    pub shape: Shape,
    pub depth_bits: u8,
    pub scale_l: f32,
    pub parameter_count: u32,
}

pub fn save_weights(p: &ModelParams, dtype: WeightDtype) -> Vec<u8> {
    let count = parameter_count(p);
    let mut out = Vec::with_capacity(WEIGHTS_HEADER_LEN + count * dtype.width());
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.push(WEIGHTS_VERSION);
    out.push(dtype as u8);
    for v in [p.shape.m, p.shape.k_mask, p.shape.k_dsc] {
        out.extend_from_slice(&(v as u16).to_le_bytes());
    }
    out.push(p.depth_bits);
    out.extend_from_slice(&(p.scale_l as f32).to_le_bytes());
    out.extend_from_slice(&(count as u32).to_le_bytes());
    for v in p.weights.values() {
        match dtype {
            WeightDtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            WeightDtype::F16 => out.extend_from_slice(&half::f16::from_f64(v).to_le_bytes()),
        }
    }
    out
}

pub fn read_weights_header(bytes: &[u8]) -> Result<WeightsHeader, WeightsError> {
    if bytes.len() < 4 || &bytes[..4] != WEIGHTS_MAGIC {
        return Err(WeightsError::BadMagic);
    }
    if bytes.len() < WEIGHTS_HEADER_LEN {
        return Err(WeightsError::Truncated);
    }
    let version = bytes[4];
    if version != WEIGHTS_VERSION {
        return Err(WeightsError::BadVersion(version));
    }
    let dtype = match bytes[5] {
        0 => WeightDtype::F32,
        1 => WeightDtype::F16,
        other => return Err(WeightsError::BadDtype(other)),
    };
    let u16_at = |at: usize| u16::from_le_bytes([bytes[at], bytes[at + 1]]) as usize;
    let shape = Shape {
        m: u16_at(6),
        k_mask: u16_at(8),
        k_dsc: u16_at(10),
    };
    Ok(WeightsHeader {
        version,
        dtype,
        shape,
        depth_bits: bytes[12],
        scale_l: f32::from_le_bytes(bytes[13..17].try_into().unwrap()),
        parameter_count: u32::from_le_bytes(bytes[17..21].try_into().unwrap()),
    })
}

pub fn load_weights(bytes: &[u8]) -> Result<ModelParams, WeightsError> {
    let header = read_weights_header(bytes)?;
    let shape = header.shape;
    if !shape.is_valid() {
        return Err(WeightsError::BadShape(format!("{shape:?}")));
    }
    if !SUPPORTED_DEPTHS.contains(&header.depth_bits) {
        return Err(WeightsError::BadShape(format!(
            "depth_bits {}",
            header.depth_bits
        )));
    }
    if !(header.scale_l.is_finite() && header.scale_l > 0.0) {
        return Err(WeightsError::BadShape(format!(
            "scale_l {}",
            header.scale_l
        )));
    }
    let mut p = ModelParams::zeros(shape, header.depth_bits, f64::from(header.scale_l));
    let computed = parameter_count(&p) as u32;
    if header.parameter_count != computed {
        return Err(WeightsError::CountMismatch {
            stored: header.parameter_count,
            computed,
        });
    }
    let width = header.dtype.width();
    let body = &bytes[WEIGHTS_HEADER_LEN..];
    if body.len() < computed as usize * width {
        return Err(WeightsError::Truncated);
    }
    let mut chunks = body.chunks_exact(width);
    for (tensor, name) in p.weights.as_slices_mut().into_iter().zip(TENSOR_NAMES) {
        for v in tensor.iter_mut() {
            let c = chunks.next().expect("length checked above");
            *v = match header.dtype {
                WeightDtype::F32 => f64::from(f32::from_le_bytes(c.try_into().unwrap())),
                WeightDtype::F16 => half::f16::from_le_bytes([c[0], c[1]]).to_f64(),
            };
            if !v.is_finite() {
                return Err(WeightsError::NonFinite(name));
            }
        }
    }
    Ok(p)
}

/// SHA-256 of the canonical (f32) SRLW serialization.
pub fn weights_digest(p: &ModelParams) -> [u8; 32] {
    Sha256::digest(save_weights(p, WeightDtype::F32)).into()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, quantize_weights_f16};

    #[test]
    fn f32_round_trip_is_bitwise() {
        let p = init_params(3, 16, 12, 8.0).canonical();
        let bytes = save_weights(&p, WeightDtype::F32);
        assert_eq!(bytes.len(), WEIGHTS_HEADER_LEN + 4 * 4866);
        let q = load_weights(&bytes).unwrap();
        assert_eq!(p, q);
        assert_eq!(save_weights(&q, WeightDtype::F32), bytes);
    }

    #[test]
    fn f16_file_matches_quantizer() {
        let p = init_params(4, 16, 8, 1.0);
        let q = load_weights(&save_weights(&p, WeightDtype::F16)).unwrap();
        assert_eq!(q.weights, quantize_weights_f16(&p).weights);
    }

    #[test]
    fn digest_tracks_every_bit() {
        let p = init_params(5, 4, 8, 1.0).canonical();
        let d = weights_digest(&p);
        assert_eq!(d, weights_digest(&p.clone()));
        let mut q = p.clone();
        let v = q.weights.pw_w[7] as f32;
        q.weights.pw_w[7] = f64::from(f32::from_bits(v.to_bits() ^ 1));
        assert_ne!(weights_digest(&q), d);
    }

    #[test]
    fn header_errors() {
        let p = init_params(6, 2, 8, 1.0);
        let mut bytes = save_weights(&p, WeightDtype::F32);
        assert!(matches!(
            load_weights(b"SRLX...."),
            Err(WeightsError::BadMagic)
        ));
        bytes[17] ^= 1;
        assert!(matches!(
            load_weights(&bytes),
            Err(WeightsError::CountMismatch { .. })
        ));
        bytes[17] ^= 1;
        bytes.truncate(bytes.len() - 1);
        assert!(matches!(load_weights(&bytes), Err(WeightsError::Truncated)));
    }
}
