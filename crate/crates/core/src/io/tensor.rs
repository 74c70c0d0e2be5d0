//! ATT1: a minimal binary tensor format.
//!
//! Layout (all integers little-endian):
//! ```text
//! magic   4 bytes  "ATT1"
//! version u8       1
//! dtype   u8       1 = f32
//! ndim    u8
//! dims    ndim × u64
//! payload product(dims) × 4 bytes, row-major f32
//! ```
//! Values are f64 in memory and f32 on disk; writing rounds, reading widens.
//! A file round-trip (read → write) reproduces the original bytes exactly.

use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::encoder::{AttentionStack, ROW_SUM_TOL};
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: [u8; 4] = *b"ATT1";
pub const TENSOR_VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 1;

/// Most dims the format accepts; everything in this crate is ≤ 4-D.
pub const MAX_NDIM: usize = 8;

/// External attention rows may be off by this much and still load (with a
/// warning and renormalization).
pub const EXTERNAL_ROW_TOL: f64 = 1e-3;

/// Serialize a tensor to ATT1 bytes.
pub fn encode_tensor(tensor: &ArrayD<f64>) -> Result<Vec<u8>> {
    let ndim = tensor.ndim();
    if ndim == 0 || ndim > MAX_NDIM {
        return Err(Error::Validation(format!(
            "tensor must have 1..={MAX_NDIM} dims, got {ndim}"
        )));
    }
    let n = tensor.len();
    let mut bytes = Vec::with_capacity(7 + 8 * ndim + 4 * n);
    bytes.extend_from_slice(&TENSOR_MAGIC);
    bytes.push(TENSOR_VERSION);
    bytes.push(DTYPE_F32);
    bytes.push(ndim as u8);
    for &d in tensor.shape() {
        bytes.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in tensor.iter() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(bytes)
}

/// Parse one ATT1 record from the front of `bytes`; returns the tensor and
/// the number of bytes consumed (so records can be embedded in containers).
pub fn decode_tensor_prefix(bytes: &[u8]) -> Result<(ArrayD<f64>, usize)> {
    let need = |n: usize| -> Result<()> {
        if bytes.len() < n {
            Err(Error::Truncated {
                expected: n,
                found: bytes.len(),
            })
        } else {
            Ok(())
        }
    };
    need(7)?;
    if bytes[0..4] != TENSOR_MAGIC {
        return Err(Error::BadMagic {
            expected: "ATT1",
            found: [bytes[0], bytes[1], bytes[2], bytes[3]],
        });
    }
    if bytes[4] != TENSOR_VERSION {
        return Err(Error::BadVersion {
            field: "version",
            value: bytes[4],
        });
    }
    if bytes[5] != DTYPE_F32 {
        return Err(Error::BadVersion {
            field: "dtype",
            value: bytes[5],
        });
    }
    let ndim = bytes[6] as usize;
    if ndim == 0 || ndim > MAX_NDIM {
        return Err(Error::Validation(format!(
            "tensor must have 1..={MAX_NDIM} dims, got {ndim}"
        )));
    }
    let header = 7 + 8 * ndim;
    need(header)?;
    let mut dims = Vec::with_capacity(ndim);
    let mut count: usize = 1;
    for i in 0..ndim {
        let raw = u64::from_le_bytes(bytes[7 + 8 * i..15 + 8 * i].try_into().unwrap());
        let d = usize::try_from(raw).map_err(|_| Error::DimsOverflow)?;
        count = count.checked_mul(d).ok_or(Error::DimsOverflow)?;
        dims.push(d);
    }
    let payload = count.checked_mul(4).ok_or(Error::DimsOverflow)?;
    let total = header.checked_add(payload).ok_or(Error::DimsOverflow)?;
    need(total)?;
    let mut values = Vec::with_capacity(count);
    for i in 0..count {
        let off = header + 4 * i;
        let v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        values.push(v as f64);
    }
    let tensor = ArrayD::from_shape_vec(IxDyn(&dims), values)
        .map_err(|e| Error::Shape(e.to_string()))?;
    Ok((tensor, total))
}

/// Parse a standalone ATT1 buffer; trailing bytes are rejected.
pub fn decode_tensor(bytes: &[u8]) -> Result<ArrayD<f64>> {
    let (tensor, consumed) = decode_tensor_prefix(bytes)?;
    if consumed != bytes.len() {
        return Err(Error::Validation(format!(
            "{} trailing bytes after tensor record",
            bytes.len() - consumed
        )));
    }
    Ok(tensor)
}

pub fn write_tensor(path: &Path, tensor: &ArrayD<f64>) -> Result<()> {
    fs::write(path, encode_tensor(tensor)?)?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<ArrayD<f64>> {
    decode_tensor(&fs::read(path)?)
}

/// Load a 4-D attention stack exported by any model. Rows must be
/// row-stochastic within `EXTERNAL_ROW_TOL` (f32 exports drift); every row
/// is renormalized to sum exactly 1, and rows off by more than the encoder's
/// own tolerance are counted as warnings.
pub fn load_attention_external(
    path: &Path,
    expected_tokens: Option<usize>,
) -> Result<(AttentionStack, usize)> {
    let tensor = read_tensor(path)?;
    stack_from_tensor(tensor, expected_tokens)
}

/// See [`load_attention_external`]; split out for in-memory use.
pub fn stack_from_tensor(
    tensor: ArrayD<f64>,
    expected_tokens: Option<usize>,
) -> Result<(AttentionStack, usize)> {
    if tensor.ndim() != 4 {
        return Err(Error::Shape(format!(
            "attention stack must be 4-D, got {}-D",
            tensor.ndim()
        )));
    }
    let shape = tensor.shape().to_vec();
    if shape[2] != shape[3] {
        return Err(Error::Shape(format!(
            "attention matrices must be square, got {}x{}",
            shape[2], shape[3]
        )));
    }
    if let Some(t) = expected_tokens {
        if shape[2] != t {
            return Err(Error::Shape(format!(
                "expected {t} tokens, file has {}",
                shape[2]
            )));
        }
    }
    let mut weights = tensor
        .into_dimensionality::<ndarray::Ix4>()
        .map_err(|e| Error::Shape(e.to_string()))?;
    let mut warnings = 0usize;
    for l in 0..shape[0] {
        for h in 0..shape[1] {
            for r in 0..shape[2] {
                let mut row = weights.slice_mut(ndarray::s![l, h, r, ..]);
                if row.iter().any(|&v| v < 0.0 || !v.is_finite()) {
                    return Err(Error::Validation(format!(
                        "negative or non-finite attention at layer {l} head {h} row {r}"
                    )));
                }
                let sum: f64 = row.sum();
                let dev = (sum - 1.0).abs();
                if dev > EXTERNAL_ROW_TOL {
                    return Err(Error::Validation(format!(
                        "row sums to {sum} at layer {l} head {h} row {r}; not attention data"
                    )));
                }
                if dev > ROW_SUM_TOL {
                    warnings += 1;
                }
                row.iter_mut().for_each(|v| *v /= sum);
            }
        }
    }
    Ok((AttentionStack::new(weights)?, warnings))
}
