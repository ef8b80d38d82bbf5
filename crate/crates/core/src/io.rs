//! Binary matrix files.
//!
//! Layout: the 8 magic bytes `ASAPMAT1`, rows and cols as little-endian
//! `u64`, then `rows * cols` little-endian `f32` values in row-major order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Matrix, MASKED};

pub const MAGIC: &[u8; 8] = b"ASAPMAT1";
const HEADER_LEN: usize = 8 + 8 + 8;

pub fn encode_matrix(m: &Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * m.data().len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    for &v in m.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_matrix(bytes: &[u8]) -> Result<Matrix> {
    let fail = |offset: usize, reason: String| Error::Format {
        offset: offset as u64,
        reason,
    };
    if bytes.len() < MAGIC.len() {
        return Err(fail(bytes.len(), "truncated magic".into()));
    }
    if let Some(pos) = bytes[..8].iter().zip(MAGIC).position(|(a, b)| a != b) {
        return Err(fail(pos, "bad magic, expected ASAPMAT1".into()));
    }
    let read_u64 = |offset: usize| -> Result<u64> {
        bytes
            .get(offset..offset + 8)
            .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| fail(bytes.len(), "truncated header".into()))
    };
    let rows = read_u64(8)?;
    let cols = read_u64(16)?;
    let count = rows
        .checked_mul(cols)
        .and_then(|n| usize::try_from(n).ok())
        .filter(|n| n.checked_mul(4).is_some())
        .ok_or_else(|| fail(8, format!("dimensions {rows}x{cols} overflow")))?;
    let rows = rows as usize;
    let cols = cols as usize;
    let expected = HEADER_LEN + 4 * count;
    if bytes.len() < expected {
        return Err(fail(
            bytes.len(),
            format!("truncated data: {rows}x{cols} needs {expected} bytes"),
        ));
    }
    if bytes.len() > expected {
        return Err(fail(
            expected,
            format!("{} trailing bytes", bytes.len() - expected),
        ));
    }
    let mut data = Vec::with_capacity(count);
    for (i, chunk) in bytes[HEADER_LEN..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if v.is_nan() || v == f32::INFINITY {
            return Err(fail(HEADER_LEN + 4 * i, format!("non-finite value {v}")));
        }
        data.push(if v == f32::NEG_INFINITY {
            MASKED
        } else {
            v as f64
        });
    }
    Matrix::new(rows, cols, data)
}

pub fn write_matrix_file(path: impl AsRef<Path>, m: &Matrix) -> Result<()> {
    fs::write(path, encode_matrix(m))?;
    Ok(())
}

pub fn read_matrix_file(path: impl AsRef<Path>) -> Result<Matrix> {
    decode_matrix(&fs::read(path)?)
}
