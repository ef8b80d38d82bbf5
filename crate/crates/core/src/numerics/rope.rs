use crate::error::{Error, Result};

use super::Matrix;

pub const DEFAULT_ROPE_BASE: f64 = 10_000.0;

/// Rotary embedding parameters. Dimensions `(2i, 2i + 1)` are rotated
/// together by `position * base^(-2i / head_dim)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RopeParams {
    head_dim: usize,
    base: f64,
}

impl RopeParams {
    pub fn new(head_dim: usize, base: f64) -> Result<Self> {
        if head_dim == 0 || head_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "rope head_dim must be even and nonzero, got {head_dim}"
            )));
        }
        if !(base > 0.0 && base.is_finite()) {
            return Err(Error::Config(format!(
                "rope base must be positive, got {base}"
            )));
        }
        Ok(Self { head_dim, base })
    }

    pub fn with_default_base(head_dim: usize) -> Result<Self> {
        Self::new(head_dim, DEFAULT_ROPE_BASE)
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    fn inv_freq(&self) -> Vec<f64> {
        let d = self.head_dim as f64;
        (0..self.head_dim / 2)
            .map(|i| self.base.powf(-((2 * i) as f64) / d))
            .collect()
    }
}

/// Rotates row `i` of `x` as if it sat at position `start_position + i`.
pub fn rope_apply(x: &Matrix, params: &RopeParams, start_position: usize) -> Result<Matrix> {
    let positions: Vec<usize> = (start_position..start_position + x.rows()).collect();
    rope_apply_at(x, params, &positions)
}

/// Rotates each row of `x` by its explicit position. Pruned sequences keep
/// their original positions, so they are generally not contiguous.
pub fn rope_apply_at(x: &Matrix, params: &RopeParams, positions: &[usize]) -> Result<Matrix> {
    if x.cols() != params.head_dim {
        return Err(Error::Shape(format!(
            "rope expects head_dim {}, got {} columns",
            params.head_dim,
            x.cols()
        )));
    }
    if positions.len() != x.rows() {
        return Err(Error::Shape(format!(
            "{} positions for {} rows",
            positions.len(),
            x.rows()
        )));
    }
    let inv_freq = params.inv_freq();
    let mut out = x.clone();
    for (i, &pos) in positions.iter().enumerate() {
        let row = out.row_mut(i);
        for (pair, freq) in row.chunks_exact_mut(2).zip(&inv_freq) {
            let (sin, cos) = (pos as f64 * freq).sin_cos();
            let (a, b) = (pair[0], pair[1]);
            pair[0] = a * cos - b * sin;
            pair[1] = a * sin + b * cos;
        }
    }
    Ok(out)
}
