//! Dense kernels shared by the rest of the crate.

mod matrix;
mod rope;

pub use matrix::{Matrix, MASKED};
pub use rope::{rope_apply, rope_apply_at, RopeParams, DEFAULT_ROPE_BASE};

use crate::error::{Error, Result};

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Pre-softmax alignment `Q Kᵀ / √d_h`, with `d_h = Q.cols`.
pub fn scaled_alignment(q: &Matrix, k: &Matrix) -> Result<Matrix> {
    if q.cols() != k.cols() || q.cols() == 0 {
        return Err(Error::Shape(format!(
            "alignment needs matching nonzero head dims, got {} and {}",
            q.cols(),
            k.cols()
        )));
    }
    if q.rows() != k.rows() {
        return Err(Error::Shape(format!(
            "alignment needs equal token counts, got {} and {}",
            q.rows(),
            k.rows()
        )));
    }
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let n = q.rows();
    let mut data = Vec::with_capacity(n * n);
    for qi in q.row_iter() {
        for kj in k.row_iter() {
            data.push(dot(qi, kj) * scale);
        }
    }
    Matrix::new(n, n, data)
}

/// Row-wise softmax with max subtraction. [`MASKED`] entries come out as
/// exactly zero; a row with nothing but masked entries is an error.
pub fn softmax_rows(s: &Matrix) -> Result<Matrix> {
    let mut out = s.clone();
    for i in 0..s.rows() {
        softmax_in_place(out.row_mut(i)).map_err(|_| Error::FullyMasked { row: i })?;
    }
    Ok(out)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) -> std::result::Result<(), ()> {
    let max = row
        .iter()
        .copied()
        .filter(|v| *v != MASKED)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(());
    }
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = if *v == MASKED { 0.0 } else { (*v - max).exp() };
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
    Ok(())
}

/// Pairwise cosine similarity of the rows of `h`.
///
/// Rows with zero norm have similarity 0 against everything, themselves
/// included. Values are clamped to `[-1, 1]`, so a threshold of 1 is never
/// strictly exceeded.
pub fn cosine_similarity(h: &Matrix) -> Matrix {
    let n = h.rows();
    let norms: Vec<f64> = h.row_iter().map(norm).collect();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let denom = norms[i] * norms[j];
            let s = if denom == 0.0 {
                0.0
            } else if i == j {
                1.0
            } else {
                (dot(h.row(i), h.row(j)) / denom).clamp(-1.0, 1.0)
            };
            out.set(i, j, s);
            out.set(j, i, s);
        }
    }
    out
}

/// `(x - min) / (max - min + epsilon)`, elementwise.
pub fn min_max_normalize(x: &[f64], epsilon: f64) -> Vec<f64> {
    let min = x.iter().copied().fold(f64::INFINITY, f64::min);
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let denom = max - min + epsilon;
    x.iter().map(|v| (v - min) / denom).collect()
}
