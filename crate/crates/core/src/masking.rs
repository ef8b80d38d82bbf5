//! Causal and salience-guided bidirectional attention masks.
//!
//! The bidirectional mask keeps strict causality everywhere except inside the
//! visual span, where a query may look forward at key `j` with weight
//! `λ_j = λ_max · ŝ_j`. The penalty enters additively as `ln(max(λ_j, ε))`,
//! so after exponentiation it scales the forward weight by `λ_j`.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{min_max_normalize, softmax_rows, Matrix, MASKED};

pub const DEFAULT_EPSILON: f64 = 1e-6;
pub const DEFAULT_LAMBDA_MAX: f64 = 0.5;

/// Partition of a sequence into system prompt, visual patches and text query,
/// in that order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceLayout {
    pub total_len: usize,
    pub system_span: Range<usize>,
    pub visual_span: Range<usize>,
    pub text_span: Range<usize>,
}

impl SequenceLayout {
    pub fn new(system_len: usize, visual_len: usize, text_len: usize) -> Self {
        let v0 = system_len;
        let t0 = v0 + visual_len;
        Self {
            total_len: t0 + text_len,
            system_span: 0..v0,
            visual_span: v0..t0,
            text_span: t0..t0 + text_len,
        }
    }

    pub fn from_spans(
        total_len: usize,
        system_span: Range<usize>,
        visual_span: Range<usize>,
        text_span: Range<usize>,
    ) -> Result<Self> {
        let contiguous = system_span.start == 0
            && system_span.start <= system_span.end
            && system_span.end == visual_span.start
            && visual_span.start <= visual_span.end
            && visual_span.end == text_span.start
            && text_span.start <= text_span.end
            && text_span.end == total_len;
        if !contiguous {
            return Err(Error::Config(format!(
                "spans {system_span:?}, {visual_span:?}, {text_span:?} do not tile 0..{total_len} in order"
            )));
        }
        Ok(Self {
            total_len,
            system_span,
            visual_span,
            text_span,
        })
    }

    pub fn system_len(&self) -> usize {
        self.system_span.len()
    }

    pub fn visual_len(&self) -> usize {
        self.visual_span.len()
    }

    pub fn text_len(&self) -> usize {
        self.text_span.len()
    }

    pub fn is_visual(&self, i: usize) -> bool {
        self.visual_span.contains(&i)
    }

    pub(crate) fn require_visual(&self) -> Result<()> {
        if self.visual_span.is_empty() {
            return Err(Error::Config("visual span is empty".into()));
        }
        Ok(())
    }

    pub(crate) fn check_square(&self, m: &Matrix, what: &str) -> Result<()> {
        if m.rows() != self.total_len || m.cols() != self.total_len {
            return Err(Error::Shape(format!(
                "{what} is {}x{}, layout has {} tokens",
                m.rows(),
                m.cols(),
                self.total_len
            )));
        }
        Ok(())
    }
}

/// Per-visual-token attention mass and its min-max normalization. Both
/// vectors are indexed relative to the start of the visual span.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SalienceProfile {
    pub raw_mass: Vec<f64>,
    pub normalized: Vec<f64>,
}

impl SalienceProfile {
    pub fn from_raw_mass(raw_mass: Vec<f64>, epsilon: f64) -> Self {
        let normalized = min_max_normalize(&raw_mass, epsilon);
        Self {
            raw_mass,
            normalized,
        }
    }

    pub fn len(&self) -> usize {
        self.raw_mass.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw_mass.is_empty()
    }

    /// Normalized salience at absolute sequence position `pos`.
    pub fn normalized_at(&self, layout: &SequenceLayout, pos: usize) -> f64 {
        self.normalized[pos - layout.visual_span.start]
    }

    pub fn raw_at(&self, layout: &SequenceLayout, pos: usize) -> f64 {
        self.raw_mass[pos - layout.visual_span.start]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskConfig {
    /// Upper bound on forward visibility inside the visual span, in (0, 1].
    pub lambda_max: f64,
    /// Floor applied before the logarithm.
    pub epsilon: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            lambda_max: DEFAULT_LAMBDA_MAX,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_max > 0.0 && self.lambda_max <= 1.0) {
            return Err(Error::Config(format!(
                "lambda_max must lie in (0, 1], got {}",
                self.lambda_max
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }

    /// Additive log-penalty for forward attention to a key with salience `s`.
    pub fn penalty(&self, salience: f64) -> f64 {
        (self.lambda_max * salience).max(self.epsilon).ln()
    }
}

/// How per-head alignment matrices are reduced to the single matrix that
/// salience is computed from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadAggregation {
    #[default]
    Mean,
    Sum,
    Single(usize),
}

pub fn aggregate_heads(heads: &[Matrix], how: HeadAggregation) -> Result<Matrix> {
    let first = heads
        .first()
        .ok_or_else(|| Error::Shape("no attention heads to aggregate".into()))?;
    match how {
        HeadAggregation::Single(h) => heads
            .get(h)
            .cloned()
            .ok_or_else(|| Error::Config(format!("head {h} out of range ({} heads)", heads.len()))),
        HeadAggregation::Sum | HeadAggregation::Mean => {
            let mut acc = first.clone();
            for m in &heads[1..] {
                acc = acc.add(m)?;
            }
            Ok(if how == HeadAggregation::Mean {
                acc.scale(1.0 / heads.len() as f64)
            } else {
                acc
            })
        }
    }
}

pub fn build_causal_mask(n: usize) -> Result<Matrix> {
    if n == 0 {
        return Err(Error::Shape("causal mask needs at least one token".into()));
    }
    let mut m = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            m.set(i, j, MASKED);
        }
    }
    Ok(m)
}

/// Column sums of the raw alignment restricted to visual queries and visual
/// keys. Entries above the diagonal count too.
pub fn attention_mass(w: &Matrix, layout: &SequenceLayout) -> Result<Vec<f64>> {
    layout.require_visual()?;
    layout.check_square(w, "alignment")?;
    let vis = layout.visual_span.clone();
    let mut mass = vec![0.0; vis.len()];
    for i in vis.clone() {
        for (m, &v) in mass.iter_mut().zip(&w.row(i)[vis.clone()]) {
            *m += v;
        }
    }
    Ok(mass)
}

pub fn compute_salience(
    w: &Matrix,
    layout: &SequenceLayout,
    epsilon: f64,
) -> Result<SalienceProfile> {
    Ok(SalienceProfile::from_raw_mass(
        attention_mass(w, layout)?,
        epsilon,
    ))
}

pub fn build_bidirectional_mask(
    salience: &SalienceProfile,
    layout: &SequenceLayout,
    cfg: &MaskConfig,
) -> Result<Matrix> {
    cfg.validate()?;
    layout.require_visual()?;
    if salience.len() != layout.visual_len() {
        return Err(Error::Shape(format!(
            "salience covers {} tokens, visual span has {}",
            salience.len(),
            layout.visual_len()
        )));
    }
    let penalties: Vec<f64> = salience
        .normalized
        .iter()
        .map(|&s| cfg.penalty(s))
        .collect();
    let mut mask = build_causal_mask(layout.total_len)?;
    let vis = layout.visual_span.clone();
    for i in vis.clone() {
        for j in i + 1..vis.end {
            mask.set(i, j, penalties[j - vis.start]);
        }
    }
    Ok(mask)
}

/// `W + mask`: the logits whose exponentials are the unnormalized weights.
pub fn masked_logits(w: &Matrix, mask: &Matrix) -> Result<Matrix> {
    w.add(mask)
}

pub fn masked_attention(w: &Matrix, mask: &Matrix) -> Result<Matrix> {
    softmax_rows(&masked_logits(w, mask)?)
}
