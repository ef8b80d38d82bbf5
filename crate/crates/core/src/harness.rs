//! Seeded toy decoder for running the pruning pass end to end.
//!
//! Pre-norm multi-head causal attention with RoPE, followed by a gated FFN
//! (gate, up and down projections, SiLU). Weights are scaled Gaussians drawn
//! from the config seed; nothing is trained. The pruning pass runs once, on
//! the output of `prune_layer`, and every later layer sees only the
//! compressed sequence. Rows keep their original positions throughout, so
//! cached keys stay valid for later turns.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::{aggregate_heads, SequenceLayout};
use crate::numerics::{
    dot, rope_apply_at, softmax_rows, Matrix, RopeParams, DEFAULT_ROPE_BASE, MASKED,
};
use crate::pruning::{asap_pass_aligned, AsapPass, PruneConfig};

const RMS_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyDecoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub ffn_m: usize,
    pub prune_layer: usize,
    pub seed: u64,
    pub rope_base: f64,
    pub max_positions: usize,
}

impl Default for ToyDecoderConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            heads: 4,
            head_dim: 16,
            ffn_m: 128,
            prune_layer: 2,
            seed: 0,
            rope_base: DEFAULT_ROPE_BASE,
            max_positions: 4096,
        }
    }
}

impl ToyDecoderConfig {
    pub fn model_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.ffn_m == 0 {
            return Err(Error::Config(
                "layers, heads and ffn_m must all be at least 1".into(),
            ));
        }
        if self.prune_layer >= self.layers {
            return Err(Error::Config(format!(
                "prune layer {} must be below the layer count {}",
                self.prune_layer, self.layers
            )));
        }
        if self.max_positions == 0 {
            return Err(Error::Config("max_positions must be at least 1".into()));
        }
        RopeParams::new(self.head_dim, self.rope_base).map(|_| ())
    }
}

struct LayerWeights {
    wq: Matrix,
    wk: Matrix,
    wv: Matrix,
    wo: Matrix,
    w_gate: Matrix,
    w_up: Matrix,
    w_down: Matrix,
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let dist = Normal::new(0.0, 1.0 / (rows as f64).sqrt()).unwrap();
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Matrix::new(rows, cols, data).unwrap()
}

impl LayerWeights {
    fn random(rng: &mut ChaCha8Rng, d: usize, m: usize) -> Self {
        Self {
            wq: gaussian(rng, d, d),
            wk: gaussian(rng, d, d),
            wv: gaussian(rng, d, d),
            wo: gaussian(rng, d, d),
            w_gate: gaussian(rng, d, m),
            w_up: gaussian(rng, d, m),
            w_down: gaussian(rng, m, d),
        }
    }
}

/// Keys (post-RoPE) and values of one layer, with the original position of
/// every cached row.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCache {
    pub keys: Matrix,
    pub values: Matrix,
    pub positions: Vec<usize>,
}

impl LayerCache {
    fn empty(d: usize) -> Self {
        Self {
            keys: Matrix::zeros(0, d),
            values: Matrix::zeros(0, d),
            positions: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    pub layers: Vec<LayerCache>,
}

impl KvCache {
    pub fn rows_per_layer(&self) -> Vec<usize> {
        self.layers.iter().map(LayerCache::len).collect()
    }

    pub fn last_position(&self) -> Option<usize> {
        self.layers
            .iter()
            .filter_map(|l| l.positions.last().copied())
            .max()
    }
}

#[derive(Debug, Clone)]
pub struct DecoderOutput {
    pub hidden: Matrix,
    /// Original position of each output row.
    pub positions: Vec<usize>,
    pub layout: SequenceLayout,
    pub cache: KvCache,
    pub prune: Option<AsapPass>,
}

pub struct ToyDecoder {
    cfg: ToyDecoderConfig,
    rope: RopeParams,
    layers: Vec<LayerWeights>,
}

fn rms_norm(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for i in 0..x.rows() {
        let row = out.row_mut(i);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
        let inv = 1.0 / (ms + RMS_EPS).sqrt();
        row.iter_mut().for_each(|v| *v *= inv);
    }
    out
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

impl ToyDecoder {
    pub fn new(cfg: ToyDecoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let layers = (0..cfg.layers)
            .map(|_| LayerWeights::random(&mut rng, cfg.model_dim(), cfg.ffn_m))
            .collect();
        Ok(Self {
            rope: RopeParams::new(cfg.head_dim, cfg.rope_base)?,
            cfg,
            layers,
        })
    }

    pub fn config(&self) -> &ToyDecoderConfig {
        &self.cfg
    }

    /// Rotates every head block of `m` by the row positions.
    fn rope_heads(&self, m: &Matrix, positions: &[usize]) -> Result<Matrix> {
        let hd = self.cfg.head_dim;
        let mut out = m.clone();
        for h in 0..self.cfg.heads {
            let block = rope_apply_at(&m.column_block(h * hd, hd)?, &self.rope, positions)?;
            for i in 0..m.rows() {
                out.row_mut(i)[h * hd..(h + 1) * hd].copy_from_slice(block.row(i));
            }
        }
        Ok(out)
    }

    /// Runs layer `l` for the rows `x` at `positions`, appending their keys
    /// and values to `cache` first. Returns the layer output and each
    /// head's unmasked pre-softmax alignment against the whole cache.
    fn layer_step(
        &self,
        l: usize,
        x: &Matrix,
        positions: &[usize],
        cache: &mut LayerCache,
    ) -> Result<(Matrix, Vec<Matrix>)> {
        let w = &self.layers[l];
        let (hd, d) = (self.cfg.head_dim, self.cfg.model_dim());
        let xn = rms_norm(x);
        let q = self.rope_heads(&xn.matmul(&w.wq)?, positions)?;
        let k = self.rope_heads(&xn.matmul(&w.wk)?, positions)?;
        let v = xn.matmul(&w.wv)?;

        cache.keys = cache.keys.vstack(&k)?;
        cache.values = cache.values.vstack(&v)?;
        cache.positions.extend_from_slice(positions);

        let n_new = x.rows();
        let n_all = cache.len();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut attn_out = Matrix::zeros(n_new, d);
        let mut alignments = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let cols = h * hd..(h + 1) * hd;
            let mut logits = Matrix::zeros(n_new, n_all);
            for i in 0..n_new {
                let qi = &q.row(i)[cols.clone()];
                for j in 0..n_all {
                    logits.set(i, j, dot(qi, &cache.keys.row(j)[cols.clone()]) * scale);
                }
            }
            let mut masked = logits.clone();
            for (i, &pi) in positions.iter().enumerate() {
                for (j, &pj) in cache.positions.iter().enumerate() {
                    if pj > pi {
                        masked.set(i, j, MASKED);
                    }
                }
            }
            let a = softmax_rows(&masked)?;
            for i in 0..n_new {
                let out = &mut attn_out.row_mut(i)[cols.clone()];
                for j in 0..n_all {
                    let p = a.get(i, j);
                    if p == 0.0 {
                        continue;
                    }
                    for (o, &vv) in out.iter_mut().zip(&cache.values.row(j)[cols.clone()]) {
                        *o += p * vv;
                    }
                }
            }
            alignments.push(logits);
        }

        let x1 = x.add(&attn_out.matmul(&w.wo)?)?;
        let xn2 = rms_norm(&x1);
        let gate = xn2.matmul(&w.w_gate)?;
        let up = xn2.matmul(&w.w_up)?;
        let act: Vec<f64> = gate
            .data()
            .iter()
            .zip(up.data())
            .map(|(g, u)| silu(*g) * u)
            .collect();
        let act = Matrix::new(gate.rows(), gate.cols(), act)?;
        Ok((x1.add(&act.matmul(&w.w_down)?)?, alignments))
    }

    /// Full forward pass over a fresh sequence, optionally pruning after
    /// `prune_layer`.
    pub fn forward(
        &self,
        h: &Matrix,
        layout: &SequenceLayout,
        prune: Option<&PruneConfig>,
    ) -> Result<DecoderOutput> {
        let d = self.cfg.model_dim();
        if h.cols() != d || h.rows() != layout.total_len {
            return Err(Error::Shape(format!(
                "decoder expects {}x{d} input, got {}x{}",
                layout.total_len,
                h.rows(),
                h.cols()
            )));
        }
        if layout.total_len > self.cfg.max_positions {
            return Err(Error::PositionOverflow {
                position: layout.total_len - 1,
                max: self.cfg.max_positions,
            });
        }
        if let Some(p) = prune {
            layout.require_visual()?;
            p.validate(layout.visual_len())?;
        }

        let mut x = h.clone();
        let mut positions: Vec<usize> = (0..layout.total_len).collect();
        let mut cur_layout = layout.clone();
        let mut caches = Vec::with_capacity(self.cfg.layers);
        let mut pass = None;
        for l in 0..self.cfg.layers {
            let mut cache = LayerCache::empty(d);
            let (out, alignments) = self.layer_step(l, &x, &positions, &mut cache)?;
            caches.push(cache);
            x = out;
            if let (Some(p), true) = (prune, l == self.cfg.prune_layer) {
                let w = aggregate_heads(&alignments, p.head_aggregation)?;
                let done = asap_pass_aligned(&x, &w, &cur_layout, p)?;
                x = done.hidden.clone();
                positions = done.positions.clone();
                cur_layout = done.layout.clone();
                pass = Some(done);
            }
        }
        Ok(DecoderOutput {
            hidden: x,
            positions,
            layout: cur_layout,
            cache: KvCache { layers: caches },
            prune: pass,
        })
    }

    /// Appends `new_text` after the last cached position and runs it
    /// through every layer against the cache. Visual tokens are not
    /// recomputed.
    pub fn multiturn_step(&self, cache: &KvCache, new_text: &Matrix) -> Result<(Matrix, KvCache)> {
        let d = self.cfg.model_dim();
        if cache.layers.len() != self.cfg.layers {
            return Err(Error::Shape(format!(
                "cache has {} layers, decoder has {}",
                cache.layers.len(),
                self.cfg.layers
            )));
        }
        if new_text.rows() == 0 {
            return Ok((Matrix::zeros(0, d), cache.clone()));
        }
        if new_text.cols() != d {
            return Err(Error::Shape(format!(
                "new tokens have {} columns, model dim is {d}",
                new_text.cols()
            )));
        }
        let start = cache.last_position().map_or(0, |p| p + 1);
        let last = start + new_text.rows() - 1;
        if last >= self.cfg.max_positions {
            return Err(Error::PositionOverflow {
                position: last,
                max: self.cfg.max_positions,
            });
        }
        let positions: Vec<usize> = (start..=last).collect();
        let mut next = cache.clone();
        let mut x = new_text.clone();
        for (l, layer_cache) in next.layers.iter_mut().enumerate() {
            x = self.layer_step(l, &x, &positions, layer_cache)?.0;
        }
        Ok((x, next))
    }
}

/// Shape of a synthetic sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutSpec {
    pub system: usize,
    pub visual: usize,
    pub text: usize,
    pub dim: usize,
    /// Visual tokens are noisy copies of this many prototype patches;
    /// 0 draws them independently.
    pub prototypes: usize,
}

impl Default for LayoutSpec {
    fn default() -> Self {
        Self {
            system: 4,
            visual: 64,
            text: 8,
            dim: 64,
            prototypes: 8,
        }
    }
}

const PROTOTYPE_NOISE: f64 = 0.25;

/// Deterministic hidden states for `spec`.
pub fn generate_sequence(spec: &LayoutSpec, seed: u64) -> (Matrix, SequenceLayout) {
    let layout = SequenceLayout::new(spec.system, spec.visual, spec.text);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.sample(StandardNormal)).collect() };
    let protos: Vec<Vec<f64>> = (0..spec.prototypes).map(|_| draw(spec.dim)).collect();
    let mut data = Vec::with_capacity(layout.total_len * spec.dim);
    for i in 0..layout.total_len {
        let mut row = draw(spec.dim);
        if layout.is_visual(i) && !protos.is_empty() {
            let p = &protos[(i - layout.visual_span.start) % protos.len()];
            for (r, b) in row.iter_mut().zip(p) {
                *r = b + PROTOTYPE_NOISE * *r;
            }
        }
        data.extend(row);
    }
    let h = Matrix::new(layout.total_len, spec.dim, data).expect("finite gaussian draws");
    (h, layout)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RopeDecayConfig {
    pub head_dim: usize,
    /// Number of random unit-vector pairs averaged per distance.
    pub draws: usize,
    /// Use the same vector as query and key.
    pub tie_qk: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayRow {
    pub distance: usize,
    pub mean_score: f64,
    pub mean_abs_score: f64,
}

/// RoPE-rotated `q·k` as a function of relative distance, averaged over
/// seeded random unit vectors. The query sits `distance` positions after
/// the key.
pub fn rope_decay_demo(
    seed: u64,
    distances: &[usize],
    cfg: &RopeDecayConfig,
) -> Result<Vec<DecayRow>> {
    if distances.is_empty() {
        return Err(Error::Config(
            "rope decay needs at least one distance".into(),
        ));
    }
    if cfg.draws == 0 {
        return Err(Error::Config("rope decay needs at least one draw".into()));
    }
    let rope = RopeParams::with_default_base(cfg.head_dim)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = |rng: &mut ChaCha8Rng| -> Matrix {
        let v: Vec<f64> = (0..cfg.head_dim)
            .map(|_| rng.sample(StandardNormal))
            .collect();
        let n = crate::numerics::norm(&v);
        Matrix::new(1, cfg.head_dim, v.iter().map(|x| x / n).collect()).unwrap()
    };
    let mut sums = vec![(0.0, 0.0); distances.len()];
    for _ in 0..cfg.draws {
        let q = unit(&mut rng);
        let k = if cfg.tie_qk {
            q.clone()
        } else {
            unit(&mut rng)
        };
        for (acc, &dist) in sums.iter_mut().zip(distances) {
            let rq = rope_apply_at(&q, &rope, &[dist])?;
            let rk = rope_apply_at(&k, &rope, &[0])?;
            let s = dot(rq.row(0), rk.row(0));
            acc.0 += s;
            acc.1 += s.abs();
        }
    }
    let n = cfg.draws as f64;
    Ok(distances
        .iter()
        .zip(sums)
        .map(|(&distance, (s, a))| DecayRow {
            distance,
            mean_score: s / n,
            mean_abs_score: a / n,
        })
        .collect())
}
