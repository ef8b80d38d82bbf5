//! Brute-force oracles and random instance generators shared by the
//! integration suites. Nothing here calls into the code paths it checks.

#![allow(dead_code)]

use std::collections::BTreeMap;

use asap_core::{Matrix, SequenceLayout};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-scale..scale))
        .collect();
    Matrix::new(rows, cols, data).unwrap()
}

/// Rows drawn around a few prototypes so that cosine merges actually occur.
pub fn clustered_matrix(
    rng: &mut ChaCha8Rng,
    rows: usize,
    cols: usize,
    protos: usize,
    noise: f64,
) -> Matrix {
    let centers: Vec<Vec<f64>> = (0..protos.max(1))
        .map(|_| (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let c = &centers[rng.random_range(0..centers.len())];
        data.extend(c.iter().map(|v| v + rng.random_range(-noise..noise)));
    }
    Matrix::new(rows, cols, data).unwrap()
}

/// Positions among `candidates` that make the top `k`: a candidate is in
/// iff fewer than `k` others beat it (higher score, or equal score and lower
/// position). Returned ascending.
pub fn rank_count_top_k(candidates: &[usize], scores: &[f64], k: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..candidates.len())
        .filter(|&a| {
            let beaten_by = (0..candidates.len())
                .filter(|&b| {
                    b != a
                        && (scores[b] > scores[a]
                            || (scores[b] == scores[a] && candidates[b] < candidates[a]))
                })
                .count();
            beaten_by < k
        })
        .map(|a| candidates[a])
        .collect();
    out.sort_unstable();
    out
}

/// Mean of `a[i][j]` over the text rows, per visual column.
pub fn text_mean_scores(a: &Matrix, layout: &SequenceLayout) -> Vec<f64> {
    let mut out = Vec::new();
    for j in layout.visual_span.clone() {
        let mut acc = 0.0;
        for i in layout.text_span.clone() {
            acc += a.get(i, j);
        }
        out.push(acc / layout.text_len() as f64);
    }
    out
}

pub fn cosine_loop(a: &[f64], b: &[f64]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return 0.0;
    }
    (ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0)
}

/// Greedy routing by repeated scan: at every step take the best remaining
/// admissible pair (similarity, then destination position, then source
/// position), until none is left.
pub fn greedy_merge_oracle(
    h: &Matrix,
    positions: &[usize],
    salience: &[f64],
    t: f64,
) -> BTreeMap<usize, Vec<usize>> {
    let n = positions.len();
    let mut is_src = vec![false; n];
    let mut is_dst = vec![false; n];
    let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for d in 0..n {
            for s in 0..n {
                if d == s || is_src[s] || is_dst[s] || is_src[d] {
                    continue;
                }
                let anchors = salience[d] > salience[s]
                    || (salience[d] == salience[s] && positions[d] < positions[s]);
                if !anchors {
                    continue;
                }
                let sim = cosine_loop(h.row(d), h.row(s));
                if sim <= t {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some((bs, bd, bsrc)) => {
                        sim > bs
                            || (sim == bs
                                && (positions[d] < positions[bd]
                                    || (positions[d] == positions[bd]
                                        && positions[s] < positions[bsrc])))
                    }
                };
                if better {
                    best = Some((sim, d, s));
                }
            }
        }
        let Some((_, d, s)) = best else { break };
        is_dst[d] = true;
        is_src[s] = true;
        map.entry(positions[d]).or_default().push(positions[s]);
    }
    for v in map.values_mut() {
        v.sort_unstable();
    }
    map
}

/// Plain weighted average, falling back to the unweighted mean.
pub fn convex_merge_oracle(rows: &[Vec<f64>], weights: &[f64]) -> Vec<f64> {
    let total: f64 = weights.iter().sum();
    let w: Vec<f64> = if total > 0.0 {
        weights.iter().map(|x| x / total).collect()
    } else {
        vec![1.0 / rows.len() as f64; rows.len()]
    };
    let mut out = vec![0.0; rows[0].len()];
    for (r, wi) in rows.iter().zip(&w) {
        for (o, x) in out.iter_mut().zip(r) {
            *o += wi * x;
        }
    }
    out
}

pub fn random_layout(rng: &mut ChaCha8Rng, max_visual: usize) -> SequenceLayout {
    SequenceLayout::new(
        rng.random_range(0..4),
        rng.random_range(2..=max_visual),
        rng.random_range(1..6),
    )
}
