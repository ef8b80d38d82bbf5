//! Top-k selection, salience-weighted consolidation and salvage.
//!
//! Selection keeps `budget_k` visual tokens. Consolidation then merges kept
//! tokens that are near-duplicates into a more salient anchor, which frees
//! one slot per absorbed token; salvage hands those slots back to the best
//! tokens of the pruned pool, ranked by raw attention mass.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::{
    build_bidirectional_mask, compute_salience, masked_attention, HeadAggregation, MaskConfig,
    SalienceProfile, SequenceLayout,
};
use crate::numerics::{cosine_similarity, scaled_alignment, Matrix};

pub const DEFAULT_SIMILARITY_THRESHOLD: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    /// Mean attention received from text-span queries.
    #[default]
    TextAttention,
    /// Normalized salience.
    Salience,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    pub budget_k: usize,
    /// Cosine similarity must strictly exceed this for a merge. 1.0 disables
    /// merging.
    pub similarity_threshold: f64,
    pub selection_mode: SelectionMode,
    pub mask: MaskConfig,
    pub head_aggregation: HeadAggregation,
}

impl PruneConfig {
    pub fn new(budget_k: usize) -> Self {
        Self {
            budget_k,
            similarity_threshold: DEFAULT_SIMILARITY_THRESHOLD,
            selection_mode: SelectionMode::default(),
            mask: MaskConfig::default(),
            head_aggregation: HeadAggregation::default(),
        }
    }

    pub fn validate(&self, visual_len: usize) -> Result<()> {
        validate_budget(self.budget_k, visual_len)?;
        let t = self.similarity_threshold;
        if !(t > -1.0 && t <= 1.0) {
            return Err(Error::Config(format!(
                "similarity threshold must lie in (-1, 1], got {t}"
            )));
        }
        self.mask.validate()
    }
}

fn validate_budget(k: usize, visual_len: usize) -> Result<()> {
    if k == 0 || k > visual_len {
        return Err(Error::Config(format!(
            "budget must satisfy 1 <= budget <= {visual_len} (visual tokens), got {k}"
        )));
    }
    Ok(())
}

/// Outcome of one pruning pass over the visual span. All indices are
/// original sequence positions.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneResult {
    /// Final visual tokens, ascending. Includes salvaged tokens.
    pub kept_indices: Vec<usize>,
    /// Destination -> absorbed sources.
    pub merge_map: BTreeMap<usize, Vec<usize>>,
    pub salvaged_indices: Vec<usize>,
    /// Vacated slots the pruned pool could not refill.
    pub shortfall: usize,
    /// Hidden states of `kept_indices`, row for row.
    pub merged_hidden: Matrix,
}

/// JSON form of a [`PruneResult`]; hidden states travel separately as a
/// binary matrix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneSummary {
    pub kept: Vec<usize>,
    pub merges: BTreeMap<usize, Vec<usize>>,
    pub salvaged: Vec<usize>,
    pub shortfall: usize,
}

/// What happened to a visual token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenFate {
    Retained,
    Salvaged,
    MergedAway,
    Dropped,
}

impl PruneResult {
    pub fn summary(&self) -> PruneSummary {
        PruneSummary {
            kept: self.kept_indices.clone(),
            merges: self.merge_map.clone(),
            salvaged: self.salvaged_indices.clone(),
            shortfall: self.shortfall,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.summary())?)
    }

    pub fn absorbed(&self) -> impl Iterator<Item = usize> + '_ {
        self.merge_map.values().flatten().copied()
    }

    /// Fate of every token in `layout.visual_span`, in order.
    pub fn fates(&self, layout: &SequenceLayout) -> Vec<TokenFate> {
        let mut fates = vec![TokenFate::Dropped; layout.visual_len()];
        let at = |pos: usize| pos - layout.visual_span.start;
        for &k in &self.kept_indices {
            fates[at(k)] = TokenFate::Retained;
        }
        for &s in &self.salvaged_indices {
            fates[at(s)] = TokenFate::Salvaged;
        }
        for s in self.absorbed() {
            fates[at(s)] = TokenFate::MergedAway;
        }
        fates
    }
}

/// Ranks `candidates` by descending score, ties to the lower index, and
/// splits them into the top `k` and the rest. Both halves come back
/// ascending.
fn split_top_k(candidates: &[usize], scores: &[f64], k: usize) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then(candidates[a].cmp(&candidates[b]))
    });
    let k = k.min(candidates.len());
    let mut top: Vec<usize> = order[..k].iter().map(|&o| candidates[o]).collect();
    let mut rest: Vec<usize> = order[k..].iter().map(|&o| candidates[o]).collect();
    top.sort_unstable();
    rest.sort_unstable();
    (top, rest)
}

/// Mean attention that each visual key receives from the text queries.
fn text_attention_scores(a: &Matrix, layout: &SequenceLayout) -> Result<Vec<f64>> {
    if layout.text_span.is_empty() {
        return Err(Error::Config(
            "text-attention scoring needs a nonempty text span".into(),
        ));
    }
    layout.check_square(a, "attention")?;
    let n_text = layout.text_len() as f64;
    Ok(layout
        .visual_span
        .clone()
        .map(|j| layout.text_span.clone().map(|i| a.get(i, j)).sum::<f64>() / n_text)
        .collect())
}

/// Returns `(selected, pruned_pool)`, both ascending.
pub fn select_topk(
    a: &Matrix,
    salience: &SalienceProfile,
    layout: &SequenceLayout,
    cfg: &PruneConfig,
) -> Result<(Vec<usize>, Vec<usize>)> {
    layout.require_visual()?;
    validate_budget(cfg.budget_k, layout.visual_len())?;
    let scores = match cfg.selection_mode {
        SelectionMode::TextAttention => text_attention_scores(a, layout)?,
        SelectionMode::Salience => {
            if salience.len() != layout.visual_len() {
                return Err(Error::Shape(format!(
                    "salience covers {} tokens, visual span has {}",
                    salience.len(),
                    layout.visual_len()
                )));
            }
            salience.normalized.clone()
        }
    };
    let candidates: Vec<usize> = layout.visual_span.clone().collect();
    Ok(split_top_k(&candidates, &scores, cfg.budget_k))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Consolidation {
    pub merge_map: BTreeMap<usize, Vec<usize>>,
    /// Selected tokens that were not absorbed, ascending.
    pub survivors: Vec<usize>,
    /// Hidden state of each survivor, merged where it absorbed sources.
    pub hidden: Matrix,
}

impl Consolidation {
    pub fn absorbed_count(&self) -> usize {
        self.merge_map.values().map(Vec::len).sum()
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Role {
    Free,
    Destination,
    Source,
}

/// Merges near-duplicate selected tokens.
///
/// `h` holds the hidden states of `selected` row for row, and `salience`
/// their normalized salience. Token `i` may absorb `j` when their cosine
/// similarity exceeds `threshold` and `ŝ_i ≥ ŝ_j` (equal salience: lower
/// position wins). Candidate pairs are taken greedily by descending
/// similarity, ties by destination then source position. A token is
/// absorbed at most once, and destinations are never absorbed.
pub fn consolidate(
    h: &Matrix,
    selected: &[usize],
    salience: &[f64],
    threshold: f64,
) -> Result<Consolidation> {
    let n = selected.len();
    if h.rows() != n || salience.len() != n {
        return Err(Error::Shape(format!(
            "consolidate got {} hidden rows and {} saliences for {n} tokens",
            h.rows(),
            salience.len()
        )));
    }
    let sim = cosine_similarity(h);

    // (similarity, destination slot, source slot)
    let mut pairs = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            let s = sim.get(a, b);
            if s <= threshold {
                continue;
            }
            let a_anchors = match salience[a].total_cmp(&salience[b]) {
                Ordering::Greater => true,
                Ordering::Less => false,
                Ordering::Equal => selected[a] < selected[b],
            };
            pairs.push(if a_anchors { (s, a, b) } else { (s, b, a) });
        }
    }
    pairs.sort_by(|x, y| {
        y.0.total_cmp(&x.0)
            .then(selected[x.1].cmp(&selected[y.1]))
            .then(selected[x.2].cmp(&selected[y.2]))
    });

    let mut role = vec![Role::Free; n];
    let mut sources: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (_, dst, src) in pairs {
        if role[src] != Role::Free || role[dst] == Role::Source {
            continue;
        }
        role[dst] = Role::Destination;
        role[src] = Role::Source;
        sources[dst].push(src);
    }

    let mut order: Vec<usize> = (0..n).filter(|&i| role[i] != Role::Source).collect();
    order.sort_by_key(|&i| selected[i]);

    let mut merge_map = BTreeMap::new();
    let mut rows = Vec::with_capacity(order.len() * h.cols());
    for &dst in &order {
        if sources[dst].is_empty() {
            rows.extend_from_slice(h.row(dst));
            continue;
        }
        let group: Vec<usize> = std::iter::once(dst)
            .chain(sources[dst].iter().copied())
            .collect();
        rows.extend(salience_weighted_merge(h, &group, salience));
        let mut absorbed: Vec<usize> = sources[dst].iter().map(|&s| selected[s]).collect();
        absorbed.sort_unstable();
        merge_map.insert(selected[dst], absorbed);
    }

    Ok(Consolidation {
        merge_map,
        survivors: order.iter().map(|&i| selected[i]).collect(),
        hidden: Matrix::new(order.len(), h.cols(), rows)?,
    })
}

/// Convex combination of the rows in `group` weighted by salience. The first
/// member is the anchor. Falls back to the plain mean when every weight is
/// zero.
pub fn salience_weighted_merge(h: &Matrix, group: &[usize], salience: &[f64]) -> Vec<f64> {
    let mut weights: Vec<f64> = group.iter().map(|&g| salience[g]).collect();
    let mut total: f64 = weights.iter().sum();
    if total <= 0.0 {
        weights.fill(1.0);
        total = group.len() as f64;
    }
    // Written as anchor + Σ w_s/W · (h_s − anchor) so that identical
    // participants reproduce the anchor bit for bit.
    let anchor = h.row(group[0]);
    let mut out = anchor.to_vec();
    for (&g, &w) in group.iter().zip(&weights).skip(1) {
        let c = w / total;
        for (o, (&x, &a)) in out.iter_mut().zip(h.row(g).iter().zip(anchor)) {
            *o += c * (x - a);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Salvage {
    /// Ascending.
    pub indices: Vec<usize>,
    pub shortfall: usize,
}

/// Picks the `a` pool members with the highest raw mass (ties to the lower
/// index). Asking for more than the pool holds returns the whole pool and
/// reports the difference as shortfall.
pub fn salvage(pool: &[usize], pool_mass: &[f64], a: usize) -> Result<Salvage> {
    if pool.len() != pool_mass.len() {
        return Err(Error::Shape(format!(
            "{} pool indices with {} masses",
            pool.len(),
            pool_mass.len()
        )));
    }
    let (indices, _) = split_top_k(pool, pool_mass, a);
    Ok(Salvage {
        shortfall: a.saturating_sub(indices.len()),
        indices,
    })
}

/// Everything one pruning pass produces.
#[derive(Debug, Clone, PartialEq)]
pub struct AsapPass {
    pub result: PruneResult,
    /// Layout of the compressed sequence.
    pub layout: SequenceLayout,
    /// Hidden states of the compressed sequence.
    pub hidden: Matrix,
    /// Original position of each row of `hidden`.
    pub positions: Vec<usize>,
    pub salience: SalienceProfile,
    pub selected: Vec<usize>,
    pub pruned_pool: Vec<usize>,
}

/// Full pass from single-head queries and keys.
pub fn asap_pass(
    h: &Matrix,
    q: &Matrix,
    k: &Matrix,
    layout: &SequenceLayout,
    cfg: &PruneConfig,
) -> Result<AsapPass> {
    asap_pass_aligned(h, &scaled_alignment(q, k)?, layout, cfg)
}

/// Full pass from an already computed pre-softmax alignment `w`.
pub fn asap_pass_aligned(
    h: &Matrix,
    w: &Matrix,
    layout: &SequenceLayout,
    cfg: &PruneConfig,
) -> Result<AsapPass> {
    layout.require_visual()?;
    cfg.validate(layout.visual_len())?;
    if h.rows() != layout.total_len {
        return Err(Error::Shape(format!(
            "{} hidden rows for {} tokens",
            h.rows(),
            layout.total_len
        )));
    }

    let salience = compute_salience(w, layout, cfg.mask.epsilon)?;
    let mask = build_bidirectional_mask(&salience, layout, &cfg.mask)?;
    let attn = masked_attention(w, &mask)?;
    let (selected, pruned_pool) = select_topk(&attn, &salience, layout, cfg)?;

    let sel_salience: Vec<f64> = selected
        .iter()
        .map(|&i| salience.normalized_at(layout, i))
        .collect();
    let merged = consolidate(
        &h.select_rows(&selected)?,
        &selected,
        &sel_salience,
        cfg.similarity_threshold,
    )?;

    let pool_mass: Vec<f64> = pruned_pool
        .iter()
        .map(|&i| salience.raw_at(layout, i))
        .collect();
    let rescued = salvage(&pruned_pool, &pool_mass, merged.absorbed_count())?;

    // Interleave survivors and salvaged tokens back into position order.
    let mut visual: Vec<(usize, Option<usize>)> = merged
        .survivors
        .iter()
        .enumerate()
        .map(|(row, &pos)| (pos, Some(row)))
        .chain(rescued.indices.iter().map(|&pos| (pos, None)))
        .collect();
    visual.sort_unstable_by_key(|&(pos, _)| pos);

    let mut visual_hidden = Vec::with_capacity(visual.len() * h.cols());
    for &(pos, row) in &visual {
        match row {
            Some(r) => visual_hidden.extend_from_slice(merged.hidden.row(r)),
            None => visual_hidden.extend_from_slice(h.row(pos)),
        }
    }
    let kept_indices: Vec<usize> = visual.iter().map(|&(pos, _)| pos).collect();
    let merged_hidden = Matrix::new(kept_indices.len(), h.cols(), visual_hidden)?;

    let positions: Vec<usize> = layout
        .system_span
        .clone()
        .chain(kept_indices.iter().copied())
        .chain(layout.text_span.clone())
        .collect();
    let hidden = h
        .select_rows(&layout.system_span.clone().collect::<Vec<_>>())?
        .vstack(&merged_hidden)?
        .vstack(&h.select_rows(&layout.text_span.clone().collect::<Vec<_>>())?)?;
    let new_layout =
        SequenceLayout::new(layout.system_len(), kept_indices.len(), layout.text_len());

    Ok(AsapPass {
        result: PruneResult {
            kept_indices,
            merge_map: merged.merge_map,
            salvaged_indices: rescued.indices,
            shortfall: rescued.shortfall,
            merged_hidden,
        },
        layout: new_layout,
        hidden,
        positions,
        salience,
        selected,
        pruned_pool,
    })
}

/// Causal-attention baseline: top-k visual tokens by mean attention from the
/// text queries, ascending.
pub fn fastv_pass(a_causal: &Matrix, layout: &SequenceLayout, k: usize) -> Result<Vec<usize>> {
    layout.require_visual()?;
    validate_budget(k, layout.visual_len())?;
    let scores = text_attention_scores(a_causal, layout)?;
    let candidates: Vec<usize> = layout.visual_span.clone().collect();
    Ok(split_top_k(&candidates, &scores, k).0)
}
