//! Per-stage wall-clock timings of one pruning pass on synthetic inputs.
//!
//! Timings vary run to run; the operation counts do not.

use std::time::Instant;

use asap_core::harness::{generate_sequence, LayoutSpec};
use asap_core::masking::{build_bidirectional_mask, compute_salience, masked_attention};
use asap_core::numerics::scaled_alignment;
use asap_core::pruning::{consolidate, salvage, select_topk};
use serde::Serialize;

use crate::args::BenchArgs;
use crate::CliError;

const STAGES: [&str; 4] = ["mask_build", "attention", "selection", "consolidation"];

#[derive(Debug, Serialize)]
pub struct StageTiming {
    pub stage: &'static str,
    pub samples_ms: Vec<f64>,
    pub mean_ms: f64,
    pub std_ms: f64,
}

#[derive(Debug, Serialize)]
pub struct OpCounts {
    pub tokens: usize,
    pub visual_tokens: usize,
    pub alignment_entries: usize,
    pub penalized_entries: usize,
    pub selected: usize,
    pub similarity_pairs: usize,
    pub merges: usize,
    pub salvaged: usize,
    pub shortfall: usize,
}

#[derive(Debug, Serialize)]
pub struct BenchReport {
    pub repetitions: usize,
    pub seed: u64,
    pub stages: Vec<StageTiming>,
    pub counts: OpCounts,
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

pub fn run(args: &BenchArgs) -> Result<BenchReport, CliError> {
    if args.repetitions == 0 {
        return Err(CliError::Usage("--repetitions must be at least 1".into()));
    }
    let h_args = &args.harness;
    let cfg = h_args.prune.to_config();
    let (h, layout) = generate_sequence(&h_args.layout_spec(), h_args.seed);
    cfg.validate(layout.visual_len())?;
    // independent single-head projections
    let qk_spec = LayoutSpec {
        dim: h_args.head_dim.max(1),
        prototypes: 0,
        ..h_args.layout_spec()
    };
    let (q, _) = generate_sequence(&qk_spec, h_args.seed.wrapping_add(1));
    let (k, _) = generate_sequence(&qk_spec, h_args.seed.wrapping_add(2));

    let mut samples = vec![Vec::with_capacity(args.repetitions); STAGES.len()];
    let mut counts = None;
    for _ in 0..args.repetitions {
        let t = Instant::now();
        let w = scaled_alignment(&q, &k)?;
        let sal = compute_salience(&w, &layout, cfg.mask.epsilon)?;
        let mask = build_bidirectional_mask(&sal, &layout, &cfg.mask)?;
        samples[0].push(ms(t));

        let t = Instant::now();
        let attn = masked_attention(&w, &mask)?;
        samples[1].push(ms(t));

        let t = Instant::now();
        let (selected, pool) = select_topk(&attn, &sal, &layout, &cfg)?;
        samples[2].push(ms(t));

        let t = Instant::now();
        let sel_sal: Vec<f64> = selected
            .iter()
            .map(|&i| sal.normalized_at(&layout, i))
            .collect();
        let merged = consolidate(
            &h.select_rows(&selected)?,
            &selected,
            &sel_sal,
            cfg.similarity_threshold,
        )?;
        let pool_mass: Vec<f64> = pool.iter().map(|&i| sal.raw_at(&layout, i)).collect();
        let saved = salvage(&pool, &pool_mass, merged.absorbed_count())?;
        samples[3].push(ms(t));

        let v = layout.visual_len();
        counts = Some(OpCounts {
            tokens: layout.total_len,
            visual_tokens: v,
            alignment_entries: w.rows() * w.cols(),
            penalized_entries: v * (v - 1) / 2,
            selected: selected.len(),
            similarity_pairs: selected.len() * selected.len().saturating_sub(1) / 2,
            merges: merged.absorbed_count(),
            salvaged: saved.indices.len(),
            shortfall: saved.shortfall,
        });
    }

    let stages = STAGES
        .iter()
        .zip(samples)
        .map(|(&stage, samples_ms)| {
            let n = samples_ms.len() as f64;
            let mean_ms = samples_ms.iter().sum::<f64>() / n;
            let std_ms = (samples_ms
                .iter()
                .map(|s| (s - mean_ms).powi(2))
                .sum::<f64>()
                / n)
                .sqrt();
            StageTiming {
                stage,
                samples_ms,
                mean_ms,
                std_ms,
            }
        })
        .collect();
    Ok(BenchReport {
        repetitions: args.repetitions,
        seed: h_args.seed,
        stages,
        counts: counts.expect("at least one repetition"),
    })
}
