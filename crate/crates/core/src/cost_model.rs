//! Analytic FLOPs and KV-cache footprint of visual tokens.
//!
//! Per decoder layer, `v` visual tokens cost `4vd² + 2v²d + 3vdm`: four
//! `d×d` projections, the two `v×v` attention products and three `d×m` FFN
//! matrices. Only visual tokens are counted. A schedule runs `L_n` layers
//! at `v_n` tokens for each stage `n`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden_d: u64,
    pub ffn_m: u64,
    pub layers: u64,
    pub visual_tokens: u64,
    pub kv_bytes_per_elem: u64,
}

pub const PRESET_NAMES: [&str; 3] = ["llava-1.5-7b", "llava-1.5-13b", "llava-next-7b"];

impl ModelConfig {
    pub fn new(hidden_d: u64, ffn_m: u64, layers: u64, visual_tokens: u64) -> Result<Self> {
        let cfg = Self {
            hidden_d,
            ffn_m,
            layers,
            visual_tokens,
            kv_bytes_per_elem: 2,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn preset(name: &str) -> Option<Self> {
        let (d, m, l, v) = match name {
            "llava-1.5-7b" => (4096, 11008, 32, 576),
            "llava-1.5-13b" => (5120, 13824, 40, 576),
            "llava-next-7b" => (4096, 11008, 32, 2880),
            _ => return None,
        };
        Some(Self {
            hidden_d: d,
            ffn_m: m,
            layers: l,
            visual_tokens: v,
            kv_bytes_per_elem: 2,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("hidden_d", self.hidden_d),
            ("ffn_m", self.ffn_m),
            ("layers", self.layers),
            ("visual_tokens", self.visual_tokens),
            ("kv_bytes_per_elem", self.kv_bytes_per_elem),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    pub layers: u64,
    pub tokens: u64,
}

/// A stage as written in schedule files: an absolute token count or a
/// keep-ratio of the model's visual tokens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
pub enum StageSpec {
    Tokens { layers: u64, tokens: u64 },
    Ratio { layers: u64, ratio: f64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneSchedule {
    pub stages: Vec<Stage>,
}

/// `⌈ratio · v⌉`.
pub fn tokens_for_ratio(ratio: f64, v: u64) -> Result<u64> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Schedule(format!(
            "ratio must lie in (0, 1], got {ratio}"
        )));
    }
    Ok((ratio * v as f64).ceil() as u64)
}

impl PruneSchedule {
    pub fn new(stages: Vec<Stage>) -> Self {
        Self { stages }
    }

    /// Every layer at the full visual token count.
    pub fn identity(cfg: &ModelConfig) -> Self {
        Self::single(cfg.layers, cfg.visual_tokens)
    }

    pub fn single(layers: u64, tokens: u64) -> Self {
        Self::new(vec![Stage { layers, tokens }])
    }

    pub fn from_specs(specs: &[StageSpec], cfg: &ModelConfig) -> Result<Self> {
        let stages = specs
            .iter()
            .map(|s| match *s {
                StageSpec::Tokens { layers, tokens } => Ok(Stage { layers, tokens }),
                StageSpec::Ratio { layers, ratio } => Ok(Stage {
                    layers,
                    tokens: tokens_for_ratio(ratio, cfg.visual_tokens)?,
                }),
            })
            .collect::<Result<_>>()?;
        Ok(Self { stages })
    }

    pub fn from_json(json: &str, cfg: &ModelConfig) -> Result<Self> {
        let specs: Vec<StageSpec> = serde_json::from_str(json)
            .map_err(|e| Error::Schedule(format!("invalid schedule JSON: {e}")))?;
        Self::from_specs(&specs, cfg)
    }

    pub fn total_layers(&self) -> u64 {
        self.stages.iter().map(|s| s.layers).sum()
    }

    fn check(&self, cfg: &ModelConfig) -> Result<()> {
        cfg.validate()?;
        if self.total_layers() != cfg.layers {
            return Err(Error::Schedule(format!(
                "schedule covers {} layers, model has {}",
                self.total_layers(),
                cfg.layers
            )));
        }
        Ok(())
    }
}

pub fn layer_flops(v: u64, cfg: &ModelConfig) -> u128 {
    let (v, d, m) = (v as u128, cfg.hidden_d as u128, cfg.ffn_m as u128);
    4 * v * d * d + 2 * v * v * d + 3 * v * d * m
}

pub fn schedule_flops(schedule: &PruneSchedule, cfg: &ModelConfig) -> Result<u128> {
    schedule.check(cfg)?;
    Ok(schedule
        .stages
        .iter()
        .map(|s| s.layers as u128 * layer_flops(s.tokens, cfg))
        .sum())
}

pub fn vanilla_flops(cfg: &ModelConfig) -> u128 {
    cfg.layers as u128 * layer_flops(cfg.visual_tokens, cfg)
}

pub fn flops_ratio(schedule: &PruneSchedule, cfg: &ModelConfig) -> Result<f64> {
    let pruned = schedule_flops(schedule, cfg)?;
    Ok(pruned as f64 / vanilla_flops(cfg) as f64)
}

/// Keys and values for `tokens` tokens in every layer.
pub fn kv_cache_bytes(tokens: u64, cfg: &ModelConfig) -> u128 {
    tokens as u128 * cfg.layers as u128 * 2 * cfg.hidden_d as u128 * cfg.kv_bytes_per_elem as u128
}

/// KV bytes when each stage caches only its own token count.
pub fn schedule_kv_bytes(schedule: &PruneSchedule, cfg: &ModelConfig) -> Result<u128> {
    schedule.check(cfg)?;
    Ok(schedule
        .stages
        .iter()
        .map(|s| {
            s.tokens as u128
                * s.layers as u128
                * 2
                * cfg.hidden_d as u128
                * cfg.kv_bytes_per_elem as u128
        })
        .sum())
}

pub fn tflops_display(flops: u128) -> String {
    format!("{:.3}", flops as f64 / 1e12)
}

pub fn percent_display(ratio: f64) -> String {
    format!("{:.2}", ratio * 100.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub schedule_id: String,
    pub total_flops: u128,
    pub tflops_display: String,
    pub ratio_percent: String,
    pub kv_bytes: u128,
}

pub fn cost_row(id: &str, schedule: &PruneSchedule, cfg: &ModelConfig) -> Result<CostRow> {
    let total = schedule_flops(schedule, cfg)?;
    Ok(CostRow {
        schedule_id: id.to_string(),
        total_flops: total,
        tflops_display: tflops_display(total),
        ratio_percent: percent_display(flops_ratio(schedule, cfg)?),
        kv_bytes: schedule_kv_bytes(schedule, cfg)?,
    })
}

pub fn write_csv<W: Write>(rows: &[CostRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "schedule_id",
        "total_flops",
        "tflops_display",
        "ratio_percent",
        "kv_bytes",
    ])?;
    for r in rows {
        // csv's serde path cannot encode u128
        w.write_record([
            r.schedule_id.as_str(),
            &r.total_flops.to_string(),
            &r.tflops_display,
            &r.ratio_percent,
            &r.kv_bytes.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
