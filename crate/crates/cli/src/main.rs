//! `asap`: pruning runs, FLOPs reports, mask traces and benchmarks.
//!
//! stdout carries only the machine-readable payload. Exit codes: 0 success,
//! 2 usage or validation error, 1 internal error.

mod args;
mod bench;

use std::fs;
use std::io::{self, Write};
use std::process::ExitCode;

use asap_core::cost_model::{cost_row, write_csv, ModelConfig, PruneSchedule, Stage, PRESET_NAMES};
use asap_core::harness::{generate_sequence, rope_decay_demo, RopeDecayConfig, ToyDecoder};
use asap_core::io::{read_matrix_file, write_matrix_file};
use asap_core::pruning::{asap_pass, AsapPass};
use asap_core::trace::{fate_trace, penalty_trace};
use asap_core::SequenceLayout;
use clap::Parser;
use serde_json::json;

use args::{Cli, Command, FlopsArgs, HarnessArgs, InputArgs, TraceArgs, TraceKind};

#[derive(Debug)]
enum CliError {
    Usage(String),
    Internal(String),
}

impl From<asap_core::Error> for CliError {
    fn from(e: asap_core::Error) -> Self {
        if e.is_validation() {
            CliError::Usage(e.to_string())
        } else {
            CliError::Internal(e.to_string())
        }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Internal(e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

fn main() -> ExitCode {
    let mut cli = Cli::parse();
    if let Ok(raw) = std::env::var("ASAP_SEED") {
        match raw.trim().parse::<u64>() {
            Ok(seed) => cli.command.set_seed(seed),
            Err(_) => {
                eprintln!("error: ASAP_SEED must be an unsigned integer, got {raw:?}");
                return ExitCode::from(2);
            }
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Internal(msg)) => {
            eprintln!("internal error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn run(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Prune(a) => {
            let pass = prune_inputs(&a.input)?;
            if let Some(path) = &a.out_hidden {
                write_matrix_file(path, &pass.result.merged_hidden)?;
            }
            emit(&format!("{}\n", pass.result.to_json()?))
        }
        Command::Flops(a) => cmd_flops(&a),
        Command::Trace(a) => cmd_trace(&a),
        Command::Demo(h) => cmd_demo(&h),
        Command::Bench(b) => {
            let report = bench::run(&b)?;
            emit(&format!(
                "{}\n",
                serde_json::to_string_pretty(&report).map_err(asap_core::Error::from)?
            ))
        }
    }
}

fn emit(payload: &str) -> CliResult<()> {
    let mut out = io::stdout().lock();
    out.write_all(payload.as_bytes())?;
    out.flush()?;
    Ok(())
}

fn read_input(path: &std::path::Path) -> CliResult<asap_core::Matrix> {
    read_matrix_file(path).map_err(|e| match e {
        asap_core::Error::Io(io) => {
            CliError::Usage(format!("cannot read {}: {io}", path.display()))
        }
        other => CliError::Usage(format!("{}: {other}", path.display())),
    })
}

/// Runs the pruning pass on matrix files or on a synthetic decoder run.
fn prune_inputs(input: &InputArgs) -> CliResult<AsapPass> {
    let cfg = input.harness.prune.to_config();
    if input.synthetic {
        let dec_cfg = input.harness.decoder_config();
        dec_cfg.validate()?;
        let (h, layout) = generate_sequence(&input.harness.layout_spec(), input.harness.seed);
        cfg.validate(layout.visual_len())?;
        let out = ToyDecoder::new(dec_cfg)?.forward(&h, &layout, Some(&cfg))?;
        return out
            .prune
            .ok_or_else(|| CliError::Internal("decoder skipped the pruning pass".into()));
    }
    let (Some(hp), Some(qp), Some(kp)) = (&input.hidden, &input.queries, &input.keys) else {
        return Err(CliError::Usage(
            "pass --synthetic, or all of --hidden, --queries and --keys".into(),
        ));
    };
    let h = read_input(hp)?;
    let q = read_input(qp)?;
    let k = read_input(kp)?;
    let hv = &input.harness;
    let layout = SequenceLayout::new(hv.system_tokens, hv.visual_tokens, hv.text_tokens);
    cfg.validate(layout.visual_len())?;
    Ok(asap_pass(&h, &q, &k, &layout, &cfg)?)
}

fn cmd_flops(a: &FlopsArgs) -> CliResult<()> {
    let mut cfg = match (&a.preset, a.hidden_d, a.ffn_m, a.layers, a.visual_tokens) {
        (Some(name), None, None, None, None) => ModelConfig::preset(name).ok_or_else(|| {
            CliError::Usage(format!(
                "unknown preset {name:?}; expected one of {}",
                PRESET_NAMES.join(", ")
            ))
        })?,
        (None, Some(d), Some(m), Some(l), Some(v)) => ModelConfig::new(d, m, l, v)?,
        _ => {
            return Err(CliError::Usage(
                "give either --preset or all of --hidden-d, --ffn-m, --layers, --visual-tokens"
                    .into(),
            ))
        }
    };
    cfg.kv_bytes_per_elem = a.kv_bytes_per_elem;
    cfg.validate()?;

    let mut rows = Vec::new();
    if a.schedule.is_empty() {
        rows.push(cost_row("vanilla", &PruneSchedule::identity(&cfg), &cfg)?);
    }
    for (i, spec) in a.schedule.iter().enumerate() {
        let (id, body) = match spec.split_once('=') {
            Some((id, body)) if !id.trim_start().starts_with(['[', '{']) => (id.to_string(), body),
            _ => (format!("schedule-{}", i + 1), spec.as_str()),
        };
        let json = if body.trim_start().starts_with('[') {
            body.to_string()
        } else {
            fs::read_to_string(body)
                .map_err(|e| CliError::Usage(format!("cannot read schedule {body}: {e}")))?
        };
        let schedule = PruneSchedule::from_json(&json, &cfg)?;
        rows.push(cost_row(&id, &schedule, &cfg)?);
    }
    let mut buf = Vec::new();
    write_csv(&rows, &mut buf)?;
    emit(&String::from_utf8_lossy(&buf))
}

fn cmd_trace(a: &TraceArgs) -> CliResult<()> {
    let pass = prune_inputs(&a.input)?;
    let visual = a.input.harness.visual_tokens;
    let orig_layout = SequenceLayout::new(
        a.input.harness.system_tokens,
        visual,
        a.input.harness.text_tokens,
    );
    let grid = a.grid;
    let image = match a.kind {
        TraceKind::Fate => fate_trace(&pass.result.fates(&orig_layout), grid)?,
        TraceKind::Penalty => penalty_trace(
            &pass.salience,
            &a.input.harness.prune.to_config().mask,
            grid,
        )?,
    };
    fs::write(&a.out, image.to_p2())?;
    Ok(())
}

fn cmd_demo(h: &HarnessArgs) -> CliResult<()> {
    let dec_cfg = h.decoder_config();
    dec_cfg.validate()?;
    let (hidden, layout) = generate_sequence(&h.layout_spec(), h.seed);
    let cfg = h.prune.to_config();
    cfg.validate(layout.visual_len())?;
    let dec = ToyDecoder::new(dec_cfg)?;
    let out = dec.forward(&hidden, &layout, Some(&cfg))?;
    let pass = out.prune.as_ref().expect("prune configured");

    let model = ModelConfig::new(
        dec_cfg.model_dim() as u64,
        dec_cfg.ffn_m as u64,
        dec_cfg.layers as u64,
        layout.visual_len() as u64,
    )?;
    let before = dec_cfg.prune_layer as u64 + 1;
    let stages = [
        Stage {
            layers: before,
            tokens: layout.visual_len() as u64,
        },
        Stage {
            layers: dec_cfg.layers as u64 - before,
            tokens: pass.layout.visual_len() as u64,
        },
    ];
    let schedule = PruneSchedule::new(stages.into_iter().filter(|s| s.layers > 0).collect());
    let cost = cost_row("demo", &schedule, &model)?;

    let distances = [0usize, 1, 2, 4, 8, 16, 32, 64, 128, 256, 512];
    let decay = rope_decay_demo(
        h.seed,
        &distances,
        &RopeDecayConfig {
            head_dim: dec_cfg.head_dim,
            draws: 256,
            tie_qk: true,
        },
    )?;

    let report = json!({
        "config": dec_cfg,
        "prune_config": cfg,
        "layout_before": layout,
        "layout_after": out.layout,
        "prune": pass.result.summary(),
        "cache_rows_per_layer": out.cache.rows_per_layer(),
        "flops": {
            "total_flops": cost.total_flops.to_string(),
            "ratio_percent": cost.ratio_percent,
            "kv_bytes": cost.kv_bytes.to_string(),
        },
        "rope_decay": decay,
    });
    emit(&format!(
        "{}\n",
        serde_json::to_string_pretty(&report).map_err(asap_core::Error::from)?
    ))
}
