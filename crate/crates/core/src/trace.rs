//! Plain-text (P2) graymap renderings of the visual span, one pixel per
//! visual token in row-major patch order.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::masking::{MaskConfig, SalienceProfile};
use crate::pruning::TokenFate;

pub const MAX_GRAY: u8 = 255;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graymap {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Graymap {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::Shape(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn to_p2(&self) -> String {
        let mut s = format!("P2\n{} {}\n{}\n", self.width, self.height, MAX_GRAY);
        for row in self.pixels.chunks(self.width.max(1)) {
            let line: Vec<String> = row.iter().map(u8::to_string).collect();
            let _ = writeln!(s, "{}", line.join(" "));
        }
        s
    }

    /// Parses the subset of P2 that [`Graymap::to_p2`] writes, plus `#`
    /// comments.
    pub fn parse_p2(text: &str) -> Result<Self> {
        let bad = |m: &str| Error::Config(format!("invalid P2 graymap: {m}"));
        let mut tokens = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or(""))
            .flat_map(str::split_whitespace);
        if tokens.next() != Some("P2") {
            return Err(bad("missing P2 magic"));
        }
        let mut num = |what: &str| -> Result<usize> {
            tokens
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| bad(what))
        };
        let width = num("width")?;
        let height = num("height")?;
        let maxval = num("maxval")?;
        if maxval != MAX_GRAY as usize {
            return Err(bad("maxval must be 255"));
        }
        let mut pixels = Vec::with_capacity(width * height);
        for _ in 0..width * height {
            let v = num("pixel")?;
            pixels.push(u8::try_from(v).map_err(|_| bad("pixel above 255"))?);
        }
        Self::new(width, height, pixels)
    }
}

/// Grid for `count` tokens: the explicit `rows x cols`, or the square root
/// when `count` is a perfect square.
pub fn resolve_grid(count: usize, dims: Option<(usize, usize)>) -> Result<(usize, usize)> {
    match dims {
        Some((r, c)) if r * c == count => Ok((r, c)),
        Some((r, c)) => Err(Error::Config(format!(
            "grid {r}x{c} does not hold {count} visual tokens"
        ))),
        None => {
            let side = (count as f64).sqrt().round() as usize;
            if side * side == count && count > 0 {
                Ok((side, side))
            } else {
                Err(Error::Config(format!(
                    "{count} visual tokens do not form a square grid; pass explicit dimensions"
                )))
            }
        }
    }
}

pub fn fate_gray(fate: TokenFate) -> u8 {
    match fate {
        TokenFate::Retained => 255,
        TokenFate::Salvaged => 192,
        TokenFate::MergedAway => 64,
        TokenFate::Dropped => 0,
    }
}

pub fn fate_trace(fates: &[TokenFate], dims: Option<(usize, usize)>) -> Result<Graymap> {
    let (rows, cols) = resolve_grid(fates.len(), dims)?;
    Graymap::new(cols, rows, fates.iter().copied().map(fate_gray).collect())
}

/// Forward-visibility penalty of each visual key: 255 for no penalty,
/// 0 at the `ln ε` floor, linear in the log-penalty in between.
pub fn penalty_trace(
    salience: &SalienceProfile,
    cfg: &MaskConfig,
    dims: Option<(usize, usize)>,
) -> Result<Graymap> {
    cfg.validate()?;
    let (rows, cols) = resolve_grid(salience.len(), dims)?;
    let floor = cfg.epsilon.ln();
    let pixels = salience
        .normalized
        .iter()
        .map(|&s| {
            let frac = if floor < 0.0 {
                (1.0 - cfg.penalty(s) / floor).clamp(0.0, 1.0)
            } else {
                1.0
            };
            (frac * MAX_GRAY as f64).round() as u8
        })
        .collect();
    Graymap::new(cols, rows, pixels)
}
