//! Trajectory CSV files: one row per generation.
//!
//! Reals are written in scientific notation with 17 significant digits, so
//! every finite `f64` survives a write/read round trip exactly.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use collapse_core::autophagy::GenerationRecord;

pub const TRAJECTORY_HEADER: &str = "generation,effective_rank,perplexity,mean_lm_loss,mean_asnc_loss,distinct_2";

/// The numeric part of a [`GenerationRecord`].
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryPoint {
    pub generation: usize,
    pub effective_rank: f64,
    pub perplexity: f64,
    pub mean_lm_loss: f64,
    pub mean_asnc_loss: f64,
    pub distinct_2: f64,
}

impl From<&GenerationRecord> for TrajectoryPoint {
    fn from(r: &GenerationRecord) -> Self {
        TrajectoryPoint {
            generation: r.generation,
            effective_rank: r.effective_rank,
            perplexity: r.perplexity,
            mean_lm_loss: r.mean_lm_loss,
            mean_asnc_loss: r.mean_asnc_loss,
            distinct_2: r.distinct_2,
        }
    }
}

impl TrajectoryPoint {
    fn values(&self) -> [(&'static str, f64); 5] {
        [
            ("effective_rank", self.effective_rank),
            ("perplexity", self.perplexity),
            ("mean_lm_loss", self.mean_lm_loss),
            ("mean_asnc_loss", self.mean_asnc_loss),
            ("distinct_2", self.distinct_2),
        ]
    }
}

/// CSV text for `points`, which must be finite and numbered `0, 1, …`.
pub fn format_trajectory(points: &[TrajectoryPoint]) -> Result<String> {
    let mut s = String::from(TRAJECTORY_HEADER);
    s.push('\n');
    for (i, p) in points.iter().enumerate() {
        if p.generation != i {
            bail!("trajectory row {i} is labelled generation {}", p.generation);
        }
        write!(s, "{}", p.generation)?;
        for (name, v) in p.values() {
            if !v.is_finite() {
                bail!("refusing to write non-finite {name} ({v}) for generation {i}");
            }
            write!(s, ",{v:.16e}")?;
        }
        s.push('\n');
    }
    Ok(s)
}

pub fn parse_trajectory(text: &str) -> Result<Vec<TrajectoryPoint>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == TRAJECTORY_HEADER => {}
        _ => bail!("line 1: expected header `{TRAJECTORY_HEADER}`"),
    }
    let mut points = Vec::new();
    for (i, line) in lines {
        let ln = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 6 {
            bail!("line {ln}: expected 6 fields, found {}", fields.len());
        }
        let generation: usize = fields[0]
            .parse()
            .with_context(|| format!("line {ln}: bad generation `{}`", fields[0]))?;
        if generation != points.len() {
            bail!("line {ln}: generation {generation} breaks the sequence 0..n");
        }
        let mut v = [0.0f64; 5];
        for (slot, f) in v.iter_mut().zip(&fields[1..]) {
            *slot = f.parse().with_context(|| format!("line {ln}: bad number `{f}`"))?;
            if !slot.is_finite() {
                bail!("line {ln}: non-finite value `{f}`");
            }
        }
        points.push(TrajectoryPoint {
            generation,
            effective_rank: v[0],
            perplexity: v[1],
            mean_lm_loss: v[2],
            mean_asnc_loss: v[3],
            distinct_2: v[4],
        });
    }
    Ok(points)
}

pub fn write_trajectory(points: &[TrajectoryPoint], path: &Path) -> Result<()> {
    let text = format_trajectory(points)?;
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn read_trajectory(path: &Path) -> Result<Vec<TrajectoryPoint>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_trajectory(&text).with_context(|| format!("parsing {}", path.display()))
}
