//! On-disk formats: checkpoint JSON, curve CSV, run metadata, contribution
//! dumps and the SVG learning curve.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::Context as _;
use coca::diffusion::PretrainConfig;
use coca::trainer::{EpochLog, RunStatus};
use coca::{ContributionProfile, DenoiserParams, MixtureConfig};
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, ScheduleConfig};
use crate::Invalid;

pub const CURVE_FILE: &str = "curve.csv";
pub const META_FILE: &str = "meta.json";
pub const CONTRIBUTIONS_FILE: &str = "contributions.jsonl";
pub const SVG_FILE: &str = "curve.svg";

/// Column order of `curve.csv`.
pub const CURVE_COLUMNS: [&str; 6] =
    ["epoch", "reward_queries", "mean_reward", "std_reward", "clip_fraction", "degenerate_count"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: String,
    pub seed: u64,
    pub data: MixtureConfig,
    pub schedule: ScheduleConfig,
    pub pretrain: PretrainConfig,
    pub final_loss: Option<f64>,
    pub params: serde_json::Value,
}

impl Checkpoint {
    pub fn params(&self) -> anyhow::Result<DenoiserParams> {
        DenoiserParams::from_json(&self.params).map_err(|e| Invalid(format!("checkpoint params: {e}")).into())
    }

    pub fn read(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| Invalid(format!("{}: {e}", path.display())).into())
    }

    pub fn write(&self, path: &Path) -> anyhow::Result<()> {
        write_json(path, self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub epoch: usize,
    pub reward_queries: u64,
    pub mean_reward: f64,
    pub std_reward: f64,
    pub clip_fraction: f64,
    pub degenerate_count: usize,
}

impl From<&EpochLog> for CurveRow {
    fn from(e: &EpochLog) -> Self {
        Self {
            epoch: e.epoch,
            reward_queries: e.reward_queries,
            mean_reward: e.mean_reward,
            std_reward: e.std_reward,
            clip_fraction: e.clip_fraction,
            degenerate_count: e.degenerate_count,
        }
    }
}

pub fn write_curve(path: &Path, rows: &[CurveRow]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    if rows.is_empty() {
        w.write_record(CURVE_COLUMNS)?;
    }
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_curve(path: &Path) -> anyhow::Result<Vec<CurveRow>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let headers: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    if headers != CURVE_COLUMNS {
        return Err(Invalid(format!("{}: unexpected columns {headers:?}", path.display())).into());
    }
    r.deserialize().map(|row| row.map_err(Into::into)).collect()
}

/// Self-describing record of a run; enough to replay it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub version: String,
    pub seed: u64,
    pub config: RunConfig,
    pub checkpoint: Checkpoint,
    pub status: RunStatus,
    pub epochs_completed: usize,
    pub reward_queries: u64,
    /// Per-epoch metrics not carried by the curve file.
    pub epochs: Vec<EpochLog>,
}

impl RunMeta {
    pub fn read(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| Invalid(format!("{}: {e}", path.display())).into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContributionLine {
    pub epoch: usize,
    pub index: usize,
    pub context_id: usize,
    pub terminal_reward: f64,
    pub advantage: Option<f64>,
    /// Absent when the run never computed one (reward metric with a
    /// weight-free method).
    pub profile: Option<ContributionProfile>,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Mean reward against cumulative reward queries, one polyline per series.
pub fn learning_curve_svg(title: &str, series: &[(String, Vec<CurveRow>)]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const PAD: f64 = 50.0;
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

    let points = series.iter().flat_map(|(_, rows)| rows.iter());
    let (mut x_max, mut y_min, mut y_max) = (1.0f64, f64::INFINITY, f64::NEG_INFINITY);
    for r in points {
        x_max = x_max.max(r.reward_queries as f64);
        y_min = y_min.min(r.mean_reward);
        y_max = y_max.max(r.mean_reward);
    }
    if !y_min.is_finite() {
        (y_min, y_max) = (0.0, 1.0);
    }
    if y_max - y_min < 1e-12 {
        y_max = y_min + 1.0;
    }
    let sx = |x: f64| PAD + x / x_max * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - y_min) / (y_max - y_min) * (H - 2.0 * PAD);

    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="14" text-anchor="middle">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    let _ = writeln!(svg, r#"<path d="M{PAD} {PAD} V{} H{}" stroke="black" fill="none"/>"#, H - PAD, W - PAD);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle">reward queries (max {x_max})</text>"#,
        W / 2.0,
        H - 12.0
    );
    let _ =
        writeln!(svg, r#"<text x="{PAD}" y="{}" font-family="sans-serif" font-size="11">{y_max:.3}</text>"#, PAD - 6.0);
    let _ = writeln!(
        svg,
        r#"<text x="{PAD}" y="{}" font-family="sans-serif" font-size="11">{y_min:.3}</text>"#,
        H - PAD + 14.0
    );
    for (i, (name, rows)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> =
            rows.iter().map(|r| format!("{:.2},{:.2}", sx(r.reward_queries as f64), sy(r.mean_reward))).collect();
        let _ =
            writeln!(svg, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, pts.join(" "));
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" fill="{color}">{}</text>"#,
            W - PAD - 120.0,
            PAD + 16.0 * (i as f64 + 1.0),
            escape(name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
