//! Queries-to-threshold summaries across run directories.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use coca::mdp::RewardKind;
use coca::Method;
use serde::Serialize;

use crate::artifacts::{read_curve, CurveRow, RunMeta, CURVE_FILE, META_FILE};
use crate::Invalid;

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub label: String,
    pub seed: u64,
    pub reward_kind: RewardKind,
    pub curve: Vec<CurveRow>,
}

pub fn method_label(method: Method, beta: f64) -> String {
    match method {
        Method::BetaMix => format!("beta_mix({beta})"),
        m => m.name().to_string(),
    }
}

impl RunSummary {
    pub fn load(dir: &Path) -> anyhow::Result<Self> {
        let meta = RunMeta::read(&dir.join(META_FILE))?;
        let curve = read_curve(&dir.join(CURVE_FILE))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            label: method_label(meta.config.train.method, meta.config.train.beta),
            seed: meta.seed,
            reward_kind: meta.config.reward.kind,
            curve,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdRule {
    Fixed(f64),
    /// Per seed: halfway between the epoch-0 mean reward and the best mean
    /// reward any run with that seed reached.
    Midpoint,
}

/// Cumulative queries at the first epoch whose mean reward reaches `threshold`.
pub fn queries_to_threshold(curve: &[CurveRow], threshold: f64) -> Option<u64> {
    curve.iter().find(|r| r.mean_reward >= threshold).map(|r| r.reward_queries)
}

/// Threshold for a group of runs sharing a seed.
pub fn midpoint_threshold<'a>(curves: impl IntoIterator<Item = &'a [CurveRow]>) -> Option<f64> {
    let mut starts = Vec::new();
    let mut best = f64::NEG_INFINITY;
    for c in curves {
        if let Some(first) = c.first() {
            starts.push(first.mean_reward);
        }
        best = c.iter().map(|r| r.mean_reward).fold(best, f64::max);
    }
    if starts.is_empty() {
        return None;
    }
    let untrained = starts.iter().sum::<f64>() / starts.len() as f64;
    Some(0.5 * (untrained + best))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunResult {
    pub dir: String,
    pub label: String,
    pub seed: u64,
    pub threshold: f64,
    /// `None` when the threshold was never reached.
    pub queries: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairStat {
    pub numerator: String,
    pub denominator: String,
    pub seeds: usize,
    /// Seeds where neither run reached the threshold.
    pub unresolved: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub infinite: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub results: Vec<RunResult>,
    pub pairs: Vec<PairStat>,
}

/// `numerator / denominator` queries; infinite when only the numerator
/// misses, zero when only the denominator misses.
pub fn query_ratio(numerator: Option<u64>, denominator: Option<u64>) -> Option<f64> {
    match (numerator, denominator) {
        (Some(a), Some(b)) => Some(a as f64 / b as f64),
        (None, Some(_)) => Some(f64::INFINITY),
        (Some(_), None) => Some(0.0),
        (None, None) => None,
    }
}

pub fn compare(runs: &[RunSummary], rule: ThresholdRule) -> anyhow::Result<Comparison> {
    if runs.len() < 2 {
        return Err(Invalid(format!("need at least two run directories, got {}", runs.len())).into());
    }
    if let Some(other) = runs.iter().find(|r| r.reward_kind != runs[0].reward_kind) {
        return Err(Invalid(format!(
            "incompatible reward kinds: {} uses {:?}, {} uses {:?}",
            runs[0].dir.display(),
            runs[0].reward_kind,
            other.dir.display(),
            other.reward_kind
        ))
        .into());
    }

    // Repeated (label, seed) pairs get a suffix so every run stays addressable.
    let mut seen: BTreeMap<(String, u64), usize> = BTreeMap::new();
    let labels: Vec<String> = runs
        .iter()
        .map(|r| {
            let n = seen.entry((r.label.clone(), r.seed)).or_insert(0);
            *n += 1;
            if *n == 1 {
                r.label.clone()
            } else {
                format!("{}#{}", r.label, n)
            }
        })
        .collect();

    let mut by_seed: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, r) in runs.iter().enumerate() {
        by_seed.entry(r.seed).or_default().push(i);
    }
    let mut thresholds = BTreeMap::new();
    for (seed, idx) in &by_seed {
        let t = match rule {
            ThresholdRule::Fixed(t) => t,
            ThresholdRule::Midpoint => midpoint_threshold(idx.iter().map(|&i| runs[i].curve.as_slice()))
                .ok_or_else(|| Invalid(format!("seed {seed}: no epochs to derive a threshold from")))?,
        };
        thresholds.insert(*seed, t);
    }

    let results: Vec<RunResult> = runs
        .iter()
        .zip(&labels)
        .map(|(r, label)| {
            let threshold = thresholds[&r.seed];
            RunResult {
                dir: r.dir.display().to_string(),
                label: label.clone(),
                seed: r.seed,
                threshold,
                queries: queries_to_threshold(&r.curve, threshold),
            }
        })
        .collect();

    let mut distinct: Vec<&str> = Vec::new();
    for l in &labels {
        if !distinct.contains(&l.as_str()) {
            distinct.push(l);
        }
    }
    let mut pairs = Vec::new();
    for (a_i, a) in distinct.iter().enumerate() {
        for b in distinct.iter().skip(a_i + 1) {
            let mut ratios = Vec::new();
            let mut unresolved = 0;
            for seed in by_seed.keys() {
                let find = |l: &str| results.iter().find(|r| r.label == l && r.seed == *seed);
                if let (Some(x), Some(y)) = (find(a), find(b)) {
                    match query_ratio(x.queries, y.queries) {
                        Some(v) => ratios.push(v),
                        None => unresolved += 1,
                    }
                }
            }
            if ratios.is_empty() && unresolved == 0 {
                continue;
            }
            let mean = if ratios.is_empty() { f64::NAN } else { ratios.iter().sum::<f64>() / ratios.len() as f64 };
            pairs.push(PairStat {
                numerator: a.to_string(),
                denominator: b.to_string(),
                seeds: ratios.len() + unresolved,
                unresolved,
                mean,
                min: ratios.iter().copied().fold(f64::INFINITY, f64::min),
                max: ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                infinite: ratios.iter().any(|r| r.is_infinite()),
            });
        }
    }
    Ok(Comparison { results, pairs })
}

fn fmt_queries(q: Option<u64>) -> String {
    q.map_or_else(|| "inf (not reached)".to_string(), |v| v.to_string())
}

pub fn render_text(c: &Comparison) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<40} {:<16} {:>6} {:>12} {:>20}", "run", "method", "seed", "threshold", "queries");
    for r in &c.results {
        let _ = writeln!(
            out,
            "{:<40} {:<16} {:>6} {:>12.5} {:>20}",
            r.dir,
            r.label,
            r.seed,
            r.threshold,
            fmt_queries(r.queries)
        );
    }
    if !c.pairs.is_empty() {
        let _ = writeln!(out);
        let _ = writeln!(out, "{:<34} {:>6} {:>10} {:>10} {:>10}", "ratio (queries)", "seeds", "mean", "min", "max");
        for p in &c.pairs {
            let name = format!("{} / {}", p.numerator, p.denominator);
            let flag = if p.infinite { "  [never reached on some seed]" } else { "" };
            let _ = writeln!(out, "{:<34} {:>6} {:>10.4} {:>10.4} {:>10.4}{flag}", name, p.seeds, p.mean, p.min, p.max);
            if p.unresolved > 0 {
                let _ = writeln!(out, "  {} seed(s) where neither run reached the threshold", p.unresolved);
            }
        }
    }
    out
}

#[derive(Serialize)]
struct RunCsvRow<'a> {
    dir: &'a str,
    method: &'a str,
    seed: u64,
    threshold: f64,
    queries: String,
    reached: bool,
}

pub fn write_csv(c: &Comparison, runs_path: &Path, pairs_path: &Path) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(runs_path)?;
    for r in &c.results {
        w.serialize(RunCsvRow {
            dir: &r.dir,
            method: &r.label,
            seed: r.seed,
            threshold: r.threshold,
            queries: r.queries.map_or_else(|| "inf".into(), |q| q.to_string()),
            reached: r.queries.is_some(),
        })?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(pairs_path)?;
    for p in &c.pairs {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}
