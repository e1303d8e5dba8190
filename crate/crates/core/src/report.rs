//! Hit ratios, per-step curves and result export.
//!
//! A hit is one evaluated `(user, pushed item)` pair whose 0-based rank is
//! below `k`. Ranks come from the true model, never the oracle's view.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attacks::{AttackKind, AttackTrace, StepRecord};
use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "scenario_id,kind,step,rank,score,ssim,uploads,queries";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub seed: u64,
    /// Resolved configuration the run used.
    pub config: serde_json::Value,
    pub ks: Vec<usize>,
    pub traces: Vec<AttackTrace>,
}

impl ExperimentResult {
    pub fn new(seed: u64, config: &impl Serialize, ks: Vec<usize>, traces: Vec<AttackTrace>) -> Result<Self> {
        Ok(ExperimentResult {
            seed,
            config: serde_json::to_value(config)?,
            ks,
            traces,
        })
    }

    /// Final-step hit indicator of every evaluated pair, scenario-major.
    pub fn hits(&self, k: usize) -> Vec<bool> {
        self.traces
            .iter()
            .flat_map(|t| t.last().eval.ranks.iter().map(move |&r| r < k))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_csv(&self) -> String {
        to_csv(&self.traces)
    }
}

fn pairs_hr<'a>(records: impl Iterator<Item = &'a StepRecord>, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    let (mut hits, mut total) = (0usize, 0usize);
    for r in records {
        hits += r.eval.hits(k);
        total += r.eval.ranks.len();
    }
    if total == 0 {
        return Err(Error::EmptyEvaluation);
    }
    Ok(hits as f64 / total as f64)
}

/// HR@k after the last step of every trace.
pub fn hit_ratio(traces: &[AttackTrace], k: usize) -> Result<f64> {
    pairs_hr(traces.iter().map(AttackTrace::last), k)
}

/// HR@k at `step` (0 is the pre-attack state); short traces carry their
/// last record forward.
pub fn hr_at_step(traces: &[AttackTrace], k: usize, step: usize) -> Result<f64> {
    pairs_hr(traces.iter().map(|t| t.at(step)), k)
}

/// HR@k after each step `1..=L` for the longest trace length `L`.
pub fn hr_curve(traces: &[AttackTrace], k: usize) -> Result<Vec<f64>> {
    let len = traces.iter().map(|t| t.steps.len()).max().unwrap_or(0);
    (1..=len).map(|s| hr_at_step(traces, k, s)).collect()
}

/// Fraction of adjacent pairs of `curve` that do not decrease.
pub fn non_decreasing_fraction(curve: &[f64]) -> Option<f64> {
    if curve.len() < 2 {
        return None;
    }
    let ok = curve.windows(2).filter(|w| w[1] >= w[0]).count();
    Some(ok as f64 / (curve.len() - 1) as f64)
}

/// Mean SSIM after each step `1..=L`.
pub fn ssim_curve(traces: &[AttackTrace]) -> Vec<f64> {
    let len = traces.iter().map(|t| t.steps.len()).max().unwrap_or(0);
    (1..=len)
        .map(|s| traces.iter().map(|t| t.at(s).ssim).sum::<f64>() / traces.len() as f64)
        .collect()
}

/// Final HR@k of pairs bucketed by their pre-attack rank. `edges` split the
/// ranks into `[0, e0), [e0, e1), ..., [e_last, inf)`; a bucket with no
/// pairs is `None`.
pub fn hr_by_initial_rank(traces: &[AttackTrace], k: usize, edges: &[usize]) -> Result<Vec<Option<f64>>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    if edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("bucket edges must increase".into()));
    }
    let mut hits = vec![0usize; edges.len() + 1];
    let mut total = vec![0usize; edges.len() + 1];
    for t in traces {
        for (&r0, &r1) in t.initial.eval.ranks.iter().zip(&t.last().eval.ranks) {
            let b = edges.partition_point(|&e| e <= r0);
            total[b] += 1;
            hits[b] += usize::from(r1 < k);
        }
    }
    Ok(hits
        .iter()
        .zip(&total)
        .map(|(&h, &n)| (n > 0).then(|| h as f64 / n as f64))
        .collect())
}

/// Long-format rows: one per scenario, step (including step 0) and
/// evaluated user; `queries` counts feedback plus pre-step queries.
pub fn to_csv(traces: &[AttackTrace]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for (id, t) in traces.iter().enumerate() {
        for rec in std::iter::once(&t.initial).chain(&t.steps) {
            for (rank, score) in rec.eval.ranks.iter().zip(&rec.eval.scores) {
                // writing to a String cannot fail
                let _ = writeln!(
                    out,
                    "{id},{},{},{rank},{score},{},{},{}",
                    t.kind.name(),
                    rec.step,
                    rec.ssim,
                    rec.uploads,
                    rec.queries()
                );
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub scenario_id: usize,
    pub kind: AttackKind,
    pub step: usize,
    pub rank: usize,
    pub score: f64,
    pub ssim: f64,
    pub uploads: usize,
    pub queries: usize,
}

pub fn parse_csv(text: &str) -> Result<Vec<CsvRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == CSV_HEADER => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected header {CSV_HEADER}"),
            })
        }
    }
    let mut rows = Vec::new();
    for (n, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let err = |m: &str| Error::Parse {
            line: n + 1,
            message: m.to_string(),
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(err("expected 8 fields"));
        }
        let int = |s: &str| s.parse::<usize>().map_err(|_| err("bad integer"));
        let real = |s: &str| s.parse::<f64>().map_err(|_| err("bad number"));
        rows.push(CsvRow {
            scenario_id: int(f[0])?,
            kind: AttackKind::from_name(f[1]).ok_or_else(|| err("unknown kind"))?,
            step: int(f[2])?,
            rank: int(f[3])?,
            score: real(f[4])?,
            ssim: real(f[5])?,
            uploads: int(f[6])?,
            queries: int(f[7])?,
        });
    }
    Ok(rows)
}

/// Final-step HR@k per attack kind from parsed rows.
pub fn hit_ratio_from_rows(rows: &[CsvRow], k: usize) -> Result<BTreeMap<&'static str, f64>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    let mut last = BTreeMap::new();
    for r in rows {
        let e = last.entry(r.scenario_id).or_insert((r.kind, r.step));
        e.1 = e.1.max(r.step);
    }
    let mut acc: BTreeMap<&'static str, (usize, usize)> = BTreeMap::new();
    for r in rows {
        if last[&r.scenario_id].1 == r.step {
            let e = acc.entry(r.kind.name()).or_default();
            e.0 += usize::from(r.rank < k);
            e.1 += 1;
        }
    }
    Ok(acc.into_iter().map(|(k, (h, n))| (k, h as f64 / n as f64)).collect())
}

/// Final HR@k per attack kind.
pub fn hr_by_kind(traces: &[AttackTrace], k: usize) -> Result<BTreeMap<&'static str, f64>> {
    let mut groups: BTreeMap<&'static str, Vec<&AttackTrace>> = BTreeMap::new();
    for t in traces {
        groups.entry(t.kind.name()).or_default().push(t);
    }
    groups
        .into_iter()
        .map(|(name, ts)| Ok((name, pairs_hr(ts.into_iter().map(AttackTrace::last), k)?)))
        .collect()
}

/// Plain-text table of attack kind against HR@k for each `k`.
pub fn summary_table(traces: &[AttackTrace], ks: &[usize]) -> Result<String> {
    let per_k = ks
        .iter()
        .map(|&k| hr_by_kind(traces, k))
        .collect::<Result<Vec<_>>>()?;
    let mut out = format!("{:<18}", "attack");
    for k in ks {
        let _ = write!(out, "{:>8}", format!("HR@{k}"));
    }
    out.push('\n');
    if let Some(first) = per_k.first() {
        for name in first.keys() {
            let _ = write!(out, "{name:<18}");
            for m in &per_k {
                let _ = write!(out, "{:>8.3}", m[name]);
            }
            out.push('\n');
        }
    }
    Ok(out)
}

pub fn export_csv(result: &ExperimentResult, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, result.to_csv()).map_err(|e| Error::io(path, e))
}

pub fn export_json(result: &ExperimentResult, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, result.to_json()?).map_err(|e| Error::io(path, e))
}

pub fn import_json(path: impl AsRef<Path>) -> Result<ExperimentResult> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ExperimentResult::from_json(&text)
}
