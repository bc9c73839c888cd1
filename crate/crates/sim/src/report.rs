//! CSV output and the summaries `flhub report` prints.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::SimResult;
use crate::harness::{ExperimentReport, RoundMetrics};

pub const CURVES_HEADER: &str = "round,arm,seed,test_accuracy,test_loss,head_version,duration_ms";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub round: u32,
    pub arm: String,
    pub seed: u64,
    pub test_accuracy: f64,
    pub test_loss: f64,
    pub head_version: String,
    pub duration_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRow {
    pub round: u32,
    pub arm: String,
    pub seed: u64,
    pub client: usize,
    pub base_version: String,
    pub sample_count: u64,
    pub train_accuracy: f64,
    pub train_loss: f64,
}

pub fn curve_rows(rounds: &[RoundMetrics]) -> Vec<CurveRow> {
    rounds
        .iter()
        .map(|r| CurveRow {
            round: r.round,
            arm: r.arm.clone(),
            seed: r.seed,
            test_accuracy: r.test.accuracy,
            test_loss: r.test.loss,
            head_version: r.head_version.to_string(),
            duration_ms: r.duration_ms,
        })
        .collect()
}

pub fn client_rows(rounds: &[RoundMetrics]) -> Vec<ClientRow> {
    rounds
        .iter()
        .flat_map(|r| {
            r.clients.iter().map(move |c| ClientRow {
                round: r.round,
                arm: r.arm.clone(),
                seed: r.seed,
                client: c.client,
                base_version: c.base_version.to_string(),
                sample_count: c.sample_count,
                train_accuracy: c.metrics.train_accuracy,
                train_loss: c.metrics.train_loss,
            })
        })
        .collect()
}

pub fn write_rows<T: Serialize>(out: impl Write, rows: &[T]) -> SimResult<()> {
    let mut writer = csv::Writer::from_writer(out);
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_rows<T: for<'de> Deserialize<'de>>(input: impl Read) -> SimResult<Vec<T>> {
    let mut reader = csv::Reader::from_reader(input);
    reader
        .deserialize()
        .collect::<Result<Vec<T>, _>>()
        .map_err(Into::into)
}

/// Writes `{name}_curves.csv` and `{name}_clients.csv` into `dir`.
pub fn write_report(report: &ExperimentReport, dir: &Path) -> SimResult<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir)?;
    let curves = dir.join(format!("{}_curves.csv", report.name));
    let clients = dir.join(format!("{}_clients.csv", report.name));
    write_rows(std::fs::File::create(&curves)?, &curve_rows(&report.rounds))?;
    write_rows(
        std::fs::File::create(&clients)?,
        &client_rows(&report.rounds),
    )?;
    Ok((curves, clients))
}

/// First round whose test accuracy reaches `target`; `None` if none does.
pub fn rounds_to_target(rows: &[CurveRow], target: f64) -> BTreeMap<(String, u64), Option<u32>> {
    let mut out: BTreeMap<(String, u64), Option<u32>> = BTreeMap::new();
    for row in rows {
        let entry = out.entry((row.arm.clone(), row.seed)).or_insert(None);
        if row.test_accuracy >= target && entry.is_none_or(|r| row.round < r) {
            *entry = Some(row.round);
        }
    }
    out
}

/// Median of a non-empty sample; the mean of the middle pair for even sizes.
pub fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty(), "median of nothing");
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Sample-weighted client train accuracy per (arm, seed, round).
pub fn train_accuracy(rows: &[ClientRow]) -> BTreeMap<(String, u64, u32), f64> {
    let mut sums: BTreeMap<(String, u64, u32), (f64, f64)> = BTreeMap::new();
    for row in rows {
        let e = sums
            .entry((row.arm.clone(), row.seed, row.round))
            .or_insert((0.0, 0.0));
        e.0 += row.train_accuracy * row.sample_count as f64;
        e.1 += row.sample_count as f64;
    }
    sums.into_iter().map(|(k, (s, n))| (k, s / n)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmSummary {
    pub arm: String,
    pub seeds: usize,
    pub reached: usize,
    /// Infinite when fewer than half the seeds reach the target.
    pub median_rounds_to_target: f64,
    pub median_test_accuracy_at: Option<f64>,
    pub median_train_accuracy_at: Option<f64>,
}

/// Per-arm medians over seeds, arms in first-appearance order.
pub fn summarize(
    curves: &[CurveRow],
    clients: Option<&[ClientRow]>,
    target: f64,
    at_round: u32,
) -> Vec<ArmSummary> {
    let mut arms: Vec<String> = Vec::new();
    for row in curves {
        if !arms.contains(&row.arm) {
            arms.push(row.arm.clone());
        }
    }
    let hits = rounds_to_target(curves, target);
    let train = clients.map(train_accuracy);
    arms.into_iter()
        .map(|arm| {
            let mut rounds: Vec<f64> = hits
                .iter()
                .filter(|((a, _), _)| *a == arm)
                .map(|(_, r)| r.map_or(f64::INFINITY, f64::from))
                .collect();
            let reached = rounds.iter().filter(|r| r.is_finite()).count();
            let mut test_at: Vec<f64> = curves
                .iter()
                .filter(|r| r.arm == arm && r.round == at_round)
                .map(|r| r.test_accuracy)
                .collect();
            let mut train_at: Vec<f64> = train
                .iter()
                .flatten()
                .filter(|((a, _, r), _)| *a == arm && *r == at_round)
                .map(|(_, v)| *v)
                .collect();
            ArmSummary {
                seeds: rounds.len(),
                reached,
                median_rounds_to_target: median(&mut rounds),
                median_test_accuracy_at: (!test_at.is_empty()).then(|| median(&mut test_at)),
                median_train_accuracy_at: (!train_at.is_empty()).then(|| median(&mut train_at)),
                arm,
            }
        })
        .collect()
}

pub fn render_summary(summaries: &[ArmSummary], target: f64, at_round: u32) -> String {
    let mut out = format!(
        "{:<16} {:>6} {:>8} {:>22} {:>16} {:>16}\n",
        "arm",
        "seeds",
        "reached",
        format!("median rounds@{target}"),
        format!("test acc r{at_round}"),
        format!("train acc r{at_round}"),
    );
    let opt = |v: Option<f64>| v.map_or("-".to_owned(), |v| format!("{v:.4}"));
    for s in summaries {
        let rounds = if s.median_rounds_to_target.is_finite() {
            format!("{}", s.median_rounds_to_target)
        } else {
            "never".to_owned()
        };
        out.push_str(&format!(
            "{:<16} {:>6} {:>8} {:>22} {:>16} {:>16}\n",
            s.arm,
            s.seeds,
            s.reached,
            rounds,
            opt(s.median_test_accuracy_at),
            opt(s.median_train_accuracy_at),
        ));
    }
    out
}
