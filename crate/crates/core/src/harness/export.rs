//! CSV and JSON artifacts from run records.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::run::RunRecord;
use crate::error::{Error, Result};

pub const RECORDS_FILE: &str = "records.json";
const HEATMAP_BUCKETS: usize = 10;

pub fn save_records(records: &[RunRecord], dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(RECORDS_FILE);
    fs::write(&path, serde_json::to_string_pretty(records)?).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn load_records(dir: &Path) -> Result<Vec<RunRecord>> {
    let path = dir.join(RECORDS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Mean, sample standard deviation and standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    pub std: f64,
    pub stderr: f64,
}

impl Spread {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Self {
            mean,
            std,
            stderr: std / n.sqrt(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySummary {
    pub label: String,
    pub strategy: String,
    pub seeds: Vec<u64>,
    pub final_return: Spread,
    pub final_normalized: Option<Spread>,
    pub final_returns: Vec<f64>,
}

/// Groups records by label, in order of first appearance.
pub fn summarize(records: &[RunRecord]) -> Vec<StrategySummary> {
    let mut order: Vec<&str> = Vec::new();
    for r in records {
        if !order.contains(&r.label.as_str()) {
            order.push(&r.label);
        }
    }
    order
        .into_iter()
        .map(|label| {
            let group: Vec<&RunRecord> = records.iter().filter(|r| r.label == label).collect();
            let finals: Vec<f64> = group.iter().map(|r| r.final_return).collect();
            let normalized: Option<Vec<f64>> = group.iter().map(|r| r.final_normalized).collect();
            StrategySummary {
                label: label.to_string(),
                strategy: group[0].strategy.clone(),
                seeds: group.iter().map(|r| r.seed).collect(),
                final_return: Spread::of(&finals).expect("non-empty group"),
                final_normalized: normalized.as_deref().and_then(Spread::of),
                final_returns: finals,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExportedFiles {
    pub curves: PathBuf,
    pub heatmap: PathBuf,
    pub bandit: Option<PathBuf>,
    pub summary: PathBuf,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn arm_columns(records: &[RunRecord]) -> Vec<f64> {
    let mut arms: Vec<f64> = records
        .iter()
        .flat_map(|r| {
            r.arms
                .iter()
                .copied()
                .chain(r.periods.iter().filter_map(|p| p.selected_m))
        })
        .collect();
    arms.sort_by(f64::total_cmp);
    arms.dedup();
    arms
}

pub fn export_metrics(records: &[RunRecord], out_dir: &Path) -> Result<ExportedFiles> {
    if records.is_empty() {
        return Err(Error::invalid("records", "nothing to export"));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let curves = out_dir.join("curves.csv");
    let mut w = csv::Writer::from_path(&curves)?;
    w.write_record([
        "label",
        "seed",
        "period",
        "eval_return",
        "delta_off",
        "delta_on",
        "r_q",
        "selected_m",
        "offline_fraction",
        "end_step",
    ])?;
    for r in records {
        for p in &r.periods {
            w.write_record([
                r.label.clone(),
                r.seed.to_string(),
                p.period.to_string(),
                p.eval_return.to_string(),
                p.delta_off.to_string(),
                p.delta_on.to_string(),
                p.r_q.to_string(),
                fmt_opt(p.selected_m),
                p.offline_fraction.to_string(),
                p.end_step.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(&curves, e))?;

    let arms = arm_columns(records);
    let max_period = records
        .iter()
        .flat_map(|r| r.periods.iter().map(|p| p.period))
        .max()
        .unwrap_or(0);
    let bucket = max_period.div_ceil(HEATMAP_BUCKETS).max(1);
    let n_buckets = max_period.div_ceil(bucket);
    let mut counts = vec![vec![0usize; arms.len()]; n_buckets];
    for r in records {
        for p in &r.periods {
            if let Some(m) = p.selected_m {
                let j = arms.iter().position(|a| *a == m).expect("arm column");
                counts[(p.period - 1) / bucket][j] += 1;
            }
        }
    }
    let heatmap = out_dir.join("heatmap.csv");
    let mut w = csv::Writer::from_path(&heatmap)?;
    let mut header = vec!["first_period".to_string(), "last_period".to_string()];
    header.extend(arms.iter().map(|m| format!("m={m}")));
    w.write_record(&header)?;
    for (b, row) in counts.iter().enumerate() {
        let mut line = vec![
            (b * bucket + 1).to_string(),
            ((b + 1) * bucket).min(max_period).to_string(),
        ];
        line.extend(row.iter().map(|c| c.to_string()));
        w.write_record(&line)?;
    }
    w.flush().map_err(|e| Error::io(&heatmap, e))?;

    let bandit = if records.iter().any(|r| !r.arms.is_empty()) {
        let path = out_dir.join("bandit.csv");
        let mut w = csv::Writer::from_path(&path)?;
        let mut header = vec!["label", "seed", "period", "selected_m", "r_q"]
            .into_iter()
            .map(String::from)
            .collect::<Vec<_>>();
        header.extend(arms.iter().map(|m| format!("ucb_m={m}")));
        w.write_record(&header)?;
        for r in records.iter().filter(|r| !r.arms.is_empty()) {
            for p in &r.periods {
                let mut line = vec![
                    r.label.clone(),
                    r.seed.to_string(),
                    p.period.to_string(),
                    fmt_opt(p.selected_m),
                    p.r_q.to_string(),
                ];
                line.extend(arms.iter().map(|m| {
                    r.arms
                        .iter()
                        .position(|a| a == m)
                        .and_then(|i| p.ucb.get(i).copied().flatten())
                        .map_or_else(|| "inf".to_string(), |v| v.to_string())
                }));
                w.write_record(&line)?;
            }
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        Some(path)
    } else {
        None
    };

    let summary = out_dir.join("summary.json");
    fs::write(&summary, serde_json::to_string_pretty(&summarize(records))?)
        .map_err(|e| Error::io(&summary, e))?;

    Ok(ExportedFiles {
        curves,
        heatmap,
        bandit,
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::run::{EvalPoint, PeriodRow};

    fn record(seed: u64, ms: &[f64], final_return: f64) -> RunRecord {
        RunRecord {
            label: "road".into(),
            strategy: "road".into(),
            seed,
            arms: vec![0.1, 0.5],
            periods: ms
                .iter()
                .enumerate()
                .map(|(i, m)| PeriodRow {
                    period: i + 1,
                    start_step: i,
                    end_step: i + 1,
                    selected_m: Some(*m),
                    delta_off: 0.0,
                    delta_on: 0.0,
                    r_q: 0.5,
                    offline_fraction: *m,
                    samples: 1,
                    eval_return: 1.0,
                    ucb: vec![None, Some(2.0)],
                })
                .collect(),
            evals: vec![EvalPoint {
                step: 0,
                mean_return: final_return,
            }],
            final_return,
            final_normalized: Some(final_return),
            worst_return: 0.0,
            best_return: 100.0,
            wall_time_secs: 0.5,
        }
    }

    #[test]
    fn spread_conventions() {
        let s = Spread::of(&[3.0]).unwrap();
        assert_eq!((s.mean, s.std, s.stderr), (3.0, 0.0, 0.0));
        let s = Spread::of(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(s.mean, 2.5);
        assert!((s.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!(Spread::of(&[]).is_none());
    }

    #[test]
    fn four_seed_summary() {
        let recs: Vec<_> = (0..4).map(|s| record(s, &[0.1], s as f64)).collect();
        let sum = summarize(&recs);
        assert_eq!(sum.len(), 1);
        assert_eq!(sum[0].seeds, vec![0, 1, 2, 3]);
        assert_eq!(sum[0].final_return.mean, 1.5);
    }

    #[test]
    fn heatmap_rows_count_periods() {
        let dir = tempfile::tempdir().unwrap();
        let ms: Vec<f64> = (0..23)
            .map(|i| if i % 3 == 0 { 0.5 } else { 0.1 })
            .collect();
        let recs = vec![record(0, &ms, 1.0), record(1, &ms[..17], 2.0)];
        let files = export_metrics(&recs, dir.path()).unwrap();
        let mut rdr = csv::Reader::from_path(&files.heatmap).unwrap();
        let mut total = 0;
        for row in rdr.records() {
            let row = row.unwrap();
            let first: usize = row[0].parse().unwrap();
            let last: usize = row[1].parse().unwrap();
            let sum: usize = (2..row.len())
                .map(|i| row[i].parse::<usize>().unwrap())
                .sum();
            let expected: usize = (first..=last)
                .map(|p| usize::from(p <= 23) + usize::from(p <= 17))
                .sum();
            assert_eq!(sum, expected);
            total += sum;
        }
        assert_eq!(total, 40);
        let bandit = fs::read_to_string(files.bandit.unwrap()).unwrap();
        assert!(bandit.lines().nth(1).unwrap().ends_with("inf,2"));
    }

    #[test]
    fn records_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let recs = vec![record(0, &[0.1, 0.5], 1.0)];
        save_records(&recs, dir.path()).unwrap();
        assert_eq!(load_records(dir.path()).unwrap(), recs);
    }

    #[test]
    fn empty_records_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(export_metrics(&[], dir.path()).is_err());
    }
}
