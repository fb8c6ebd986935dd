use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{train, HarnessError};
use crate::config::ExperimentConfig;

/// One configuration of a sweep: a label and its `section.key=value` overrides.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPoint {
    pub label: String,
    pub overrides: Vec<String>,
}

impl GridPoint {
    /// Cartesian product of per-key value lists.
    pub fn product(axes: &[(String, Vec<String>)]) -> Vec<GridPoint> {
        let mut points = vec![GridPoint {
            label: String::new(),
            overrides: Vec::new(),
        }];
        for (key, values) in axes {
            let mut next = Vec::with_capacity(points.len() * values.len());
            for p in &points {
                for v in values {
                    let mut overrides = p.overrides.clone();
                    overrides.push(format!("{key}={v}"));
                    next.push(GridPoint {
                        label: overrides.join(";"),
                        overrides,
                    });
                }
            }
            points = next;
        }
        points
    }
}

/// Outcome of one (grid point, seed) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub point: String,
    pub seed: u64,
    pub config_hash: String,
    pub status: String,
    pub normalized_win_rate: Option<f64>,
    pub final_difficulty: Option<i32>,
    pub metrics: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub point: String,
    pub config_hash: String,
    pub runs: usize,
    pub failures: usize,
    pub mean: Option<f64>,
    /// Population standard deviation across successful seeds.
    pub std: Option<f64>,
    pub min: Option<f64>,
    pub max: Option<f64>,
}

fn summarize(point: &str, hash: &str, runs: &[SweepRun]) -> SweepSummary {
    let vals: Vec<f64> = runs.iter().filter_map(|r| r.normalized_win_rate).collect();
    let failures = runs.len() - vals.len();
    if vals.is_empty() {
        return SweepSummary {
            point: point.to_string(),
            config_hash: hash.to_string(),
            runs: runs.len(),
            failures,
            mean: None,
            std: None,
            min: None,
            max: None,
        };
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    SweepSummary {
        point: point.to_string(),
        config_hash: hash.to_string(),
        runs: runs.len(),
        failures,
        mean: Some(mean),
        std: Some(var.sqrt()),
        min: vals.iter().copied().reduce(f64::min),
        max: vals.iter().copied().reduce(f64::max),
    }
}

/// Trains every grid point for every seed under `out_dir/<hash>/seed-<s>/`,
/// then writes `runs.csv` and `summary.csv`. A failing run is recorded and
/// the sweep moves on; an invalid grid point is recorded the same way.
pub fn sweep(
    base: &ExperimentConfig,
    grid: &[GridPoint],
    seeds: &[u64],
    out_dir: &Path,
) -> Result<(Vec<SweepRun>, Vec<SweepSummary>), HarnessError> {
    fs::create_dir_all(out_dir)?;
    let mut all_runs = Vec::new();
    let mut summaries = Vec::new();
    for point in grid {
        let cfg = match base.with_overrides(&point.overrides) {
            Ok(c) => c,
            Err(e) => {
                let runs: Vec<SweepRun> = seeds
                    .iter()
                    .map(|&seed| SweepRun {
                        point: point.label.clone(),
                        seed,
                        config_hash: String::new(),
                        status: format!("config error: {e}"),
                        normalized_win_rate: None,
                        final_difficulty: None,
                        metrics: String::new(),
                    })
                    .collect();
                summaries.push(summarize(&point.label, "", &runs));
                all_runs.extend(runs);
                continue;
            }
        };
        let hash = cfg.hash();
        let mut runs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let dir = out_dir.join(&hash).join(format!("seed-{seed}"));
            let metrics = dir.join("metrics.csv").display().to_string();
            let run = match train(&cfg, seed, Some(&dir)) {
                Ok(r) => SweepRun {
                    point: point.label.clone(),
                    seed,
                    config_hash: hash.clone(),
                    status: "ok".into(),
                    normalized_win_rate: Some(r.normalized_win_rate),
                    final_difficulty: r.rows.last().map(|row| row.difficulty),
                    metrics,
                },
                Err(e) => SweepRun {
                    point: point.label.clone(),
                    seed,
                    config_hash: hash.clone(),
                    status: format!("failed: {e}"),
                    normalized_win_rate: None,
                    final_difficulty: None,
                    metrics,
                },
            };
            runs.push(run);
        }
        summaries.push(summarize(&point.label, &hash, &runs));
        all_runs.extend(runs);
    }
    let mut w = csv::Writer::from_path(out_dir.join("runs.csv"))?;
    for r in &all_runs {
        w.serialize(r)?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(out_dir.join("summary.csv"))?;
    for s in &summaries {
        w.serialize(s)?;
    }
    w.flush()?;
    Ok((all_runs, summaries))
}
