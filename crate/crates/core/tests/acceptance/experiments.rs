use crate::Outcome;
use clmarl::config::ExperimentConfig;
use clmarl::harness::{sweep, train, GridPoint, HarnessError, MetricsRow};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const SWEEP_SEEDS: [u64; 3] = [1, 2, 3];
/// Cycles after a promotion over which the win-rate spread is measured.
const SETTLE: usize = 5;

pub fn base_config() -> ExperimentConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/acceptance.toml");
    ExperimentConfig::load(&path).expect("acceptance config")
}

fn variant(overrides: &[&str]) -> ExperimentConfig {
    let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    base_config().with_overrides(&o).expect("variant config")
}

#[derive(Debug, Clone)]
struct Summary {
    rows: Vec<MetricsRow>,
    normalized: f64,
    milestone: Option<u64>,
}

fn scratch() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| tempfile::tempdir().expect("scratch dir")).path()
}

fn run_dir(name: &str, seed: u64) -> PathBuf {
    scratch().join(name).join(format!("seed-{seed}"))
}

fn run_all(name: &str, cfg: &ExperimentConfig) -> Result<Vec<Summary>, HarnessError> {
    SEEDS
        .iter()
        .map(|&seed| {
            let r = train(cfg, seed, Some(&run_dir(name, seed)))?;
            Ok(Summary {
                rows: r.rows,
                normalized: r.normalized_win_rate,
                milestone: r.milestone_step,
            })
        })
        .collect()
}

type Cached = Result<Vec<Summary>, String>;

fn full_runs() -> &'static Cached {
    static RUNS: OnceLock<Cached> = OnceLock::new();
    RUNS.get_or_init(|| run_all("full", &base_config()).map_err(|e| e.to_string()))
}

fn fixed_runs() -> &'static Cached {
    static RUNS: OnceLock<Cached> = OnceLock::new();
    RUNS.get_or_init(|| run_all("fixed", &variant(&["run.scheduler=false"])).map_err(|e| e.to_string()))
}

fn no_cgrpa_runs() -> &'static Cached {
    static RUNS: OnceLock<Cached> = OnceLock::new();
    RUNS.get_or_init(|| run_all("no-cgrpa", &variant(&["run.cgrpa=false"])).map_err(|e| e.to_string()))
}

fn fmt_step(s: Option<u64>) -> String {
    s.map_or_else(|| "-".into(), |v| v.to_string())
}

pub fn curriculum_benefit() -> Outcome {
    let (full, fixed) = match (full_runs(), fixed_runs()) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => return Outcome::new(false, format!("run failed: {e}")),
    };
    let mut faster = 0;
    let mut better = 0;
    let mut lines = Vec::new();
    for (k, (a, b)) in full.iter().zip(fixed).enumerate() {
        let first = match (a.milestone, b.milestone) {
            (Some(x), Some(y)) => x < y,
            (Some(_), None) => true,
            _ => false,
        };
        faster += usize::from(first);
        better += usize::from(a.normalized >= b.normalized);
        lines.push(format!(
            "s{}: milestone {}/{} top20 {:.3}/{:.3}",
            SEEDS[k],
            fmt_step(a.milestone),
            fmt_step(b.milestone),
            a.normalized,
            b.normalized
        ));
    }
    Outcome::new(
        faster >= 4 && better >= 4,
        format!("curriculum vs fixed: earlier milestone {faster}/5, top20 >= {better}/5 [{}]", lines.join("; ")),
    )
}

/// Cycles at which the active difficulty went up.
fn promotions(rows: &[MetricsRow]) -> Vec<usize> {
    (1..rows.len()).filter(|&c| rows[c].train_difficulty > rows[c - 1].train_difficulty).collect()
}

fn population_std(xs: &[f64]) -> f64 {
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// Mean over promotions of the win-rate spread in the cycles evaluated at the
/// promoted difficulty; `None` without a complete post-promotion window.
fn settle_spread(rows: &[MetricsRow]) -> (usize, Option<f64>) {
    let mut spreads = Vec::new();
    let ups = promotions(rows);
    for &c in &ups {
        if c + SETTLE <= rows.len() {
            let w: Vec<f64> = rows[c..c + SETTLE].iter().map(|r| r.win_rate).collect();
            spreads.push(population_std(&w));
        }
    }
    let mean = (!spreads.is_empty()).then(|| spreads.iter().sum::<f64>() / spreads.len() as f64);
    (ups.len(), mean)
}

pub fn stabilization() -> Outcome {
    let (full, ablation) = match (full_runs(), no_cgrpa_runs()) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => return Outcome::new(false, format!("run failed: {e}")),
    };
    let mut lower = 0;
    let mut lines = Vec::new();
    for (k, (a, b)) in full.iter().zip(ablation).enumerate() {
        let (na, sa) = settle_spread(&a.rows);
        let (nb, sb) = settle_spread(&b.rows);
        if let (Some(x), Some(y)) = (sa, sb) {
            lower += usize::from(x < y);
        }
        let f = |s: Option<f64>| s.map_or_else(|| "-".into(), |v| format!("{v:.3}"));
        lines.push(format!("s{}: promotions {na}/{nb} std {}/{}", SEEDS[k], f(sa), f(sb)));
    }
    Outcome::new(
        lower >= 4,
        format!("full vs without cgrpa: lower post-promotion std {lower}/5 [{}]", lines.join("; ")),
    )
}

/// Top-k mean of the target-difficulty win-rate column read back from disk.
fn top_k_from_csv(path: &Path, k: usize) -> Result<f64, String> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| e.to_string())?;
    let col = rdr
        .headers()
        .map_err(|e| e.to_string())?
        .iter()
        .position(|h| h == "target_win_rate")
        .ok_or("no target_win_rate column")?;
    let mut xs: Vec<f64> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| e.to_string())?;
        xs.push(rec[col].parse().map_err(|e: std::num::ParseFloatError| e.to_string())?);
    }
    xs.sort_by(|a, b| b.total_cmp(a));
    let k = k.min(xs.len());
    Ok(xs[..k].iter().sum::<f64>() / k as f64)
}

fn opt_field(s: &str) -> Option<f64> {
    (!s.is_empty()).then(|| s.parse().expect("numeric field"))
}

pub fn sweep_plumbing() -> Outcome {
    let base = base_config();
    let axes = vec![
        ("flexdiff.window_len".to_string(), vec!["10".into(), "20".into(), "30".into()]),
        ("flexdiff.momentum_threshold".to_string(), vec!["0.05".into(), "0.1".into(), "0.15".into()]),
    ];
    let grid = GridPoint::product(&axes);
    let out = scratch().join("sweep");
    let (runs, summaries) = match sweep(&base, &grid, &SWEEP_SEEDS, &out) {
        Ok(v) => v,
        Err(e) => return Outcome::new(false, format!("sweep failed: {e}")),
    };
    let mut problems = Vec::new();
    let failures = runs.iter().filter(|r| r.status != "ok").count();
    if runs.len() != grid.len() * SWEEP_SEEDS.len() || failures > 0 {
        problems.push(format!("{} runs, {failures} failed", runs.len()));
    }
    let mut worst: f64 = 0.0;
    for r in &runs {
        match (r.normalized_win_rate, top_k_from_csv(Path::new(&r.metrics), base.run.top_k)) {
            (Some(v), Ok(oracle)) => worst = worst.max((v - oracle).abs()),
            (_, Err(e)) => problems.push(format!("{}: {e}", r.metrics)),
            (None, _) => {}
        }
    }
    let on_disk: Vec<Vec<String>> = match csv::Reader::from_path(out.join("summary.csv")) {
        Ok(mut rdr) => rdr
            .records()
            .map(|r| r.map(|rec| rec.iter().map(str::to_string).collect()).unwrap_or_default())
            .collect(),
        Err(e) => {
            problems.push(format!("summary.csv: {e}"));
            Vec::new()
        }
    };
    if on_disk.len() != grid.len() || summaries.len() != grid.len() {
        problems.push(format!("{} summary rows for {} points", on_disk.len(), grid.len()));
    }
    for (point, row) in grid.iter().zip(&on_disk) {
        let vals: Vec<f64> = runs
            .iter()
            .filter(|r| r.point == point.label)
            .filter_map(|r| r.normalized_win_rate)
            .collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let std = (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let fields = (row.get(4), row.get(5), row.get(6), row.get(7));
        let ok = row.first() == Some(&point.label)
            && row.get(2).map(String::as_str) == Some(&SWEEP_SEEDS.len().to_string())
            && row.get(3).map(String::as_str) == Some("0")
            && match fields {
                (Some(a), Some(b), Some(c), Some(d)) => [(a, mean), (b, std), (c, min), (d, max)]
                    .iter()
                    .all(|(s, v)| opt_field(s).is_some_and(|x| (x - v).abs() <= 1e-12)),
                _ => false,
            };
        if !ok {
            problems.push(format!("summary mismatch for {}", point.label));
        }
    }
    let means: Vec<String> = summaries
        .iter()
        .map(|s| format!("{} {}", s.point, s.mean.map_or_else(|| "-".into(), |m| format!("{m:.3}"))))
        .collect();
    Outcome::new(
        problems.is_empty() && worst <= 1e-12,
        format!(
            "{} runs over {} points; top20 oracle max |err| {worst:.1e}; {}; means [{}]",
            runs.len(),
            grid.len(),
            if problems.is_empty() { "summaries match".to_string() } else { problems.join(", ") },
            means.join("; ")
        ),
    )
}

pub fn determinism() -> Outcome {
    let first = run_dir("full", SEEDS[0]).join("metrics.csv");
    if !first.exists() {
        if let Err(e) = train(&base_config(), SEEDS[0], Some(&run_dir("full", SEEDS[0]))) {
            return Outcome::new(false, format!("first run failed: {e}"));
        }
    }
    let again = scratch().join("repeat");
    if let Err(e) = train(&base_config(), SEEDS[0], Some(&again)) {
        return Outcome::new(false, format!("repeat run failed: {e}"));
    }
    let a = std::fs::read(&first).unwrap_or_default();
    let b = std::fs::read(again.join("metrics.csv")).unwrap_or_default();
    Outcome::new(
        !a.is_empty() && a == b,
        format!("seed {} repeated: metrics.csv {} bytes, identical {}", SEEDS[0], a.len(), a == b),
    )
}
