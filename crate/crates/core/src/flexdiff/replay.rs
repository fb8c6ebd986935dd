//! Offline replay of the scheduler over a recorded `(cycle, win_rate, mean_return)` stream.

use std::io::{Read, Write};

use thiserror::Error;

use super::{Decision, EvalSample, SchedulerConfig, SchedulerState};

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("line {line}: {message}")]
    Malformed { line: u64, message: String },
    #[error("input contains no samples")]
    Empty,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub const TRACE_HEADER: [&str; 15] = [
    "cycle",
    "win_rate",
    "mean_return",
    "mu_w",
    "sigma_w",
    "mu_r",
    "sigma_r",
    "beta_w",
    "conv",
    "momentum",
    "tau_h",
    "tau_l",
    "stable",
    "branch",
    "difficulty",
];

/// Reads samples from CSV with a `cycle,win_rate,mean_return` header.
pub fn read_samples<R: Read>(input: R) -> Result<Vec<(u64, EvalSample)>, ReplayError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(input);
    let header = reader.headers()?.clone();
    let expected = ["cycle", "win_rate", "mean_return"];
    if header.len() < 3 || header.iter().take(3).ne(expected) {
        return Err(ReplayError::Malformed {
            line: 1,
            message: format!("expected header starting with {}", expected.join(",")),
        });
    }
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let malformed = |message: String| ReplayError::Malformed { line, message };
        if record.len() < 3 {
            return Err(malformed(format!("expected 3 fields, found {}", record.len())));
        }
        let cycle = record[0]
            .parse::<u64>()
            .map_err(|e| malformed(format!("cycle {:?}: {e}", &record[0])))?;
        let w = record[1]
            .parse::<f64>()
            .map_err(|e| malformed(format!("win_rate {:?}: {e}", &record[1])))?;
        let r = record[2]
            .parse::<f64>()
            .map_err(|e| malformed(format!("mean_return {:?}: {e}", &record[2])))?;
        let sample = EvalSample::new(w, r).map_err(|e| malformed(e.to_string()))?;
        if let Some((prev, _)) = out.last() {
            if cycle <= *prev {
                return Err(malformed(format!("cycle {cycle} does not increase")));
            }
        }
        out.push((cycle, sample));
    }
    if out.is_empty() {
        return Err(ReplayError::Empty);
    }
    Ok(out)
}

/// Runs a fresh scheduler over `samples`.
pub fn replay(samples: &[EvalSample], cfg: &SchedulerConfig) -> Vec<Decision> {
    let mut state = SchedulerState::new(cfg);
    samples.iter().map(|s| state.step(*s, cfg)).collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn trace_record(cycle: u64, d: &Decision) -> Vec<String> {
    vec![
        cycle.to_string(),
        d.sample.win_rate.to_string(),
        d.sample.mean_return.to_string(),
        opt(d.stats.map(|s| s.win_mean)),
        opt(d.stats.map(|s| s.win_std)),
        opt(d.stats.map(|s| s.return_mean)),
        opt(d.stats.map(|s| s.return_std)),
        opt(d.slope),
        d.convexity.value.to_string(),
        d.momentum.to_string(),
        d.tau_high.to_string(),
        d.tau_low.to_string(),
        u8::from(d.stable).to_string(),
        d.branch.to_string(),
        d.difficulty.to_string(),
    ]
}

pub fn write_trace<W: Write>(
    out: W,
    cycles: &[u64],
    decisions: &[Decision],
) -> Result<(), ReplayError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRACE_HEADER)?;
    for (c, d) in cycles.iter().zip(decisions) {
        w.write_record(trace_record(*c, d))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads samples, replays them, and writes the decision trace.
pub fn replay_csv<R: Read, W: Write>(
    input: R,
    output: W,
    cfg: &SchedulerConfig,
) -> Result<Vec<Decision>, ReplayError> {
    let rows = read_samples(input)?;
    let (cycles, samples): (Vec<u64>, Vec<EvalSample>) = rows.into_iter().unzip();
    let decisions = replay(&samples, cfg);
    write_trace(output, &cycles, &decisions)?;
    Ok(decisions)
}
