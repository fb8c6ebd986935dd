//! Statistical difficulty scheduler.
//!
//! Consumes one [`EvalSample`] per evaluation cycle and moves the training
//! difficulty up, down, or not at all. The decision fuses a sliding window of
//! win rates and normalized returns (mean, spread, trend), a second difference
//! of returns, and an EMA momentum gate, against thresholds that widen with
//! difficulty and saturate asymmetrically.
//!
//! Everything here is a pure function of its inputs. [`SchedulerState`] is the
//! only mutable state and it is owned by the caller.

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub mod replay;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlexDiffError {
    #[error("insufficient history: window holds {have} of {need} samples")]
    InsufficientHistory { have: usize, need: usize },
    #[error("trend slope undefined for window length {0} (need at least 2)")]
    UndefinedSlope(usize),
    #[error("invalid evaluation sample: {0}")]
    InvalidSample(String),
    #[error("invalid scheduler config: {0}")]
    InvalidConfig(String),
    #[error("malformed scheduler snapshot: {0}")]
    Snapshot(String),
}

/// One evaluation cycle's result: win fraction and return normalized by the
/// environment's maximum achievable return.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSample {
    pub win_rate: f64,
    pub mean_return: f64,
}

impl EvalSample {
    pub fn new(win_rate: f64, mean_return: f64) -> Result<Self, FlexDiffError> {
        if !(0.0..=1.0).contains(&win_rate) {
            return Err(FlexDiffError::InvalidSample(format!(
                "win_rate {win_rate} outside [0, 1]"
            )));
        }
        if !(mean_return >= 0.0 && mean_return.is_finite()) {
            return Err(FlexDiffError::InvalidSample(format!(
                "mean_return {mean_return} must be finite and nonnegative"
            )));
        }
        Ok(Self {
            win_rate,
            mean_return,
        })
    }
}

/// Fixed-capacity window of the most recent samples, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalWindow {
    samples: VecDeque<EvalSample>,
    capacity: usize,
}

impl EvalWindow {
    pub fn new(capacity: usize) -> Self {
        Self {
            samples: VecDeque::with_capacity(capacity),
            capacity,
        }
    }

    pub fn from_samples(capacity: usize, samples: &[EvalSample]) -> Self {
        let mut w = Self::new(capacity);
        for s in samples {
            w.push(*s);
        }
        w
    }

    /// Appends a sample, evicting the oldest one once at capacity.
    pub fn push(&mut self, sample: EvalSample) {
        if self.capacity == 0 {
            return;
        }
        if self.samples.len() == self.capacity {
            self.samples.pop_front();
        }
        self.samples.push_back(sample);
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn is_full(&self) -> bool {
        self.samples.len() == self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &EvalSample> + '_ {
        self.samples.iter()
    }

    pub fn win_rates(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.win_rate).collect()
    }

    pub fn returns(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.mean_return).collect()
    }

    fn require_full(&self) -> Result<(), FlexDiffError> {
        if self.is_full() && self.capacity > 0 {
            Ok(())
        } else {
            Err(FlexDiffError::InsufficientHistory {
                have: self.samples.len(),
                need: self.capacity,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchedulerConfig {
    pub window_len: usize,
    /// Unit of the slope entering the dead-zone and the momentum update.
    pub slope_units: SlopeUnits,
    /// Slopes with magnitude at or below this are treated as noise.
    pub momentum_threshold: f64,
    pub ema_decay: f64,
    /// Momentum gate for both promotion and demotion.
    pub momentum_tolerance: f64,
    /// Demotion floor on the reward second difference.
    pub reward_tolerance: f64,
    pub winrate_std_tolerance: f64,
    pub reward_std_tolerance: f64,
    pub anchor: f64,
    pub scale: f64,
    pub band_max: f64,
    pub band_min: f64,
    pub d_min: i32,
    pub d_max: i32,
    pub d_start: i32,
    pub step_up: i32,
    pub step_down: i32,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            window_len: 20,
            slope_units: SlopeUnits::Window,
            momentum_threshold: 0.1,
            ema_decay: 0.9,
            momentum_tolerance: 0.2,
            reward_tolerance: 0.05,
            winrate_std_tolerance: 0.08,
            reward_std_tolerance: 0.1,
            anchor: 0.5,
            scale: 0.02,
            band_max: 0.75,
            band_min: 0.25,
            d_min: 1,
            d_max: 10,
            d_start: 5,
            step_up: 1,
            step_down: 1,
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<(), FlexDiffError> {
        let bad = |m: String| Err(FlexDiffError::InvalidConfig(m));
        if self.window_len < 1 {
            return bad("window_len must be positive".into());
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad(format!("ema_decay {} outside [0, 1)", self.ema_decay));
        }
        for (name, v) in [
            ("momentum_threshold", self.momentum_threshold),
            ("momentum_tolerance", self.momentum_tolerance),
            ("reward_tolerance", self.reward_tolerance),
            ("winrate_std_tolerance", self.winrate_std_tolerance),
            ("reward_std_tolerance", self.reward_std_tolerance),
            ("scale", self.scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and nonnegative, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.anchor) {
            return bad(format!("anchor {} outside [0, 1]", self.anchor));
        }
        if !(0.0 <= self.band_min && self.band_min < self.band_max && self.band_max <= 1.0) {
            return bad(format!(
                "threshold band requires 0 <= band_min < band_max <= 1, got band_min={} band_max={}",
                self.band_min, self.band_max
            ));
        }
        if !(self.d_min <= self.d_start && self.d_start <= self.d_max) {
            return bad(format!(
                "difficulty range requires d_min <= d_start <= d_max, got {} <= {} <= {}",
                self.d_min, self.d_start, self.d_max
            ));
        }
        if self.step_up < 1 || self.step_down < 1 {
            return bad("step_up and step_down must be at least 1".into());
        }
        Ok(())
    }
}

/// `Cycle` feeds the raw per-cycle slope to the momentum; `Window` feeds the
/// change it implies across the whole window, `(N - 1) * slope`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SlopeUnits {
    Cycle,
    Window,
}

impl SlopeUnits {
    pub fn scale(self, window_len: usize) -> f64 {
        match self {
            SlopeUnits::Cycle => 1.0,
            SlopeUnits::Window => window_len.saturating_sub(1) as f64,
        }
    }
}

/// Means and population standard deviations over a full window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowStats {
    pub win_mean: f64,
    pub win_std: f64,
    pub return_mean: f64,
    pub return_std: f64,
}

fn welford(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut n = 0.0;
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for x in values {
        n += 1.0;
        let delta = x - mean;
        mean += delta / n;
        m2 += delta * (x - mean);
    }
    (mean, (m2 / n).max(0.0).sqrt())
}

pub fn window_stats(window: &EvalWindow) -> Result<WindowStats, FlexDiffError> {
    window.require_full()?;
    let (win_mean, win_std) = welford(window.iter().map(|s| s.win_rate));
    let (return_mean, return_std) = welford(window.iter().map(|s| s.mean_return));
    Ok(WindowStats {
        win_mean,
        win_std,
        return_mean,
        return_std,
    })
}

/// Both spreads strictly below their tolerances.
pub fn stability(win_std: f64, return_std: f64, cfg: &SchedulerConfig) -> bool {
    win_std < cfg.winrate_std_tolerance && return_std < cfg.reward_std_tolerance
}

/// Least-squares slope of win rate against the zero-based offset in the window.
pub fn trend_slope(window: &EvalWindow) -> Result<f64, FlexDiffError> {
    if window.capacity() < 2 {
        return Err(FlexDiffError::UndefinedSlope(window.capacity()));
    }
    window.require_full()?;
    let n = window.len() as f64;
    let (mut sx, mut sw, mut sxw, mut sxx) = (0.0, 0.0, 0.0, 0.0);
    for (i, s) in window.iter().enumerate() {
        let x = i as f64;
        sx += x;
        sw += s.win_rate;
        sxw += x * s.win_rate;
        sxx += x * x;
    }
    Ok((n * sxw - sx * sw) / (n * sxx - sx * sx))
}

/// Second difference of the three most recent returns.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Convexity {
    pub value: f64,
    pub warming_up: bool,
}

pub fn second_difference(r_t: f64, r_tm1: f64, r_tm2: f64) -> f64 {
    r_t - 2.0 * r_tm1 + r_tm2
}

/// `history` is ordered oldest to newest; only the last three entries are used.
pub fn reward_convexity(history: &[f64]) -> Convexity {
    match history {
        [.., r_tm2, r_tm1, r_t] => Convexity {
            value: second_difference(*r_t, *r_tm1, *r_tm2),
            warming_up: false,
        },
        _ => Convexity {
            value: 0.0,
            warming_up: true,
        },
    }
}

/// Slope with the noise dead-zone applied.
pub fn filtered_slope(slope: f64, cfg: &SchedulerConfig) -> f64 {
    if slope.abs() > cfg.momentum_threshold {
        slope
    } else {
        0.0
    }
}

pub fn update_momentum(m_prev: f64, slope: f64, convexity: f64, cfg: &SchedulerConfig) -> f64 {
    let drive = (filtered_slope(slope, cfg) + 0.5 * convexity).tanh();
    let m = cfg.ema_decay * m_prev + (1.0 - cfg.ema_decay) * drive;
    // rounding can push a convex combination of unit-bounded terms past 1
    m.clamp(-1.0, 1.0)
}

/// Promotion and demotion thresholds `(tau_high, tau_low)` at difficulty `d`.
pub fn thresholds(d: i32, cfg: &SchedulerConfig) -> (f64, f64) {
    let offset = cfg.scale * f64::from(d);
    let high = cfg.band_max.min(cfg.anchor + offset);
    let low = cfg.band_min.max(cfg.anchor - offset);
    (high, low)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Branch {
    WarmUp,
    Hold,
    Promote,
    Demote,
}

impl Branch {
    pub fn as_str(self) -> &'static str {
        match self {
            Branch::WarmUp => "warmup",
            Branch::Hold => "hold",
            Branch::Promote => "promote",
            Branch::Demote => "demote",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "warmup" => Some(Branch::WarmUp),
            "hold" => Some(Branch::Hold),
            "promote" => Some(Branch::Promote),
            "demote" => Some(Branch::Demote),
            _ => None,
        }
    }
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Inputs of the three-branch rule for one full-window cycle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecisionInputs {
    pub win_mean: f64,
    pub stable: bool,
    pub convexity: f64,
    pub momentum: f64,
    pub tau_high: f64,
    pub tau_low: f64,
}

pub fn decide(inputs: &DecisionInputs, cfg: &SchedulerConfig) -> Branch {
    let tol = cfg.momentum_tolerance;
    if inputs.win_mean > inputs.tau_high && inputs.stable && inputs.momentum > tol {
        Branch::Promote
    } else if (inputs.win_mean < inputs.tau_low || inputs.convexity < -cfg.reward_tolerance)
        && inputs.momentum < -tol
    {
        Branch::Demote
    } else {
        Branch::Hold
    }
}

/// Everything computed during one scheduler cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub cycle: u64,
    pub sample: EvalSample,
    pub stats: Option<WindowStats>,
    pub slope: Option<f64>,
    pub convexity: Convexity,
    pub momentum: f64,
    pub tau_high: f64,
    pub tau_low: f64,
    pub stable: bool,
    pub branch: Branch,
    /// Difficulty after this cycle's decision.
    pub difficulty: i32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SchedulerState {
    pub difficulty: i32,
    pub momentum: f64,
    pub window: EvalWindow,
    /// Number of samples consumed so far.
    pub cycle: u64,
    pub last_switch_cycle: Option<u64>,
    recent_returns: VecDeque<f64>,
}

impl SchedulerState {
    pub fn new(cfg: &SchedulerConfig) -> Self {
        Self {
            difficulty: cfg.d_start,
            momentum: 0.0,
            window: EvalWindow::new(cfg.window_len),
            cycle: 0,
            last_switch_cycle: None,
            recent_returns: VecDeque::with_capacity(3),
        }
    }

    pub fn recent_returns(&self) -> Vec<f64> {
        self.recent_returns.iter().copied().collect()
    }

    /// Feeds one sample through the scheduler and returns the cycle's record.
    pub fn step(&mut self, sample: EvalSample, cfg: &SchedulerConfig) -> Decision {
        self.window.push(sample);
        if self.recent_returns.len() == 3 {
            self.recent_returns.pop_front();
        }
        self.recent_returns.push_back(sample.mean_return);
        self.cycle += 1;

        let (tau_high, tau_low) = thresholds(self.difficulty, cfg);
        let history: Vec<f64> = self.recent_returns.iter().copied().collect();
        let convexity = reward_convexity(&history);

        let full = window_stats(&self.window)
            .and_then(|stats| trend_slope(&self.window).map(|slope| (stats, slope)));
        let (stats, slope) = match full {
            Ok(v) => v,
            // warm-up (or a 1-sample window): hold and leave momentum alone
            Err(_) => {
                return Decision {
                    cycle: self.cycle,
                    sample,
                    stats: window_stats(&self.window).ok(),
                    slope: None,
                    convexity,
                    momentum: self.momentum,
                    tau_high,
                    tau_low,
                    stable: false,
                    branch: Branch::WarmUp,
                    difficulty: self.difficulty,
                }
            }
        };

        let stable = stability(stats.win_std, stats.return_std, cfg);
        let drive_slope = slope * cfg.slope_units.scale(cfg.window_len);
        self.momentum = update_momentum(self.momentum, drive_slope, convexity.value, cfg);
        let branch = decide(
            &DecisionInputs {
                win_mean: stats.win_mean,
                stable,
                convexity: convexity.value,
                momentum: self.momentum,
                tau_high,
                tau_low,
            },
            cfg,
        );
        let next = match branch {
            Branch::Promote => (self.difficulty + cfg.step_up).min(cfg.d_max),
            Branch::Demote => (self.difficulty - cfg.step_down).max(cfg.d_min),
            Branch::Hold | Branch::WarmUp => self.difficulty,
        };
        if next != self.difficulty {
            self.last_switch_cycle = Some(self.cycle);
            self.difficulty = next;
        }
        Decision {
            cycle: self.cycle,
            sample,
            stats: Some(stats),
            slope: Some(slope),
            convexity,
            momentum: self.momentum,
            tau_high,
            tau_low,
            stable,
            branch,
            difficulty: self.difficulty,
        }
    }

    /// Plain-text `key=value` checkpoint of the full state.
    pub fn to_snapshot(&self) -> String {
        let pairs: Vec<String> = self
            .window
            .iter()
            .map(|s| format!("{}:{}", s.win_rate, s.mean_return))
            .collect();
        let recent: Vec<String> = self.recent_returns.iter().map(|r| r.to_string()).collect();
        let last = self
            .last_switch_cycle
            .map_or_else(|| "none".to_string(), |c| c.to_string());
        format!(
            "difficulty={}\nmomentum={}\ncycle={}\nlast_switch_cycle={}\nwindow_capacity={}\nwindow={}\nrecent_returns={}\n",
            self.difficulty,
            self.momentum,
            self.cycle,
            last,
            self.window.capacity(),
            pairs.join(","),
            recent.join(",")
        )
    }

    pub fn from_snapshot(text: &str) -> Result<Self, FlexDiffError> {
        let err = |m: String| FlexDiffError::Snapshot(m);
        let mut fields = std::collections::HashMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("line {}: expected key=value", lineno + 1)))?;
            fields.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| {
            fields
                .get(k)
                .map(String::as_str)
                .ok_or_else(|| err(format!("missing key {k}")))
        };
        let num = |k: &str| -> Result<f64, FlexDiffError> {
            get(k)?
                .parse::<f64>()
                .map_err(|e| err(format!("{k}: {e}")))
        };
        let difficulty = get("difficulty")?
            .parse::<i32>()
            .map_err(|e| err(format!("difficulty: {e}")))?;
        let momentum = num("momentum")?;
        let cycle = get("cycle")?
            .parse::<u64>()
            .map_err(|e| err(format!("cycle: {e}")))?;
        let last_switch_cycle = match get("last_switch_cycle")? {
            "none" => None,
            v => Some(
                v.parse::<u64>()
                    .map_err(|e| err(format!("last_switch_cycle: {e}")))?,
            ),
        };
        let capacity = get("window_capacity")?
            .parse::<usize>()
            .map_err(|e| err(format!("window_capacity: {e}")))?;
        let mut window = EvalWindow::new(capacity);
        for pair in get("window")?.split(',').filter(|p| !p.is_empty()) {
            let (w, r) = pair
                .split_once(':')
                .ok_or_else(|| err(format!("window entry {pair:?}")))?;
            let w = w.parse::<f64>().map_err(|e| err(format!("window: {e}")))?;
            let r = r.parse::<f64>().map_err(|e| err(format!("window: {e}")))?;
            window.push(EvalSample::new(w, r)?);
        }
        let mut recent_returns = VecDeque::with_capacity(3);
        for r in get("recent_returns")?.split(',').filter(|p| !p.is_empty()) {
            recent_returns.push_back(
                r.parse::<f64>()
                    .map_err(|e| err(format!("recent_returns: {e}")))?,
            );
        }
        if recent_returns.len() > 3 {
            return Err(err("recent_returns holds more than 3 entries".into()));
        }
        if momentum.abs() > 1.0 {
            return Err(err(format!("momentum {momentum} outside [-1, 1]")));
        }
        Ok(Self {
            difficulty,
            momentum,
            window,
            cycle,
            last_switch_cycle,
            recent_returns,
        })
    }
}

/// Pure form of [`SchedulerState::step`].
pub fn schedule_step(
    state: &SchedulerState,
    sample: EvalSample,
    cfg: &SchedulerConfig,
) -> (SchedulerState, Decision) {
    let mut next = state.clone();
    let decision = next.step(sample, cfg);
    (next, decision)
}

/// Fewest cycles the momentum needs to travel from `+tolerance` to below
/// `-tolerance` when every cycle is driven at the saturated value `-1`.
pub fn min_cycles_between_reversals(cfg: &SchedulerConfig) -> u32 {
    let l = cfg.momentum_tolerance;
    let ratio = (1.0 - l) / (1.0 + l);
    // m_k + 1 = (L + 1) * gamma^k, so m_k < -L  <=>  gamma^k < ratio
    (ratio.ln() / cfg.ema_decay.ln()).ceil() as u32
}
