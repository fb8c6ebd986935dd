use clmarl::flexdiff::{
    decide, min_cycles_between_reversals, reward_convexity, thresholds, trend_slope, update_momentum, window_stats,
    Branch, DecisionInputs, EvalSample, EvalWindow, SchedulerConfig, SchedulerState,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::Outcome;

fn window(ws: &[f64], rs: &[f64]) -> EvalWindow {
    let samples: Vec<EvalSample> = ws.iter().zip(rs).map(|(&w, &r)| EvalSample::new(w, r).unwrap()).collect();
    EvalWindow::from_samples(samples.len(), &samples)
}

fn two_pass(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn centered_slope(ws: &[f64]) -> f64 {
    let n = ws.len() as f64;
    let xbar = (n - 1.0) / 2.0;
    let wbar = ws.iter().sum::<f64>() / n;
    let (mut num, mut den) = (0.0, 0.0);
    for (i, w) in ws.iter().enumerate() {
        let dx = i as f64 - xbar;
        num += dx * (w - wbar);
        den += dx * dx;
    }
    num / den
}

fn threshold_oracle(d: i32, cfg: &SchedulerConfig) -> (f64, f64) {
    let up = cfg.anchor + cfg.scale * d as f64;
    let down = cfg.anchor - cfg.scale * d as f64;
    let high = if up > cfg.band_max { cfg.band_max } else { up };
    let low = if down < cfg.band_min { cfg.band_min } else { down };
    (high, low)
}

fn random_win(rng: &mut ChaCha8Rng) -> f64 {
    if rng.gen_bool(0.5) {
        rng.gen_range(0..=32) as f64 / 32.0
    } else {
        rng.gen::<f64>()
    }
}

/// Window statistics, slope, convexity and thresholds against independent
/// oracles, plus the full decision table.
pub fn exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    let mut failures = Vec::new();
    for _ in 0..1000 {
        let n = rng.gen_range(2..=40);
        let ws: Vec<f64> = (0..n).map(|_| random_win(&mut rng)).collect();
        let rs: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let w = window(&ws, &rs);
        let stats = window_stats(&w).unwrap();
        let (mw, sw) = two_pass(&ws);
        let (mr, sr) = two_pass(&rs);
        for (a, b) in [(stats.win_mean, mw), (stats.win_std, sw), (stats.return_mean, mr), (stats.return_std, sr)] {
            worst = worst.max((a - b).abs());
        }
        worst = worst.max((trend_slope(&w).unwrap() - centered_slope(&ws)).abs());

        let hist_len = rng.gen_range(0..6);
        let hist: Vec<f64> = (0..hist_len).map(|_| rng.gen::<f64>()).collect();
        let conv = reward_convexity(&hist);
        if hist_len < 3 {
            if !(conv.warming_up && conv.value == 0.0) {
                failures.push("convexity warm-up flag".to_string());
            }
        } else {
            let k = hist_len - 1;
            let oracle = (hist[k] - hist[k - 1]) - (hist[k - 1] - hist[k - 2]);
            worst = worst.max((conv.value - oracle).abs());
        }

        let band_min = rng.gen_range(0.0..0.5);
        let cfg = SchedulerConfig {
            anchor: rng.gen(),
            scale: rng.gen_range(0.0..0.1),
            band_min,
            band_max: rng.gen_range(band_min + 1e-3..=1.0),
            ..SchedulerConfig::default()
        };
        let d = rng.gen_range(0..=30);
        let (h, l) = thresholds(d, &cfg);
        let (oh, ol) = threshold_oracle(d, &cfg);
        worst = worst.max((h - oh).abs()).max((l - ol).abs());
    }
    if worst > 1e-12 {
        failures.push(format!("worst oracle deviation {worst:e}"));
    }

    let cfg = SchedulerConfig::default();
    let flat = window_stats(&window(&[0.5; 20], &[0.5; 20])).unwrap();
    let alt: Vec<f64> = (0..20).map(|i| (i % 2) as f64).collect();
    let alt_stats = window_stats(&window(&alt, &[0.5; 20])).unwrap();
    let ramp: Vec<f64> = (0..5).map(|i| 0.1 * i as f64).collect();
    let examples = [
        ("constant window", flat.win_mean == 0.5 && flat.win_std == 0.0 && flat.return_std == 0.0),
        ("alternating window", (alt_stats.win_mean - 0.5).abs() < 1e-15 && (alt_stats.win_std - 0.5).abs() < 1e-15),
        ("linear slope", (trend_slope(&window(&ramp, &[0.0; 5])).unwrap() - 0.1).abs() < 1e-15),
        ("constant slope", trend_slope(&window(&[0.3; 7], &[0.0; 7])).unwrap() == 0.0),
        ("convexity (4,2,1)", reward_convexity(&[1.0, 2.0, 4.0]).value == 1.0),
        ("convexity (3,2,1)", reward_convexity(&[1.0, 2.0, 3.0]).value == 0.0),
        ("thresholds d=0", thresholds(0, &cfg) == (0.5, 0.5)),
        ("thresholds d=7", {
            let (h, l) = thresholds(7, &cfg);
            (h - 0.64).abs() < 1e-12 && (l - 0.36).abs() < 1e-12
        }),
        ("thresholds d=20", thresholds(20, &cfg) == (0.75, 0.25)),
    ];
    for (name, ok) in examples {
        if !ok {
            failures.push(name.to_string());
        }
    }

    let cases = branch_table(&cfg);
    failures.extend(cases.1);
    failures.extend(schedule_examples());
    Outcome::new(
        failures.is_empty(),
        format!(
            "1000 windows, worst deviation {worst:.1e}; {} branch cases; {}",
            cases.0,
            if failures.is_empty() { "all examples hold".to_string() } else { failures.join(", ") }
        ),
    )
}

fn branch_table(cfg: &SchedulerConfig) -> (usize, Vec<String>) {
    let (tau_h, tau_l) = thresholds(7, cfg);
    let l = cfg.momentum_tolerance;
    let r = cfg.reward_tolerance;
    let e = 1e-9;
    let mut count = 0;
    let mut failures = Vec::new();
    for &win_mean in &[tau_l - e, tau_l, 0.5 * (tau_l + tau_h), tau_h, tau_h + e] {
        for &stable in &[false, true] {
            for &convexity in &[-r - e, -r, 0.0, r + e] {
                for &momentum in &[-l - e, -l, 0.0, l, l + e] {
                    let fast_up = win_mean > tau_h && stable && momentum > l;
                    let down = (win_mean < tau_l || convexity < -r) && momentum < -l;
                    let expected = match (fast_up, down) {
                        (true, false) => Branch::Promote,
                        (false, true) => Branch::Demote,
                        (false, false) => Branch::Hold,
                        (true, true) => unreachable!("gates are exclusive"),
                    };
                    let got = decide(
                        &DecisionInputs {
                            win_mean,
                            stable,
                            convexity,
                            momentum,
                            tau_high: tau_h,
                            tau_low: tau_l,
                        },
                        cfg,
                    );
                    count += 1;
                    if got != expected {
                        failures.push(format!("branch w={win_mean} s={stable} c={convexity} m={momentum}: {got}"));
                    }
                }
            }
        }
    }
    (count, failures)
}

/// Drives a full-window state at difficulty 7 so that the post-update
/// momentum equals `momentum`, then feeds one more sample at `win`.
fn forced_step(win: f64, momentum: f64, difficulty: i32) -> i32 {
    let cfg = SchedulerConfig::default();
    let mut st = SchedulerState::new(&cfg);
    let sample = EvalSample::new(win, 0.5).unwrap();
    for _ in 0..cfg.window_len {
        st.window.push(sample);
    }
    // constant window and returns: slope and convexity are both zero
    for _ in 0..3 {
        st.step(sample, &cfg);
    }
    st.difficulty = difficulty;
    st.momentum = momentum / cfg.ema_decay;
    let d = st.step(sample, &cfg);
    debug_assert!((d.momentum - update_momentum(momentum / cfg.ema_decay, 0.0, 0.0, &cfg)).abs() < 1e-15);
    d.difficulty
}

fn schedule_examples() -> Vec<String> {
    let mut failures = Vec::new();
    if forced_step(0.8, 0.5, 7) != 8 {
        failures.push("promotion 7 -> 8".into());
    }
    if forced_step(0.2, -0.5, 7) != 6 {
        failures.push("demotion 7 -> 6".into());
    }
    if forced_step(0.8, 0.5, 10) != 10 {
        failures.push("clamp at d_max".into());
    }
    failures
}

/// Worst-case reversal timing and randomized streams through the full scheduler.
pub fn anti_chatter() -> Outcome {
    let cfg = SchedulerConfig::default();
    let k_min = min_cycles_between_reversals(&cfg);
    // closed form: smallest k with (1 + L) * gamma^k - 1 < -L
    let ratio: f64 = (1.0 - 0.2) / (1.0 + 0.2);
    let closed = (ratio.ln() / 0.9f64.ln()).ceil() as u32;

    // worst case: momentum just past +L, then the most negative drive every cycle
    let mut m = cfg.momentum_tolerance + 1e-12;
    let mut cycles = 0;
    while m >= -cfg.momentum_tolerance {
        m = update_momentum(m, -1e3, -2.0, &cfg);
        cycles += 1;
    }
    let mut failures = Vec::new();
    if k_min != 4 || closed != 4 || cycles != 4 {
        failures.push(format!("k_min {k_min}, closed form {closed}, simulated {cycles}"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (mut switches, mut reversals, mut slack, mut default_gap) = (0u64, 0u64, i64::MAX, u64::MAX);
    for stream in 0..10_000 {
        let cfg = if stream % 4 == 0 {
            SchedulerConfig::default()
        } else {
            SchedulerConfig {
                window_len: rng.gen_range(2..=8),
                momentum_threshold: rng.gen_range(0.0..0.2),
                ema_decay: rng.gen_range(0.5..0.95),
                momentum_tolerance: rng.gen_range(0.05..0.4),
                winrate_std_tolerance: rng.gen_range(0.05..1.0),
                reward_std_tolerance: rng.gen_range(0.05..1.0),
                ..SchedulerConfig::default()
            }
        };
        let bound = u64::from(min_cycles_between_reversals(&cfg));
        let mut st = SchedulerState::new(&cfg);
        let mut last: Option<(u64, i32)> = None;
        let (mut w, mut r) = (rng.gen::<f64>(), rng.gen::<f64>());
        for cycle in 1..=200u64 {
            // piecewise regimes: steady drifts with occasional jumps
            if rng.gen_bool(0.1) {
                w = rng.gen();
                r = rng.gen();
            } else {
                w = (w + rng.gen_range(-0.15..0.15)).clamp(0.0, 1.0);
                r = (r + rng.gen_range(-0.15..0.15)).clamp(0.0, 1.0);
            }
            let before = st.difficulty;
            let d = st.step(EvalSample::new(w, r).unwrap(), &cfg);
            let dir = (d.difficulty - before).signum();
            if dir != 0 {
                switches += 1;
                if let Some((at, prev_dir)) = last {
                    if prev_dir != dir {
                        reversals += 1;
                        slack = slack.min((cycle - at) as i64 - bound as i64);
                        if stream % 4 == 0 {
                            default_gap = default_gap.min(cycle - at);
                        }
                        if cycle - at < bound {
                            failures.push(format!("stream {stream}: reversal after {} < {bound}", cycle - at));
                        }
                    }
                }
                last = Some((cycle, dir));
            }
        }
    }
    if reversals == 0 {
        failures.push("random streams produced no reversals".into());
    }
    failures.truncate(5);
    Outcome::new(
        failures.is_empty(),
        format!(
            "k_min={k_min} (simulated {cycles}); 10^4 streams: {switches} switches, {reversals} reversals, min slack over bound {slack}, tightest default-config gap {default_gap}{}",
            if failures.is_empty() { String::new() } else { format!("; {}", failures.join(", ")) }
        ),
    )
}
