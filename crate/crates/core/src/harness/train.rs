use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{epsilon, evaluate, normalized_win_rate, run_episode, HarnessError, ReplayBuffer};
use crate::cgrpa::{EpisodeBatch, Learner, LossReport};
use crate::config::ExperimentConfig;
use crate::env::Battle;
use crate::flexdiff::{Decision, SchedulerState};

const STREAM_INIT: u64 = 1;
const STREAM_ENV: u64 = 2;
const STREAM_EXPLORE: u64 = 3;
const STREAM_BUFFER: u64 = 4;
const STREAM_EVAL: u64 = 5;

/// Training episodes use seeds below this bit, evaluation rollouts above it.
const EVAL_SEED_BIT: u64 = 1 << 63;

/// One evaluation cycle. `win_rate` and `mean_return` are measured at the
/// difficulty trained on during the cycle (the scheduler's input);
/// `target_*` at the fixed reporting difficulty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub cycle: u64,
    pub win_rate: f64,
    pub mean_return: f64,
    pub env_step: u64,
    pub episodes: u64,
    pub grad_steps: u64,
    pub train_difficulty: i32,
    pub target_win_rate: f64,
    pub target_mean_return: f64,
    pub mu_w: Option<f64>,
    pub sigma_w: Option<f64>,
    pub beta_w: Option<f64>,
    pub conv: Option<f64>,
    pub momentum: Option<f64>,
    pub tau_h: Option<f64>,
    pub tau_l: Option<f64>,
    pub branch: String,
    /// Difficulty after this cycle's decision.
    pub difficulty: i32,
    pub td_loss: Option<f64>,
    pub kl_loss: Option<f64>,
    pub policy_loss: Option<f64>,
    pub grad_norm: Option<f64>,
    pub mean_advantage: Option<f64>,
    pub epsilon: f64,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub seed: u64,
    pub rows: Vec<MetricsRow>,
    /// TOP-K mean of the target-difficulty win rates.
    pub normalized_win_rate: f64,
    /// First env step at which the target-difficulty win rate reached 0.5.
    pub milestone_step: Option<u64>,
    pub learner: Learner,
}

#[derive(Default)]
struct LossAccumulator {
    sums: [f64; 5],
    count: u64,
}

impl LossAccumulator {
    fn add(&mut self, r: &LossReport) {
        let vals = [r.td_loss, r.kl_loss, r.policy_loss, r.grad_norm, r.mean_advantage];
        for (s, v) in self.sums.iter_mut().zip(vals) {
            *s += v;
        }
        self.count += 1;
    }

    fn take(&mut self) -> [Option<f64>; 5] {
        let out = if self.count == 0 {
            [None; 5]
        } else {
            self.sums.map(|s| Some(s / self.count as f64))
        };
        *self = Self::default();
        out
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Trains one seed. With `out_dir`, writes `config.toml`, `run.txt` (seed and
/// config hash), `metrics.csv` and
/// checkpoints (`checkpoints/cycle-NNNNN/`, `final/`) there.
pub fn train(cfg: &ExperimentConfig, seed: u64, out_dir: Option<&Path>) -> Result<RunResult, HarnessError> {
    cfg.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
    let run = &cfg.run;
    let learner_cfg = if run.cgrpa { cfg.learner.clone() } else { cfg.learner.plain() };
    let env_cfg = cfg.env.clone();
    let mut battle = Battle::new(env_cfg.clone())?;
    let mut scheduler = run.scheduler.then(|| SchedulerState::new(&cfg.flexdiff));
    let mut difficulty = scheduler.as_ref().map_or(run.target_difficulty, |s| s.difficulty);

    let mut init_rng = stream(seed, STREAM_INIT);
    let mut learner = Learner::new(
        learner_cfg.clone(),
        env_cfg.obs_dim(),
        env_cfg.state_dim(),
        env_cfg.n_allies,
        env_cfg.n_actions(),
        init_rng.next_u64(),
    )?;
    let mut env_rng = stream(seed, STREAM_ENV);
    let mut explore_rng = stream(seed, STREAM_EXPLORE);
    let mut buffer_rng = stream(seed, STREAM_BUFFER);
    let mut eval_rng = stream(seed, STREAM_EVAL);
    let mut buffer = ReplayBuffer::new(learner_cfg.buffer_capacity);

    let mut writer = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(dir.join("config.toml"), cfg.to_toml())?;
            fs::write(dir.join("run.txt"), format!("seed = {seed}\nconfig_hash = \"{}\"\n", cfg.hash()))?;
            Some(csv::Writer::from_writer(BufWriter::new(File::create(dir.join("metrics.csv"))?)))
        }
        None => None,
    };

    let mut rows = Vec::new();
    let mut losses = LossAccumulator::default();
    let (mut env_step, mut episodes, mut cycle) = (0u64, 0u64, 0u64);
    let mut next_eval = run.eval_interval;
    while env_step < run.total_steps {
        let start = env_step;
        let outcome = run_episode(
            &mut battle,
            learner.online(),
            |t| epsilon(start + t, run),
            difficulty,
            env_rng.next_u64() & !EVAL_SEED_BIT,
            &mut explore_rng,
        )?;
        env_step += outcome.episode.len() as u64;
        episodes += 1;
        buffer.push(outcome.episode);

        if buffer.len() >= learner_cfg.batch_size {
            for _ in 0..run.grad_steps_per_episode {
                let sample = buffer.sample(learner_cfg.batch_size, &mut buffer_rng).expect("buffer holds a batch");
                let batch = EpisodeBatch::from_episodes(&sample)?;
                match learner.learner_step(&batch) {
                    Ok(report) => losses.add(&report),
                    Err(source) => {
                        if let Some(dir) = out_dir {
                            learner.save(&dir.join("abort"))?;
                        }
                        return Err(HarnessError::Aborted { env_step, source });
                    }
                }
            }
        }

        while env_step >= next_eval {
            next_eval += run.eval_interval;
            cycle += 1;
            let seeds: Vec<u64> = (0..run.eval_rollouts)
                .map(|_| eval_rng.next_u64() | EVAL_SEED_BIT)
                .collect();
            let active = evaluate(learner.online(), &env_cfg, difficulty, &seeds)?;
            let target = if difficulty == run.target_difficulty {
                active
            } else {
                evaluate(learner.online(), &env_cfg, run.target_difficulty, &seeds)?
            };
            let decision: Option<Decision> = scheduler.as_mut().map(|s| s.step(active, &cfg.flexdiff));
            let train_difficulty = difficulty;
            if let Some(d) = &decision {
                difficulty = d.difficulty;
            }
            let [td, kl, pol, gn, adv] = losses.take();
            let row = MetricsRow {
                cycle,
                win_rate: active.win_rate,
                mean_return: active.mean_return,
                env_step,
                episodes,
                grad_steps: learner.grad_steps(),
                train_difficulty,
                target_win_rate: target.win_rate,
                target_mean_return: target.mean_return,
                mu_w: decision.as_ref().and_then(|d| d.stats.map(|s| s.win_mean)),
                sigma_w: decision.as_ref().and_then(|d| d.stats.map(|s| s.win_std)),
                beta_w: decision.as_ref().and_then(|d| d.slope),
                conv: decision.as_ref().map(|d| d.convexity.value),
                momentum: decision.as_ref().map(|d| d.momentum),
                tau_h: decision.as_ref().map(|d| d.tau_high),
                tau_l: decision.as_ref().map(|d| d.tau_low),
                branch: decision
                    .as_ref()
                    .map_or_else(|| "fixed".to_string(), |d| d.branch.to_string()),
                difficulty,
                td_loss: td,
                kl_loss: kl,
                policy_loss: pol,
                grad_norm: gn,
                mean_advantage: adv,
                epsilon: epsilon(env_step, run),
            };
            if let Some(w) = writer.as_mut() {
                w.serialize(&row)?;
                w.flush()?;
            }
            rows.push(row);
            if let (Some(dir), true) = (out_dir, run.checkpoint_every > 0 && cycle % run.checkpoint_every == 0) {
                let ck = dir.join("checkpoints").join(format!("cycle-{cycle:05}"));
                learner.save(&ck)?;
                if let Some(s) = &scheduler {
                    fs::write(ck.join("scheduler.txt"), s.to_snapshot())?;
                }
            }
        }
    }
    if let Some(dir) = out_dir {
        learner.save(&dir.join("final"))?;
        if let Some(s) = &scheduler {
            fs::write(dir.join("final").join("scheduler.txt"), s.to_snapshot())?;
        }
    }
    let history: Vec<f64> = rows.iter().map(|r| r.target_win_rate).collect();
    let normalized = if history.is_empty() { 0.0 } else { normalized_win_rate(&history, run.top_k)? };
    let milestone_step = rows.iter().find(|r| r.target_win_rate >= 0.5).map(|r| r.env_step);
    Ok(RunResult {
        seed,
        rows,
        normalized_win_rate: normalized,
        milestone_step,
        learner,
    })
}
