//! Training orchestration: episode collection, the replay buffer, periodic
//! evaluation, scheduler cycles, metrics and sweeps.
//!
//! The learner takes gradient steps after every collected episode; the
//! scheduler only sees one evaluation sample per cycle and only changes the
//! training difficulty between cycles.

mod rollout;
mod sweep;
mod train;

pub use rollout::{agent_inputs, evaluate, greedy_action, run_episode, EpisodeOutcome};
pub use sweep::{sweep, GridPoint, SweepRun, SweepSummary};
pub use train::{train, MetricsRow, RunResult};

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cgrpa::{CgrpaError, Episode};
use crate::env::EnvError;
use crate::flexdiff::FlexDiffError;
use crate::nn::checkpoint::CheckpointError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid run config: {0}")]
    Config(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Learner(#[from] CgrpaError),
    #[error(transparent)]
    Scheduler(#[from] FlexDiffError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("empty history")]
    EmptyHistory,
    #[error("training aborted at env step {env_step}: {source}")]
    Aborted {
        env_step: u64,
        #[source]
        source: CgrpaError,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub total_steps: u64,
    /// Environment steps per evaluation (and scheduler) cycle.
    pub eval_interval: u64,
    pub eval_rollouts: usize,
    pub target_difficulty: i32,
    pub seeds: Vec<u64>,
    pub epsilon_start: f64,
    pub epsilon_finish: f64,
    pub epsilon_anneal_steps: u64,
    /// Learner steps after each collected episode.
    pub grad_steps_per_episode: u32,
    /// Adapt the training difficulty; when off, train at `target_difficulty`.
    pub scheduler: bool,
    /// Counterfactual advantages, KL and policy terms; when off, the plain backbone.
    pub cgrpa: bool,
    pub top_k: usize,
    /// Save a checkpoint every this many cycles (0: only at the end).
    pub checkpoint_every: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            total_steps: 200_000,
            eval_interval: 10_000,
            eval_rollouts: 32,
            target_difficulty: 7,
            seeds: vec![1, 2, 3, 4, 5],
            epsilon_start: 1.0,
            epsilon_finish: 0.05,
            epsilon_anneal_steps: 50_000,
            grad_steps_per_episode: 8,
            scheduler: true,
            cgrpa: true,
            top_k: 20,
            checkpoint_every: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::Config(m.to_string()));
        if self.eval_interval < 1 {
            return bad("eval_interval must be at least 1");
        }
        if self.eval_rollouts < 1 {
            return bad("eval_rollouts must be at least 1");
        }
        if self.top_k < 1 {
            return bad("top_k must be at least 1");
        }
        if !(1..=10).contains(&self.target_difficulty) {
            return bad("target_difficulty must lie in 1..=10");
        }
        if !(0.0..=1.0).contains(&self.epsilon_start) || !(0.0..=1.0).contains(&self.epsilon_finish) {
            return bad("epsilon values must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Linear annealing from `epsilon_start` to `epsilon_finish` over
/// `epsilon_anneal_steps`, constant afterwards.
pub fn epsilon(step: u64, cfg: &RunConfig) -> f64 {
    if cfg.epsilon_anneal_steps == 0 || step >= cfg.epsilon_anneal_steps {
        return cfg.epsilon_finish;
    }
    let frac = step as f64 / cfg.epsilon_anneal_steps as f64;
    cfg.epsilon_start + frac * (cfg.epsilon_finish - cfg.epsilon_start)
}

/// Mean of the `top_k` largest values, or of all values when there are fewer.
pub fn normalized_win_rate(history: &[f64], top_k: usize) -> Result<f64, HarnessError> {
    if history.is_empty() {
        return Err(HarnessError::EmptyHistory);
    }
    let mut sorted = history.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let k = top_k.clamp(1, sorted.len());
    Ok(sorted[..k].iter().sum::<f64>() / k as f64)
}

/// Ring of complete episodes; the oldest is evicted once full.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    episodes: VecDeque<Episode>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            episodes: VecDeque::with_capacity(capacity.min(1024)),
        }
    }

    pub fn push(&mut self, episode: Episode) {
        if self.episodes.len() == self.capacity {
            self.episodes.pop_front();
        }
        self.episodes.push_back(episode);
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// `count` distinct episodes chosen uniformly; `None` if too few are stored.
    pub fn sample<R: Rng>(&self, count: usize, rng: &mut R) -> Option<Vec<&Episode>> {
        if count > self.episodes.len() {
            return None;
        }
        let idx = rand::seq::index::sample(rng, self.episodes.len(), count);
        Some(idx.into_iter().map(|i| &self.episodes[i]).collect())
    }
}
