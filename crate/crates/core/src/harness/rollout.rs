use ndarray::Array2;
use rand::Rng;

use super::HarnessError;
use crate::cgrpa::{Episode, Nets};
use crate::env::{Battle, BattleConfig, StepResult};
use crate::flexdiff::EvalSample;

/// Agent-network input rows: each agent's observation followed by a one-hot id.
pub fn agent_inputs(obs: &[Vec<f64>]) -> Array2<f64> {
    let n = obs.len();
    let width = obs.first().map_or(0, |o| o.len());
    let mut x = Array2::zeros((n, width + n));
    for (i, o) in obs.iter().enumerate() {
        for (j, &v) in o.iter().enumerate() {
            x[[i, j]] = v;
        }
        x[[i, width + i]] = 1.0;
    }
    x
}

/// Highest-utility available action, lowest index on ties.
pub fn greedy_action(q: &[f64], avail: &[bool]) -> usize {
    let mut best: Option<usize> = None;
    for a in 0..q.len() {
        if avail[a] && best.is_none_or(|b| q[a] > q[b]) {
            best = Some(a);
        }
    }
    best.unwrap_or(0)
}

#[derive(Debug, Clone)]
pub struct EpisodeOutcome {
    pub episode: Episode,
    pub won: bool,
    /// Unscaled cumulative reward.
    pub raw_return: f64,
    /// Scaled cumulative reward, as stored in the episode.
    pub scaled_return: f64,
}

/// One epsilon-greedy episode at `difficulty`. Exploration draws come from
/// `rng`; `epsilon_at(t)` gives the rate for the episode's `t`-th step.
pub fn run_episode<R: Rng, E: Fn(u64) -> f64>(
    battle: &mut Battle,
    nets: &Nets,
    epsilon_at: E,
    difficulty: i32,
    seed: u64,
    rng: &mut R,
) -> Result<EpisodeOutcome, HarnessError> {
    battle.set_difficulty(difficulty)?;
    let first = battle.reset(seed);
    let n = battle.config().n_allies;
    let mut episode = Episode::start(&first.obs, &first.state, &first.avail)?;
    let mut h = nets.agent.zero_hidden(n);
    let mut current: StepResult = first;
    let (mut raw, mut scaled) = (0.0, 0.0);
    let mut t = 0u64;
    while !current.terminated {
        let x = agent_inputs(&current.obs);
        let (q, h_next) = nets.agent.step(x.view(), h.view()).map_err(crate::cgrpa::CgrpaError::from)?;
        h = h_next;
        let eps = epsilon_at(t);
        let actions: Vec<usize> = (0..n)
            .map(|i| {
                let mask = &current.avail[i];
                if rng.gen::<f64>() < eps {
                    let opts: Vec<usize> = (0..mask.len()).filter(|&a| mask[a]).collect();
                    opts[rng.gen_range(0..opts.len())]
                } else {
                    greedy_action(q.row(i).as_slice().expect("contiguous"), mask)
                }
            })
            .collect();
        let next = battle.step(&actions)?;
        raw += next.raw_reward;
        scaled += next.reward;
        let terminal = next.terminated && !next.truncated;
        episode.push(&actions, next.reward, terminal, &next.obs, &next.state, &next.avail)?;
        current = next;
        t += 1;
    }
    Ok(EpisodeOutcome {
        episode,
        won: current.won,
        raw_return: raw,
        scaled_return: scaled,
    })
}

/// Greedy rollouts at `difficulty`, one per seed, run in lockstep so the
/// agent network sees all live episodes as one batch. The mean return is
/// normalized by the largest achievable return.
pub fn evaluate(
    nets: &Nets,
    env: &BattleConfig,
    difficulty: i32,
    seeds: &[u64],
) -> Result<EvalSample, HarnessError> {
    if seeds.is_empty() {
        return Err(HarnessError::Config("evaluation needs at least one rollout".into()));
    }
    let cfg = BattleConfig {
        difficulty,
        ..env.clone()
    };
    let k = seeds.len();
    let n = cfg.n_allies;
    let mut battles: Vec<Battle> = Vec::with_capacity(k);
    let mut current: Vec<StepResult> = Vec::with_capacity(k);
    for &s in seeds {
        let mut b = Battle::new(cfg.clone())?;
        current.push(b.reset(s));
        battles.push(b);
    }
    let obs_dim = cfg.obs_dim();
    let mut h = nets.agent.zero_hidden(k * n);
    let mut x = Array2::zeros((k * n, obs_dim + n));
    for e in 0..k {
        for i in 0..n {
            x[[e * n + i, obs_dim + i]] = 1.0;
        }
    }
    let mut returns = vec![0.0; k];
    let mut live = k;
    while live > 0 {
        for (e, cur) in current.iter().enumerate() {
            if cur.terminated {
                continue;
            }
            for i in 0..n {
                for (j, &v) in cur.obs[i].iter().enumerate() {
                    x[[e * n + i, j]] = v;
                }
            }
        }
        let (q, h_next) = nets.agent.step(x.view(), h.view()).map_err(crate::cgrpa::CgrpaError::from)?;
        h = h_next;
        for e in 0..k {
            if current[e].terminated {
                continue;
            }
            let actions: Vec<usize> = (0..n)
                .map(|i| greedy_action(q.row(e * n + i).as_slice().expect("contiguous"), &current[e].avail[i]))
                .collect();
            let next = battles[e].step(&actions)?;
            returns[e] += next.reward;
            if next.terminated {
                live -= 1;
            }
            current[e] = next;
        }
    }
    let wins = current.iter().filter(|c| c.won).count();
    let mean_return = returns.iter().sum::<f64>() / k as f64 / cfg.max_return;
    Ok(EvalSample::new(wins as f64 / k as f64, mean_return.clamp(0.0, 1.0))?)
}
