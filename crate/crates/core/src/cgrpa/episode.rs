use ndarray::Array2;

use super::CgrpaError;

/// One complete episode, stored flat. Step `t` of an episode of length `T`
/// has observations, state and masks at index `t` and `t + 1`, so those
/// arrays hold `T + 1` entries while actions, rewards and terminal flags hold
/// `T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub n_agents: usize,
    pub obs_dim: usize,
    pub state_dim: usize,
    pub n_actions: usize,
    obs: Vec<f64>,
    state: Vec<f64>,
    avail: Vec<bool>,
    actions: Vec<usize>,
    rewards: Vec<f64>,
    terminal: Vec<bool>,
}

/// Borrowed view of one step of an episode.
#[derive(Debug, Clone, Copy)]
pub struct Transition<'a> {
    pub obs: &'a [f64],
    pub next_obs: &'a [f64],
    pub state: &'a [f64],
    pub next_state: &'a [f64],
    pub actions: &'a [usize],
    pub reward: f64,
    /// The episode ended here by elimination; time-limit cutoffs stay false.
    pub terminal: bool,
    pub avail: &'a [bool],
    pub next_avail: &'a [bool],
}

impl Episode {
    /// Starts an episode from its first observation.
    pub fn start(
        obs: &[Vec<f64>],
        state: &[f64],
        avail: &[Vec<bool>],
    ) -> Result<Self, CgrpaError> {
        let n_agents = obs.len();
        if n_agents == 0 || avail.len() != n_agents {
            return Err(CgrpaError::Batch("episode needs one observation and mask per agent".into()));
        }
        let mut ep = Self {
            n_agents,
            obs_dim: obs[0].len(),
            state_dim: state.len(),
            n_actions: avail[0].len(),
            obs: Vec::new(),
            state: Vec::new(),
            avail: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            terminal: Vec::new(),
        };
        ep.push_frame(obs, state, avail)?;
        Ok(ep)
    }

    fn push_frame(&mut self, obs: &[Vec<f64>], state: &[f64], avail: &[Vec<bool>]) -> Result<(), CgrpaError> {
        if obs.len() != self.n_agents
            || avail.len() != self.n_agents
            || state.len() != self.state_dim
            || obs.iter().any(|o| o.len() != self.obs_dim)
            || avail.iter().any(|m| m.len() != self.n_actions)
        {
            return Err(CgrpaError::Batch("frame shape differs from the episode's".into()));
        }
        for o in obs {
            self.obs.extend_from_slice(o);
        }
        self.state.extend_from_slice(state);
        for m in avail {
            self.avail.extend_from_slice(m);
        }
        Ok(())
    }

    /// Appends one step: the joint action taken, its reward, and what followed.
    pub fn push(
        &mut self,
        actions: &[usize],
        reward: f64,
        terminal: bool,
        next_obs: &[Vec<f64>],
        next_state: &[f64],
        next_avail: &[Vec<bool>],
    ) -> Result<(), CgrpaError> {
        if actions.len() != self.n_agents {
            return Err(CgrpaError::Batch("one action per agent required".into()));
        }
        let t = self.len();
        for (i, &a) in actions.iter().enumerate() {
            if a >= self.n_actions || !self.avail_at(t, i)[a] {
                return Err(CgrpaError::Batch(format!("agent {i} took unavailable action {a} at step {t}")));
            }
        }
        if !reward.is_finite() {
            return Err(CgrpaError::Batch(format!("non-finite reward at step {t}")));
        }
        self.push_frame(next_obs, next_state, next_avail)?;
        self.actions.extend_from_slice(actions);
        self.rewards.push(reward);
        self.terminal.push(terminal);
        Ok(())
    }

    /// Number of steps.
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }

    pub fn obs_at(&self, t: usize, agent: usize) -> &[f64] {
        let k = (t * self.n_agents + agent) * self.obs_dim;
        &self.obs[k..k + self.obs_dim]
    }

    pub fn state_at(&self, t: usize) -> &[f64] {
        &self.state[t * self.state_dim..(t + 1) * self.state_dim]
    }

    pub fn avail_at(&self, t: usize, agent: usize) -> &[bool] {
        let k = (t * self.n_agents + agent) * self.n_actions;
        &self.avail[k..k + self.n_actions]
    }

    pub fn actions_at(&self, t: usize) -> &[usize] {
        &self.actions[t * self.n_agents..(t + 1) * self.n_agents]
    }

    pub fn transition(&self, t: usize) -> Transition<'_> {
        let n = self.n_agents;
        let frame_obs = |t: usize| &self.obs[t * n * self.obs_dim..(t + 1) * n * self.obs_dim];
        let frame_avail = |t: usize| &self.avail[t * n * self.n_actions..(t + 1) * n * self.n_actions];
        Transition {
            obs: frame_obs(t),
            next_obs: frame_obs(t + 1),
            state: self.state_at(t),
            next_state: self.state_at(t + 1),
            actions: self.actions_at(t),
            reward: self.rewards[t],
            terminal: self.terminal[t],
            avail: frame_avail(t),
            next_avail: frame_avail(t + 1),
        }
    }
}

/// Episodes padded to a common length and laid out for the networks.
///
/// Agent-network rows are ordered `b * n_agents + i`; per-step arrays are
/// indexed `t * batch + b`. Padded steps have `filled = false`, only the
/// no-op available, and zero inputs.
#[derive(Debug, Clone)]
pub struct EpisodeBatch {
    pub batch: usize,
    pub n_agents: usize,
    pub n_actions: usize,
    /// Steps per episode after padding.
    pub max_len: usize,
    /// `max_len + 1` matrices of shape `(batch * n_agents) x (obs_dim + n_agents)`:
    /// the observation followed by a one-hot agent id.
    pub inputs: Vec<Array2<f64>>,
    /// `(max_len + 1) * batch` rows.
    pub states: Array2<f64>,
    /// `[(t * batch + b) * n_agents + i] * n_actions + a` for `t` in `0..=max_len`.
    pub avail: Vec<bool>,
    /// `(t * batch + b) * n_agents + i` for `t` in `0..max_len`.
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub terminal: Vec<bool>,
    pub filled: Vec<bool>,
}

impl EpisodeBatch {
    pub fn from_episodes(episodes: &[&Episode]) -> Result<Self, CgrpaError> {
        let first = episodes
            .first()
            .ok_or_else(|| CgrpaError::Batch("empty batch".into()))?;
        let (n, obs_dim, state_dim, n_actions) = (first.n_agents, first.obs_dim, first.state_dim, first.n_actions);
        if episodes
            .iter()
            .any(|e| (e.n_agents, e.obs_dim, e.state_dim, e.n_actions) != (n, obs_dim, state_dim, n_actions))
        {
            return Err(CgrpaError::Batch("episodes with different shapes".into()));
        }
        if episodes.iter().any(|e| e.is_empty()) {
            return Err(CgrpaError::Batch("episode with no steps".into()));
        }
        let batch = episodes.len();
        let max_len = episodes.iter().map(|e| e.len()).max().unwrap_or(0);
        let frames = max_len + 1;
        let width = obs_dim + n;
        let mut inputs = vec![Array2::zeros((batch * n, width)); frames];
        let mut states = Array2::zeros((frames * batch, state_dim));
        let mut avail = vec![false; frames * batch * n * n_actions];
        let steps = max_len * batch;
        let mut actions = vec![0; steps * n];
        let mut rewards = vec![0.0; steps];
        let mut terminal = vec![false; steps];
        let mut filled = vec![false; steps];
        for (b, ep) in episodes.iter().enumerate() {
            for t in 0..frames {
                let real = t <= ep.len();
                for i in 0..n {
                    let row = b * n + i;
                    let mut x = inputs[t].row_mut(row);
                    if real {
                        for (dst, &v) in x.iter_mut().zip(ep.obs_at(t, i)) {
                            *dst = v;
                        }
                    }
                    x[obs_dim + i] = 1.0;
                    let k = ((t * batch + b) * n + i) * n_actions;
                    if real {
                        avail[k..k + n_actions].copy_from_slice(ep.avail_at(t, i));
                    } else {
                        avail[k] = true;
                    }
                }
                if real {
                    for (dst, &v) in states.row_mut(t * batch + b).iter_mut().zip(ep.state_at(t)) {
                        *dst = v;
                    }
                }
                if t < ep.len() {
                    let r = t * batch + b;
                    actions[r * n..(r + 1) * n].copy_from_slice(ep.actions_at(t));
                    rewards[r] = ep.rewards[t];
                    terminal[r] = ep.terminal[t];
                    filled[r] = true;
                }
            }
        }
        Ok(Self {
            batch,
            n_agents: n,
            n_actions,
            max_len,
            inputs,
            states,
            avail,
            actions,
            rewards,
            terminal,
            filled,
        })
    }

    pub fn avail_row(&self, t: usize, b: usize, agent: usize) -> &[bool] {
        let k = ((t * self.batch + b) * self.n_agents + agent) * self.n_actions;
        &self.avail[k..k + self.n_actions]
    }

    pub fn actions_row(&self, t: usize, b: usize) -> &[usize] {
        let r = t * self.batch + b;
        &self.actions[r * self.n_agents..(r + 1) * self.n_agents]
    }

    pub fn n_filled(&self) -> usize {
        self.filled.iter().filter(|&&f| f).count()
    }
}
