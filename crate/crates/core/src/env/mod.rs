//! Grid micro-battle: a small cooperative team of learned agents against a
//! scripted enemy squad whose strength is set by a 1..=10 difficulty level.
//!
//! Each agent sees only units inside its sight radius; the learner's mixer
//! additionally gets the global state. Actions per unit:
//!
//! | index | meaning |
//! |-------|---------|
//! | 0 | no-op (dead units only) |
//! | 1 | stop |
//! | 2..=5 | move north, south, east, west |
//! | 6 + j | attack opposing unit `j` |
//!
//! Observation layout for agent `i` (`5 * (n_allies - 1 + n_enemies) + 1 + n_actions`):
//! one block `[dx/sight, dy/sight, dist/sight, health_frac, team]` for each
//! other ally then each enemy (`team` = +1 ally, -1 enemy; all zeros when the
//! unit is dead or out of sight), then own health fraction and a one-hot of
//! the agent's previous action. Dead agents observe all zeros.
//!
//! State layout (`4 * (n_allies + n_enemies) + n_allies * n_actions`):
//! `[x/(w-1), y/(h-1), health_frac, alive]` for every ally then every enemy
//! (zeros once dead), followed by the allies' previous actions one-hot.

mod opponent;

pub use opponent::{chase_target, scripted_actions, Movement, OpponentProfile, Targeting};

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const ACTION_NOOP: usize = 0;
pub const ACTION_STOP: usize = 1;
pub const ACTION_NORTH: usize = 2;
pub const ACTION_SOUTH: usize = 3;
pub const ACTION_EAST: usize = 4;
pub const ACTION_WEST: usize = 5;
pub const ACTION_ATTACK_BASE: usize = 6;

pub const KILL_BONUS: f64 = 10.0;
pub const WIN_BONUS: f64 = 200.0;
pub const OBS_BLOCK: usize = 5;
pub const STATE_BLOCK: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("invalid battle config: {0}")]
    Config(String),
    #[error("agent {agent} chose unavailable action {action}")]
    UnavailableAction { agent: usize, action: usize },
    #[error("expected {expected} actions, got {got}")]
    ActionCount { expected: usize, got: usize },
    #[error("episode already terminated")]
    Terminated,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnitStats {
    pub health: f64,
    pub damage: f64,
    pub attack_range: f64,
    pub sight_range: f64,
}

impl Default for UnitStats {
    fn default() -> Self {
        Self {
            health: 15.0,
            damage: 3.0,
            attack_range: 3.0,
            sight_range: 6.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BattleConfig {
    pub width: usize,
    pub height: usize,
    pub n_allies: usize,
    pub n_enemies: usize,
    pub ally: UnitStats,
    pub enemy: UnitStats,
    pub episode_limit: u32,
    pub difficulty: i32,
    /// Return of a perfect episode after reward scaling.
    pub max_return: f64,
    /// Width in columns of each team's spawn region.
    pub spawn_cols: usize,
}

impl Default for BattleConfig {
    fn default() -> Self {
        Self::three_v_three()
    }
}

impl BattleConfig {
    /// Symmetric 3 vs 3.
    pub fn three_v_three() -> Self {
        Self {
            width: 12,
            height: 12,
            n_allies: 3,
            n_enemies: 3,
            ally: UnitStats::default(),
            enemy: UnitStats::default(),
            episode_limit: 60,
            difficulty: 7,
            max_return: 20.0,
            spawn_cols: 3,
        }
    }

    /// 3 allies against 4 enemies of the same type.
    pub fn three_v_four() -> Self {
        Self {
            n_enemies: 4,
            episode_limit: 70,
            ..Self::three_v_three()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "3v3" => Some(Self::three_v_three()),
            "3v4" => Some(Self::three_v_four()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |m: String| Err(EnvError::Config(m));
        if self.n_allies < 1 || self.n_enemies < 1 {
            return bad("unit counts must be at least 1".into());
        }
        if self.episode_limit < 1 {
            return bad("episode_limit must be at least 1".into());
        }
        if !(1..=10).contains(&self.difficulty) {
            return bad(format!("difficulty {} outside 1..=10", self.difficulty));
        }
        if self.width < 2 || self.height < 1 || self.spawn_cols < 1 || 2 * self.spawn_cols > self.width
        {
            return bad("grid must fit two disjoint spawn regions".into());
        }
        let capacity = self.spawn_cols * self.height;
        if self.n_allies > capacity || self.n_enemies > capacity {
            return bad(format!(
                "{} allies / {} enemies exceed spawn capacity {capacity}",
                self.n_allies, self.n_enemies
            ));
        }
        for (name, s) in [("ally", &self.ally), ("enemy", &self.enemy)] {
            if !(s.health > 0.0 && s.damage >= 0.0 && s.attack_range >= 0.0 && s.sight_range > 0.0)
            {
                return bad(format!("{name} stats must be positive"));
            }
        }
        if !(self.max_return > 0.0) {
            return bad("max_return must be positive".into());
        }
        Ok(())
    }

    pub fn n_actions(&self) -> usize {
        ACTION_ATTACK_BASE + self.n_enemies
    }

    pub fn obs_dim(&self) -> usize {
        OBS_BLOCK * (self.n_allies - 1 + self.n_enemies) + 1 + self.n_actions()
    }

    pub fn state_dim(&self) -> usize {
        STATE_BLOCK * (self.n_allies + self.n_enemies) + self.n_allies * self.n_actions()
    }

    /// Starting health of each enemy at this config's difficulty.
    pub fn enemy_start_health(&self) -> f64 {
        self.enemy.health * OpponentProfile::for_level(self.difficulty).health_multiplier
    }

    /// Unscaled return of a perfect episode.
    pub fn max_raw_return(&self) -> f64 {
        self.n_enemies as f64 * (self.enemy_start_health() + KILL_BONUS) + WIN_BONUS
    }

    pub fn reward_scale(&self) -> f64 {
        self.max_return / self.max_raw_return()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Team {
    Ally,
    Enemy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct UnitId {
    pub team: Team,
    pub index: usize,
}

impl fmt::Display for UnitId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.team {
            Team::Ally => write!(f, "ally{}", self.index),
            Team::Enemy => write!(f, "enemy{}", self.index),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnitState {
    pub pos: (i32, i32),
    pub health: f64,
    pub max_health: f64,
    pub alive: bool,
    pub team: Team,
}

impl UnitState {
    pub fn health_frac(&self) -> f64 {
        if self.alive {
            self.health / self.max_health
        } else {
            0.0
        }
    }
}

pub fn distance(a: (i32, i32), b: (i32, i32)) -> f64 {
    let dx = f64::from(a.0 - b.0);
    let dy = f64::from(a.1 - b.1);
    (dx * dx + dy * dy).sqrt()
}

pub fn move_delta(action: usize) -> Option<(i32, i32)> {
    match action {
        ACTION_NORTH => Some((0, -1)),
        ACTION_SOUTH => Some((0, 1)),
        ACTION_EAST => Some((1, 0)),
        ACTION_WEST => Some((-1, 0)),
        _ => None,
    }
}

/// One line of the per-episode event log.
#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub step: u32,
    pub actor: UnitId,
    pub action: usize,
    pub target: Option<UnitId>,
    pub damage: f64,
    pub death: Option<UnitId>,
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let target = self.target.map_or_else(|| "-".to_string(), |t| t.to_string());
        let death = self.death.map_or_else(|| "-".to_string(), |t| t.to_string());
        write!(
            f,
            "step={} actor={} action={} target={} damage={} deaths={}",
            self.step, self.actor, self.action, target, self.damage, death
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    /// Scaled shared reward (a perfect episode sums to `max_return`).
    pub reward: f64,
    /// Unscaled reward: damage + kill bonuses + win bonus.
    pub raw_reward: f64,
    pub terminated: bool,
    /// Ended by the step limit rather than by one side being eliminated.
    pub truncated: bool,
    pub won: bool,
    pub obs: Vec<Vec<f64>>,
    pub state: Vec<f64>,
    pub avail: Vec<Vec<bool>>,
}

#[derive(Debug, Clone)]
pub struct Battle {
    cfg: BattleConfig,
    allies: Vec<UnitState>,
    enemies: Vec<UnitState>,
    last_actions: Vec<Option<usize>>,
    rng: ChaCha8Rng,
    steps: u32,
    terminated: bool,
    won: bool,
    events: Vec<Event>,
}

impl Battle {
    pub fn new(cfg: BattleConfig) -> Result<Self, EnvError> {
        cfg.validate()?;
        let mut b = Self {
            allies: Vec::new(),
            enemies: Vec::new(),
            last_actions: vec![None; cfg.n_allies],
            rng: ChaCha8Rng::seed_from_u64(0),
            steps: 0,
            terminated: true,
            won: false,
            events: Vec::new(),
            cfg,
        };
        b.reset(0);
        Ok(b)
    }

    pub fn config(&self) -> &BattleConfig {
        &self.cfg
    }

    pub fn set_difficulty(&mut self, difficulty: i32) -> Result<(), EnvError> {
        let cfg = BattleConfig {
            difficulty,
            ..self.cfg.clone()
        };
        cfg.validate()?;
        self.cfg = cfg;
        Ok(())
    }

    pub fn allies(&self) -> &[UnitState] {
        &self.allies
    }

    pub fn enemies(&self) -> &[UnitState] {
        &self.enemies
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    /// Replaces both teams' units, e.g. to stage a specific engagement.
    pub fn set_units(&mut self, allies: Vec<UnitState>, enemies: Vec<UnitState>) -> Result<(), EnvError> {
        if allies.len() != self.cfg.n_allies || enemies.len() != self.cfg.n_enemies {
            return Err(EnvError::Config("unit counts do not match the config".into()));
        }
        for u in allies.iter().chain(&enemies) {
            if !self.in_grid(u.pos) {
                return Err(EnvError::Config(format!("position {:?} outside grid", u.pos)));
            }
        }
        self.allies = allies;
        self.enemies = enemies;
        Ok(())
    }

    pub fn steps(&self) -> u32 {
        self.steps
    }

    pub fn is_terminated(&self) -> bool {
        self.terminated
    }

    /// Places both teams in their spawn regions and starts a new episode.
    pub fn reset(&mut self, seed: u64) -> StepResult {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = &self.cfg;
        let h = cfg.height as i32;
        let left: Vec<(i32, i32)> = (0..cfg.spawn_cols as i32)
            .flat_map(|x| (0..h).map(move |y| (x, y)))
            .collect();
        let right: Vec<(i32, i32)> = ((cfg.width - cfg.spawn_cols) as i32..cfg.width as i32)
            .flat_map(|x| (0..h).map(move |y| (x, y)))
            .collect();
        let ally_cells: Vec<_> = left
            .choose_multiple(&mut self.rng, cfg.n_allies)
            .copied()
            .collect();
        let enemy_cells: Vec<_> = right
            .choose_multiple(&mut self.rng, cfg.n_enemies)
            .copied()
            .collect();
        let enemy_health = cfg.enemy_start_health();
        self.allies = ally_cells
            .into_iter()
            .map(|pos| UnitState {
                pos,
                health: cfg.ally.health,
                max_health: cfg.ally.health,
                alive: true,
                team: Team::Ally,
            })
            .collect();
        self.enemies = enemy_cells
            .into_iter()
            .map(|pos| UnitState {
                pos,
                health: enemy_health,
                max_health: enemy_health,
                alive: true,
                team: Team::Enemy,
            })
            .collect();
        self.last_actions = vec![None; self.cfg.n_allies];
        self.steps = 0;
        self.terminated = false;
        self.won = false;
        self.events.clear();
        self.result(0.0, false)
    }

    fn occupied(&self, cell: (i32, i32)) -> bool {
        self.allies
            .iter()
            .chain(&self.enemies)
            .any(|u| u.alive && u.pos == cell)
    }

    fn in_grid(&self, cell: (i32, i32)) -> bool {
        cell.0 >= 0 && cell.1 >= 0 && (cell.0 as usize) < self.cfg.width && (cell.1 as usize) < self.cfg.height
    }

    fn can_move(&self, from: (i32, i32), action: usize) -> bool {
        move_delta(action).is_some_and(|(dx, dy)| {
            let to = (from.0 + dx, from.1 + dy);
            self.in_grid(to) && !self.occupied(to)
        })
    }

    fn avail_for(&self, unit: &UnitState, foes: &[UnitState], range: f64) -> Vec<bool> {
        let n_actions = ACTION_ATTACK_BASE + foes.len();
        let mut mask = vec![false; n_actions];
        if !unit.alive {
            mask[ACTION_NOOP] = true;
            return mask;
        }
        mask[ACTION_STOP] = true;
        for a in ACTION_NORTH..=ACTION_WEST {
            mask[a] = self.can_move(unit.pos, a);
        }
        for (j, foe) in foes.iter().enumerate() {
            mask[ACTION_ATTACK_BASE + j] = foe.alive && distance(unit.pos, foe.pos) <= range;
        }
        mask
    }

    pub fn get_avail_actions(&self, agent: usize) -> Vec<bool> {
        self.avail_for(&self.allies[agent], &self.enemies, self.cfg.ally.attack_range)
    }

    pub(crate) fn enemy_avail_actions(&self, enemy: usize) -> Vec<bool> {
        self.avail_for(&self.enemies[enemy], &self.allies, self.cfg.enemy.attack_range)
    }

    pub fn get_obs(&self, agent: usize) -> Vec<f64> {
        let cfg = &self.cfg;
        let mut obs = vec![0.0; cfg.obs_dim()];
        let me = &self.allies[agent];
        if !me.alive {
            return obs;
        }
        let sight = cfg.ally.sight_range;
        let others = self
            .allies
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != agent)
            .map(|(_, u)| (u, 1.0))
            .chain(self.enemies.iter().map(|u| (u, -1.0)));
        for (k, (u, team)) in others.enumerate() {
            let d = distance(me.pos, u.pos);
            if u.alive && d <= sight {
                let block = &mut obs[k * OBS_BLOCK..(k + 1) * OBS_BLOCK];
                block[0] = f64::from(u.pos.0 - me.pos.0) / sight;
                block[1] = f64::from(u.pos.1 - me.pos.1) / sight;
                block[2] = d / sight;
                block[3] = u.health_frac();
                block[4] = team;
            }
        }
        let own = OBS_BLOCK * (cfg.n_allies - 1 + cfg.n_enemies);
        obs[own] = me.health_frac();
        if let Some(a) = self.last_actions[agent] {
            obs[own + 1 + a] = 1.0;
        }
        obs
    }

    pub fn get_state(&self) -> Vec<f64> {
        let cfg = &self.cfg;
        let mut s = Vec::with_capacity(cfg.state_dim());
        let wx = (cfg.width - 1).max(1) as f64;
        let wy = (cfg.height - 1).max(1) as f64;
        for u in self.allies.iter().chain(&self.enemies) {
            if u.alive {
                s.extend_from_slice(&[f64::from(u.pos.0) / wx, f64::from(u.pos.1) / wy, u.health_frac(), 1.0]);
            } else {
                s.extend_from_slice(&[0.0; STATE_BLOCK]);
            }
        }
        let n_actions = cfg.n_actions();
        for a in &self.last_actions {
            let mut one_hot = vec![0.0; n_actions];
            if let Some(a) = a {
                one_hot[*a] = 1.0;
            }
            s.extend(one_hot);
        }
        s
    }

    fn result(&self, raw: f64, truncated: bool) -> StepResult {
        StepResult {
            reward: raw * self.cfg.reward_scale(),
            raw_reward: raw,
            terminated: self.terminated,
            truncated,
            won: self.won,
            obs: (0..self.cfg.n_allies).map(|i| self.get_obs(i)).collect(),
            state: self.get_state(),
            avail: (0..self.cfg.n_allies).map(|i| self.get_avail_actions(i)).collect(),
        }
    }

    /// Applies one unit's move; blocked moves do nothing.
    fn apply_move(&mut self, team: Team, idx: usize, action: usize) {
        let pos = match team {
            Team::Ally => self.allies[idx].pos,
            Team::Enemy => self.enemies[idx].pos,
        };
        if self.can_move(pos, action) {
            let (dx, dy) = move_delta(action).expect("move action");
            let to = (pos.0 + dx, pos.1 + dy);
            match team {
                Team::Ally => self.allies[idx].pos = to,
                Team::Enemy => self.enemies[idx].pos = to,
            }
        }
    }

    /// Resolves one attack and returns the health actually removed.
    fn apply_attack(&mut self, team: Team, idx: usize, action: usize) -> f64 {
        let target = action - ACTION_ATTACK_BASE;
        let (damage, victims, victim_team) = match team {
            Team::Ally => (self.cfg.ally.damage, &mut self.enemies, Team::Enemy),
            Team::Enemy => (self.cfg.enemy.damage, &mut self.allies, Team::Ally),
        };
        let victim = &mut victims[target];
        let mut dealt = 0.0;
        let mut death = None;
        if victim.alive {
            dealt = damage.min(victim.health);
            victim.health -= dealt;
            if victim.health <= 0.0 {
                victim.health = 0.0;
                victim.alive = false;
                death = Some(UnitId {
                    team: victim_team,
                    index: target,
                });
            }
        }
        self.events.push(Event {
            step: self.steps,
            actor: UnitId { team, index: idx },
            action,
            target: Some(UnitId {
                team: victim_team,
                index: target,
            }),
            damage: dealt,
            death,
        });
        dealt
    }

    /// Advances one step: ally moves, ally attacks, then the scripted enemy turn.
    pub fn step(&mut self, actions: &[usize]) -> Result<StepResult, EnvError> {
        if self.terminated {
            return Err(EnvError::Terminated);
        }
        if actions.len() != self.cfg.n_allies {
            return Err(EnvError::ActionCount {
                expected: self.cfg.n_allies,
                got: actions.len(),
            });
        }
        for (agent, &a) in actions.iter().enumerate() {
            let mask = self.get_avail_actions(agent);
            if a >= mask.len() || !mask[a] {
                return Err(EnvError::UnavailableAction { agent, action: a });
            }
        }
        let mut raw = 0.0;
        for (i, &a) in actions.iter().enumerate() {
            if move_delta(a).is_some() {
                self.apply_move(Team::Ally, i, a);
            }
        }
        for (i, &a) in actions.iter().enumerate() {
            if a >= ACTION_ATTACK_BASE {
                let alive_before = self.enemies[a - ACTION_ATTACK_BASE].alive;
                raw += self.apply_attack(Team::Ally, i, a);
                if alive_before && !self.enemies[a - ACTION_ATTACK_BASE].alive {
                    raw += KILL_BONUS;
                }
            }
        }
        for (slot, &a) in self.last_actions.iter_mut().zip(actions) {
            *slot = Some(a);
        }

        if self.enemies.iter().all(|e| !e.alive) {
            raw += WIN_BONUS;
            self.won = true;
            self.terminated = true;
            self.steps += 1;
            return Ok(self.result(raw, false));
        }

        let enemy_actions = {
            let mut rng = self.rng.clone();
            let acts = scripted_actions(self.cfg.difficulty, self, &mut rng);
            self.rng = rng;
            acts
        };
        for (e, &a) in enemy_actions.iter().enumerate() {
            if move_delta(a).is_some() {
                self.apply_move(Team::Enemy, e, a);
            }
        }
        for (e, &a) in enemy_actions.iter().enumerate() {
            // an enemy's target may have died to an earlier enemy this step
            if a >= ACTION_ATTACK_BASE && self.enemies[e].alive {
                self.apply_attack(Team::Enemy, e, a);
            }
        }

        self.steps += 1;
        let mut truncated = false;
        if self.allies.iter().all(|u| !u.alive) {
            self.terminated = true;
        } else if self.steps >= self.cfg.episode_limit {
            self.terminated = true;
            truncated = true;
        }
        Ok(self.result(raw, truncated))
    }
}

/// Recomputes an episode's unscaled return from its event log.
pub fn replay_raw_return(events: &[Event], won: bool) -> f64 {
    let mut total = 0.0;
    for e in events.iter().filter(|e| e.actor.team == Team::Ally) {
        total += e.damage;
        if e.death.is_some() {
            total += KILL_BONUS;
        }
    }
    if won {
        total += WIN_BONUS;
    }
    total
}
