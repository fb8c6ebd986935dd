//! Scripted enemy behaviour for each difficulty level.
//!
//! Levels 1-3 wander and attack random in-range targets some of the time;
//! 4-6 chase and attack the nearest ally with rising probability; 7 focuses
//! the weakest visible ally and always attacks when able; 8-10 keep level 7
//! tactics and add full-map vision (8), +50% health (9), or both (10).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    distance, Battle, ACTION_ATTACK_BASE, ACTION_EAST, ACTION_NORTH, ACTION_NOOP, ACTION_SOUTH,
    ACTION_STOP, ACTION_WEST,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Targeting {
    Random,
    Nearest,
    LowestHealth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Movement {
    RandomWalk,
    Chase,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OpponentProfile {
    pub targeting: Targeting,
    pub movement: Movement,
    pub attack_prob: f64,
    pub full_vision: bool,
    pub health_multiplier: f64,
}

impl OpponentProfile {
    /// Levels outside 1..=10 are clamped.
    pub fn for_level(level: i32) -> Self {
        let level = level.clamp(1, 10);
        let (targeting, movement, attack_prob) = match level {
            1 => (Targeting::Random, Movement::RandomWalk, 0.3),
            2 => (Targeting::Random, Movement::RandomWalk, 0.5),
            3 => (Targeting::Random, Movement::RandomWalk, 0.7),
            4 => (Targeting::Nearest, Movement::Chase, 0.8),
            5 => (Targeting::Nearest, Movement::Chase, 0.9),
            6 => (Targeting::Nearest, Movement::Chase, 1.0),
            _ => (Targeting::LowestHealth, Movement::Chase, 1.0),
        };
        Self {
            targeting,
            movement,
            attack_prob,
            full_vision: level == 8 || level == 10,
            health_multiplier: if level >= 9 { 1.5 } else { 1.0 },
        }
    }
}

/// Picks among candidate ally indices according to `targeting`.
fn pick<R: Rng>(
    targeting: Targeting,
    battle: &Battle,
    from: (i32, i32),
    candidates: &[usize],
    rng: &mut R,
) -> Option<usize> {
    if candidates.is_empty() {
        return None;
    }
    let allies = battle.allies();
    let dist = |j: usize| distance(from, allies[j].pos);
    match targeting {
        Targeting::Random => Some(candidates[rng.gen_range(0..candidates.len())]),
        Targeting::Nearest => candidates
            .iter()
            .copied()
            .min_by(|&a, &b| dist(a).total_cmp(&dist(b)).then(a.cmp(&b))),
        Targeting::LowestHealth => candidates.iter().copied().min_by(|&a, &b| {
            allies[a]
                .health
                .total_cmp(&allies[b].health)
                .then(dist(a).total_cmp(&dist(b)))
                .then(a.cmp(&b))
        }),
    }
}

/// Available move that brings `from` closest to `to`; stop if none helps.
fn step_toward(avail: &[bool], from: (i32, i32), to: (i32, i32)) -> usize {
    let mut best = ACTION_STOP;
    let mut best_d = distance(from, to);
    for a in [ACTION_EAST, ACTION_WEST, ACTION_NORTH, ACTION_SOUTH] {
        if !avail[a] {
            continue;
        }
        let (dx, dy) = super::move_delta(a).expect("move");
        let d = distance((from.0 + dx, from.1 + dy), to);
        if d < best_d - 1e-12 {
            best = a;
            best_d = d;
        }
    }
    best
}

fn random_walk<R: Rng>(avail: &[bool], rng: &mut R) -> usize {
    let options: Vec<usize> = (ACTION_STOP..=ACTION_WEST).filter(|&a| avail[a]).collect();
    options[rng.gen_range(0..options.len())]
}

/// Joint action for the enemy team given the current battle state.
pub fn scripted_actions<R: Rng>(difficulty: i32, battle: &Battle, rng: &mut R) -> Vec<usize> {
    let profile = OpponentProfile::for_level(difficulty);
    let cfg = battle.config();
    let allies = battle.allies();
    battle
        .enemies()
        .iter()
        .enumerate()
        .map(|(e, me)| {
            let avail = battle.enemy_avail_actions(e);
            if !me.alive {
                return ACTION_NOOP;
            }
            let visible: Vec<usize> = (0..allies.len())
                .filter(|&j| {
                    allies[j].alive
                        && (profile.full_vision
                            || distance(me.pos, allies[j].pos) <= cfg.enemy.sight_range)
                })
                .collect();
            let in_range: Vec<usize> = (0..allies.len())
                .filter(|&j| avail[ACTION_ATTACK_BASE + j])
                .collect();
            if !in_range.is_empty() && rng.gen::<f64>() < profile.attack_prob {
                let t = pick(profile.targeting, battle, me.pos, &in_range, rng)
                    .expect("non-empty");
                return ACTION_ATTACK_BASE + t;
            }
            match profile.movement {
                Movement::RandomWalk => random_walk(&avail, rng),
                Movement::Chase => match pick(profile.targeting, battle, me.pos, &visible, rng) {
                    Some(t) => step_toward(&avail, me.pos, allies[t].pos),
                    // nothing in sight: advance toward the allies' side
                    None if avail[ACTION_WEST] => ACTION_WEST,
                    None => ACTION_STOP,
                },
            }
        })
        .collect()
}

/// Target an enemy at `level` would acquire for chasing, if any.
pub fn chase_target(level: i32, battle: &Battle, enemy: usize) -> Option<usize> {
    let profile = OpponentProfile::for_level(level);
    let me = &battle.enemies()[enemy];
    let allies = battle.allies();
    let visible: Vec<usize> = (0..allies.len())
        .filter(|&j| {
            allies[j].alive
                && (profile.full_vision
                    || distance(me.pos, allies[j].pos) <= battle.config().enemy.sight_range)
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    pick(profile.targeting, battle, me.pos, &visible, &mut rng)
}
