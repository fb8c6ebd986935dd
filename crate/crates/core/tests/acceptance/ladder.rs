use crate::Outcome;
use clmarl::env::{distance, move_delta, Battle, BattleConfig, ACTION_ATTACK_BASE, ACTION_NOOP, ACTION_STOP};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const LEVELS: [i32; 4] = [1, 4, 7, 10];
const EPISODES: usize = 500;
/// Chance that an ally ignores the script and plays a random available action.
const BLUNDER: f64 = 0.3;

/// Focus-fire on the weakest enemy in range, otherwise walk toward the
/// nearest living enemy, with occasional random moves.
pub fn mediocre_actions<R: Rng>(battle: &Battle, rng: &mut R) -> Vec<usize> {
    let enemies = battle.enemies();
    battle
        .allies()
        .iter()
        .enumerate()
        .map(|(i, me)| {
            let avail = battle.get_avail_actions(i);
            if !me.alive {
                return ACTION_NOOP;
            }
            if rng.gen_bool(BLUNDER) {
                let opts: Vec<usize> = (0..avail.len()).filter(|&a| avail[a]).collect();
                return opts[rng.gen_range(0..opts.len())];
            }
            let weakest = (0..enemies.len())
                .filter(|&j| avail[ACTION_ATTACK_BASE + j])
                .min_by(|&a, &b| enemies[a].health.total_cmp(&enemies[b].health));
            if let Some(j) = weakest {
                return ACTION_ATTACK_BASE + j;
            }
            let nearest = (0..enemies.len())
                .filter(|&j| enemies[j].alive)
                .min_by(|&a, &b| distance(me.pos, enemies[a].pos).total_cmp(&distance(me.pos, enemies[b].pos)));
            let Some(j) = nearest else { return ACTION_STOP };
            let goal = enemies[j].pos;
            let mut best = ACTION_STOP;
            let mut best_d = distance(me.pos, goal);
            for a in 0..avail.len() {
                if let (true, Some((dx, dy))) = (avail[a], move_delta(a)) {
                    let d = distance((me.pos.0 + dx, me.pos.1 + dy), goal);
                    if d < best_d - 1e-12 {
                        best = a;
                        best_d = d;
                    }
                }
            }
            best
        })
        .collect()
}

fn win_rate(level: i32) -> usize {
    let mut battle = Battle::new(BattleConfig {
        difficulty: level,
        ..BattleConfig::three_v_three()
    })
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6_000 + level as u64);
    let mut wins = 0;
    for ep in 0..EPISODES {
        let mut res = battle.reset(ep as u64);
        while !res.terminated {
            let acts = mediocre_actions(&battle, &mut rng);
            res = battle.step(&acts).unwrap();
        }
        wins += usize::from(res.won);
    }
    wins
}

/// Whether two win counts out of `n` are indistinguishable by a two-sided
/// pooled two-proportion z-test at the 95% level.
pub fn within_interval(a: usize, b: usize, n: usize) -> bool {
    let (pa, pb) = (a as f64 / n as f64, b as f64 / n as f64);
    let pooled = (pa + pb) / 2.0;
    let se = (pooled * (1.0 - pooled) * 2.0 / n as f64).sqrt();
    se == 0.0 || (pa - pb).abs() <= 1.96 * se
}

pub fn audit() -> Outcome {
    let wins: Vec<usize> = LEVELS.iter().map(|&l| win_rate(l)).collect();
    let inversions: Vec<usize> = (0..LEVELS.len() - 1).filter(|&k| wins[k + 1] > wins[k]).collect();
    let tolerated = inversions.len() <= 1 && inversions.iter().all(|&k| within_interval(wins[k], wins[k + 1], EPISODES));
    let rates: Vec<String> = LEVELS
        .iter()
        .zip(&wins)
        .map(|(l, w)| format!("L{l} {:.3}", *w as f64 / EPISODES as f64))
        .collect();
    Outcome::new(
        tolerated,
        format!("win rates {}; inversions at pairs {inversions:?}", rates.join(", ")),
    )
}
