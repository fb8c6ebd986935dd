use crate::support::{random_batch, random_mask, rel_err, tiny_learner, Dims};
use crate::Outcome;
use clmarl::cgrpa::{
    counterfactual_advantage, counterfactual_baseline, derive_policy, group_average_policy, kl_divergence,
    plain_td_loss, Learner, LearnerConfig, Nets, PolicyDistribution, KL_FLOOR,
};
use clmarl::nn::{AgentNet, MixRowGrad, MonotonicMixer};
use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Sum of `w * f(u)` over every joint action `u`, where `w` is agent `i`'s
/// policy at `u_i` and zero unless all other agents play their recorded action.
fn enumerated_baseline<F: Fn(&[f64]) -> f64>(
    agent: usize,
    utilities: &[Vec<f64>],
    joint_action: &[usize],
    policy: &[f64],
    f: F,
) -> f64 {
    let n = utilities.len();
    let na = utilities[0].len();
    let mut u = vec![0usize; n];
    let mut total = 0.0;
    loop {
        let others_match = (0..n).all(|j| j == agent || u[j] == joint_action[j]);
        let w = if others_match { policy[u[agent]] } else { 0.0 };
        if w > 0.0 {
            let q: Vec<f64> = (0..n).map(|j| utilities[j][u[j]]).collect();
            total += w * f(&q);
        }
        let mut k = 0;
        while k < n {
            u[k] += 1;
            if u[k] < na {
                break;
            }
            u[k] = 0;
            k += 1;
        }
        if k == n {
            return total;
        }
    }
}

fn softmax_oracle(q: &[f64], mask: &[bool], temperature: f64) -> Vec<f64> {
    let max = q.iter().zip(mask).filter(|(_, &m)| m).map(|(&v, _)| v).fold(f64::MIN, f64::max);
    let e: Vec<f64> = q
        .iter()
        .zip(mask)
        .map(|(&v, &m)| if m { ((v - max) / temperature).exp() } else { 0.0 })
        .collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

fn kl_oracle(p: &[f64], q: &[f64]) -> f64 {
    let mut total = 0.0;
    for (&pa, &qa) in p.iter().zip(q) {
        if pa > 0.0 {
            total += pa * (pa / qa.max(KL_FLOOR)).ln();
        }
    }
    total
}

fn mean_rows(rows: &[Vec<f64>]) -> Vec<f64> {
    let na = rows[0].len();
    (0..na).map(|a| rows.iter().map(|r| r[a]).sum::<f64>() / rows.len() as f64).collect()
}

fn random_mixer<R: Rng>(rng: &mut R, state_dim: usize, n: usize, embed: usize) -> MonotonicMixer {
    let mut mixer = MonotonicMixer::new(state_dim, n, embed, rng);
    let scale = rng.gen_range(0.5..3.0);
    mixer.params.iter_mut().for_each(|p| *p *= scale);
    mixer
}

pub fn counterfactual_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_baseline: f64 = 0.0;
    let mut worst_kl: f64 = 0.0;
    let mut identity_failures = 0;
    let mut checked = 0;
    for _ in 0..500 {
        let n = rng.gen_range(2..=4);
        let na = rng.gen_range(3..=6);
        let state_dim = rng.gen_range(2..=5);
        let embed = rng.gen_range(2..=6);
        let mixer = random_mixer(&mut rng, state_dim, n, embed);
        let state: Vec<f64> = (0..state_dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let f = |q: &[f64]| mixer.forward(q, &state).unwrap();
        let temperature = rng.gen_range(0.2..3.0);
        let alpha = rng.gen_range(0.0..2.0);
        let utilities: Vec<Vec<f64>> = (0..n).map(|_| (0..na).map(|_| rng.gen_range(-5.0..5.0)).collect()).collect();
        let masks: Vec<Vec<bool>> = (0..n).map(|_| random_mask(&mut rng, na)).collect();
        let policies: Vec<PolicyDistribution> = (0..n)
            .map(|i| derive_policy(&utilities[i], &masks[i], temperature).unwrap())
            .collect();
        let joint: Vec<usize> = masks
            .iter()
            .map(|m| {
                let opts: Vec<usize> = (0..na).filter(|&a| m[a]).collect();
                opts[rng.gen_range(0..opts.len())]
            })
            .collect();
        let pibar = group_average_policy(&policies).unwrap();
        let oracle_pis: Vec<Vec<f64>> = (0..n).map(|i| softmax_oracle(&utilities[i], &masks[i], temperature)).collect();
        let oracle_bar = mean_rows(&oracle_pis);
        let chosen: Vec<f64> = (0..n).map(|i| utilities[i][joint[i]]).collect();
        let joint_q = f(&chosen);
        for i in 0..n {
            let baseline = counterfactual_baseline(i, &utilities, &joint, &policies[i], f);
            let oracle = enumerated_baseline(i, &utilities, &joint, &oracle_pis[i], f);
            worst_baseline = worst_baseline.max((baseline - oracle).abs());
            let kl = kl_divergence(&policies[i], &pibar);
            worst_kl = worst_kl.max((kl - kl_oracle(&oracle_pis[i], &oracle_bar)).abs());
            let adv = counterfactual_advantage(i, joint_q, baseline, kl, alpha);
            let identity = adv.value.to_bits() == (adv.joint_q - adv.baseline - alpha * adv.kl_penalty).to_bits()
                && adv.joint_q.to_bits() == joint_q.to_bits()
                && adv.baseline.to_bits() == baseline.to_bits()
                && adv.kl_penalty.to_bits() == kl.to_bits()
                && adv.agent == i;
            if !identity {
                identity_failures += 1;
            }
            checked += 1;
        }
    }
    let (learner_checked, worst_learner) = learner_advantages(&mut rng);
    let pass = worst_baseline <= 1e-10 && worst_kl <= 1e-10 && identity_failures == 0 && worst_learner <= 1e-10;
    Outcome::new(
        pass,
        format!(
            "{checked} agent baselines, max |err| {worst_baseline:.1e}; kl max |err| {worst_kl:.1e}; \
             identity failures {identity_failures}; learner advantages {learner_checked} checked, max |err| {worst_learner:.1e}"
        ),
    )
}

/// Advantages reported by the learner against the same brute-force oracle,
/// with utilities and mixer values recomputed from the networks.
fn learner_advantages(rng: &mut ChaCha8Rng) -> (usize, f64) {
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for trial in 0..40 {
        let dims = Dims::random(rng);
        let cfg = LearnerConfig {
            alpha: rng.gen_range(0.0..1.0),
            lambda: rng.gen_range(0.0..1.0),
            policy_temperature: rng.gen_range(0.5..2.0),
            ..tiny_learner(rng)
        };
        let learner = Learner::new(cfg.clone(), dims.obs, dims.state, dims.agents, dims.actions, trial).unwrap();
        let batch = random_batch(rng, dims, 3, 4);
        let out = learner.compute(&batch).unwrap();
        let n = dims.agents;
        let nets = learner.online();
        let h0 = nets.agent.zero_hidden(batch.batch * n);
        let (q_out, _) = nets.agent.forward(&batch.inputs, h0.view()).unwrap();
        for t in 0..batch.max_len {
            for b in 0..batch.batch {
                let r = t * batch.batch + b;
                if !batch.filled[r] {
                    continue;
                }
                let state: Vec<f64> = batch.states.row(r).to_vec();
                let f = |q: &[f64]| nets.mixer.forward(q, &state).unwrap();
                let utilities: Vec<Vec<f64>> = (0..n).map(|i| q_out[t].row(b * n + i).to_vec()).collect();
                let pis: Vec<Vec<f64>> = (0..n)
                    .map(|i| softmax_oracle(&utilities[i], batch.avail_row(t, b, i), cfg.policy_temperature))
                    .collect();
                let bar = mean_rows(&pis);
                let joint = batch.actions_row(t, b);
                let chosen: Vec<f64> = (0..n).map(|i| utilities[i][joint[i]]).collect();
                let joint_q = f(&chosen);
                for i in 0..n {
                    let expected = joint_q
                        - enumerated_baseline(i, &utilities, joint, &pis[i], f)
                        - cfg.alpha * kl_oracle(&pis[i], &bar);
                    worst = worst.max((out.advantages[r * n + i] - expected).abs());
                    checked += 1;
                }
            }
        }
    }
    (checked, worst)
}

const FD_STEP: f64 = 1e-5;

fn central<F: FnMut(f64) -> f64>(base: f64, mut f: F) -> f64 {
    (f(base + FD_STEP) - f(base - FD_STEP)) / (2.0 * FD_STEP)
}

/// Worst relative error of `analytic` against central differences of `loss`
/// over every entry of `params`.
fn fd_worst<F: FnMut(&[f64]) -> f64>(params: &[f64], analytic: &[f64], mut loss: F) -> f64 {
    let mut p = params.to_vec();
    let mut worst: f64 = 0.0;
    for k in 0..p.len() {
        let base = p[k];
        let fd = central(base, |v| {
            p[k] = v;
            loss(&p)
        });
        p[k] = base;
        worst = worst.max(rel_err(analytic[k], fd));
    }
    worst
}

fn agent_fd(rng: &mut ChaCha8Rng) -> f64 {
    let input = rng.gen_range(2..=6);
    let hidden = rng.gen_range(2..=6);
    let na = rng.gen_range(3..=6);
    let rows = rng.gen_range(1..=4);
    let steps = rng.gen_range(1..=5);
    let net = AgentNet::new(input, hidden, na, rng);
    let inputs: Vec<Array2<f64>> = (0..steps)
        .map(|_| Array2::from_shape_fn((rows, input), |_| rng.gen_range(-1.5..1.5)))
        .collect();
    let h0 = Array2::from_shape_fn((rows, hidden), |_| rng.gen_range(-0.5..0.5));
    let coef: Vec<Array2<f64>> = (0..steps)
        .map(|_| Array2::from_shape_fn((rows, na), |_| rng.gen_range(-1.0..1.0)))
        .collect();
    let (_, cache) = net.forward_cached(&inputs, h0.view()).unwrap();
    let analytic = net.backward(&cache, &coef);
    let mut probe = net.clone();
    fd_worst(&net.params, &analytic, |p| {
        probe.params.copy_from_slice(p);
        let (out, _) = probe.forward(&inputs, h0.view()).unwrap();
        out.iter().zip(&coef).map(|(o, c)| (o * c).sum()).sum()
    })
}

/// Mixer parameter gradients and `dQ_tot/dq` for a random weighted sum of
/// mixed values over several states.
fn mixer_fd(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let n = rng.gen_range(2..=4);
    let embed = rng.gen_range(2..=6);
    let sd = rng.gen_range(2..=5);
    let rows = rng.gen_range(1..=5);
    let mixer = random_mixer(rng, sd, n, embed);
    let states = Array2::from_shape_fn((rows, sd), |_| rng.gen_range(-2.0..2.0));
    let qs: Vec<Vec<f64>> = (0..rows).map(|_| (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect()).collect();
    let coef: Vec<f64> = (0..rows).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let hyper = mixer.hyper(states.view()).unwrap();
    let mut grad_q = vec![vec![0.0; n]; rows];
    let mut acc = vec![MixRowGrad::zeros(n, embed); rows];
    for r in 0..rows {
        hyper.point(r).backward(&qs[r], coef[r], &mut grad_q[r], &mut acc[r]);
    }
    let analytic = mixer.backward(states.view(), &hyper, &acc);
    let total = |m: &MonotonicMixer, states: ArrayView2<f64>, qs: &[Vec<f64>]| -> f64 {
        let h = m.hyper(states).unwrap();
        (0..qs.len()).map(|r| coef[r] * h.point(r).value(&qs[r])).sum()
    };
    let mut probe = mixer.clone();
    let params_err = fd_worst(&mixer.params, &analytic, |p| {
        probe.params.copy_from_slice(p);
        total(&probe, states.view(), &qs)
    });
    let flat_q: Vec<f64> = qs.concat();
    let flat_grad: Vec<f64> = grad_q.concat();
    let q_err = fd_worst(&flat_q, &flat_grad, |q| {
        let qs: Vec<Vec<f64>> = q.chunks(n).map(|c| c.to_vec()).collect();
        total(&mixer, states.view(), &qs)
    });
    (params_err, q_err)
}

/// Combined learner loss with random coefficients and the policy term on or off.
fn learner_fd(rng: &mut ChaCha8Rng, seed: u64) -> f64 {
    let dims = Dims::random(rng);
    let cfg = LearnerConfig {
        lambda: rng.gen_range(0.0..1.0),
        alpha: rng.gen_range(0.0..1.0),
        beta: rng.gen_range(0.0..1.0),
        policy_term: rng.gen_bool(0.7),
        policy_coef: rng.gen_range(0.0..1.5),
        gamma: rng.gen_range(0.5..0.99),
        policy_temperature: rng.gen_range(0.5..2.0),
        ..tiny_learner(rng)
    };
    let mut learner = Learner::new(cfg, dims.obs, dims.state, dims.agents, dims.actions, seed).unwrap();
    let other = Nets::new(dims.obs, dims.state, dims.agents, dims.actions, learner.config(), seed + 1000);
    learner.online_mut().sync_from(&other).unwrap();
    let episodes = rng.gen_range(1..=3);
    let batch = random_batch(rng, dims, episodes, 4);
    let out = learner.compute(&batch).unwrap();
    let mut nets = learner.online().clone();
    let agent_len = nets.agent.params.len();
    let params: Vec<f64> = [nets.agent.params.clone(), nets.mixer.params.clone()].concat();
    let analytic: Vec<f64> = [out.agent_grad.clone(), out.mixer_grad.clone()].concat();
    fd_worst(&params, &analytic, |p| {
        nets.agent.params.copy_from_slice(&p[..agent_len]);
        nets.mixer.params.copy_from_slice(&p[agent_len..]);
        learner.loss_with(&nets, &batch, &out.targets, &out.advantages).unwrap()
    })
}

/// Smallest `dQ_tot/dq_i` over random states and utilities.
fn min_mixing_slope(rng: &mut ChaCha8Rng, mixer: &MonotonicMixer, draws: usize) -> f64 {
    let (n, sd) = (mixer.n_agents(), mixer.state_dim());
    let mut lowest = f64::INFINITY;
    for _ in 0..draws {
        let state: Vec<f64> = (0..sd).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let q: Vec<f64> = (0..n).map(|_| rng.gen_range(-20.0..20.0)).collect();
        let hyper = mixer.hyper(ArrayView2::from_shape((1, sd), &state).unwrap()).unwrap();
        let mut grad_q = vec![0.0; n];
        let mut acc = MixRowGrad::zeros(n, mixer.embed());
        hyper.point(0).backward(&q, 1.0, &mut grad_q, &mut acc);
        lowest = grad_q.iter().copied().fold(lowest, f64::min);
    }
    lowest
}

/// Mixers after a few hundred optimizer steps on random batches.
fn trained_mixers(rng: &mut ChaCha8Rng) -> Vec<MonotonicMixer> {
    (0..5)
        .map(|seed| {
            let dims = Dims::random(rng);
            let cfg = LearnerConfig {
                learning_rate: 0.01,
                target_update_interval: 20,
                ..tiny_learner(rng)
            };
            let mut learner = Learner::new(cfg, dims.obs, dims.state, dims.agents, dims.actions, 50 + seed).unwrap();
            for _ in 0..200 {
                let batch = random_batch(rng, dims, 4, 5);
                learner.learner_step(&batch).unwrap();
            }
            learner.online().mixer.clone()
        })
        .collect()
}

pub fn gradients_and_monotonicity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut agent: f64 = 0.0;
    let mut mixer_params: f64 = 0.0;
    let mut mixer_q: f64 = 0.0;
    let mut learner: f64 = 0.0;
    for k in 0..100 {
        agent = agent.max(agent_fd(&mut rng));
        let (p, q) = mixer_fd(&mut rng);
        mixer_params = mixer_params.max(p);
        mixer_q = mixer_q.max(q);
        learner = learner.max(learner_fd(&mut rng, k));
    }
    let mut lowest = f64::INFINITY;
    for _ in 0..10 {
        let (n, sd, e) = (rng.gen_range(2..=6), rng.gen_range(2..=8), rng.gen_range(2..=8));
        let m = random_mixer(&mut rng, sd, n, e);
        lowest = lowest.min(min_mixing_slope(&mut rng, &m, 50));
    }
    for m in trained_mixers(&mut rng) {
        lowest = lowest.min(min_mixing_slope(&mut rng, &m, 100));
    }
    let worst = agent.max(mixer_params).max(mixer_q).max(learner);
    Outcome::new(
        worst < 1e-4 && lowest >= -1e-8,
        format!(
            "max rel err: agent {agent:.1e}, mixer params {mixer_params:.1e}, mixer dq {mixer_q:.1e}, \
             learner loss {learner:.1e}; min dQtot/dq over 1000 draws {lowest:.2e}"
        ),
    )
}

pub fn plain_reduction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mismatches = Vec::new();
    for trial in 0..100u64 {
        let dims = Dims::random(&mut rng);
        let cfg = LearnerConfig {
            lambda: 0.0,
            beta: 0.0,
            policy_term: false,
            alpha: rng.gen_range(0.0..2.0),
            gamma: rng.gen_range(0.5..0.99),
            ..tiny_learner(&mut rng)
        };
        let mut learner = Learner::new(cfg, dims.obs, dims.state, dims.agents, dims.actions, trial).unwrap();
        let other = Nets::new(dims.obs, dims.state, dims.agents, dims.actions, learner.config(), trial + 500);
        learner.online_mut().sync_from(&other).unwrap();
        let episodes = rng.gen_range(1..=6);
        let batch = random_batch(&mut rng, dims, episodes, 6);
        let ours = learner.compute(&batch).unwrap();
        let plain = plain_td_loss(learner.online(), learner.target(), &batch, learner.config().gamma).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        let same = bits(&ours.targets) == bits(&plain.targets)
            && ours.report.td_loss.to_bits() == plain.td_loss.to_bits()
            && ours.report.total_loss.to_bits() == plain.td_loss.to_bits()
            && bits(&ours.agent_grad) == bits(&plain.agent_grad)
            && bits(&ours.mixer_grad) == bits(&plain.mixer_grad);
        let nets_differ = learner.online().agent.params != learner.target().agent.params;
        if !same || !nets_differ {
            mismatches.push(trial);
        }
    }
    Outcome::new(
        mismatches.is_empty(),
        format!("100 batches, bit-identical targets/loss/grads; mismatches {mismatches:?}"),
    )
}
