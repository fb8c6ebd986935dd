use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{s, Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{kl, masked_softmax, mean_policy, CgrpaError, EpisodeBatch, LearnerConfig, KL_FLOOR};
use crate::nn::checkpoint::{self, CheckpointError};
use crate::nn::{clip_gradients, global_norm, sync_params, Adam, AdamConfig, AgentNet, MixPoint, MixRowGrad, MonotonicMixer};

/// An agent network shared by all agents plus the mixer.
#[derive(Debug, Clone, PartialEq)]
pub struct Nets {
    pub agent: AgentNet,
    pub mixer: MonotonicMixer,
}

impl Nets {
    pub fn new(obs_dim: usize, state_dim: usize, n_agents: usize, n_actions: usize, cfg: &LearnerConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let agent = AgentNet::new(obs_dim + n_agents, cfg.rnn_hidden, n_actions, &mut rng);
        let mixer = MonotonicMixer::new(state_dim, n_agents, cfg.mixer_embed, &mut rng);
        Self { agent, mixer }
    }

    pub fn n_agents(&self) -> usize {
        self.mixer.n_agents()
    }

    pub fn n_actions(&self) -> usize {
        self.agent.n_actions()
    }

    /// Hard copy of `other`'s parameters.
    pub fn sync_from(&mut self, other: &Nets) -> Result<(), CgrpaError> {
        let layout = self.agent.layout().clone();
        sync_params(other.agent.layout(), &other.agent.params, &layout, &mut self.agent.params)?;
        let layout = self.mixer.layout().clone();
        sync_params(other.mixer.layout(), &other.mixer.params, &layout, &mut self.mixer.params)?;
        Ok(())
    }
}

/// Loss components of one learner step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub td_loss: f64,
    /// Mean over steps of the summed per-agent KL, before the `beta` weight.
    pub kl_loss: f64,
    pub policy_loss: f64,
    pub total_loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub mean_advantage: f64,
}

/// Loss, gradients and TD targets for one batch, before any update.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub report: LossReport,
    pub agent_grad: Vec<f64>,
    pub mixer_grad: Vec<f64>,
    /// One target per `t * batch + b`; zero on padding.
    pub targets: Vec<f64>,
    /// Per-agent advantages, `(t * batch + b) * n_agents + i`; zero on padding.
    pub advantages: Vec<f64>,
}

/// Everything the advantage computation produces for one (episode, step).
#[derive(Debug, Clone)]
pub(crate) struct SampleTerms {
    /// Flattened `n_agents x n_actions` policies.
    pub pi: Vec<f64>,
    pub pibar: Vec<f64>,
    pub kl: Vec<f64>,
    /// Chosen-action utilities.
    pub q: Vec<f64>,
    /// Mixer value with agent `i`'s entry replaced by `Q_i(a)`; zero where `pi_i(a) = 0`.
    pub cf_values: Vec<f64>,
    pub adv: Vec<f64>,
    pub q_tilde: Vec<f64>,
    pub q_tot: f64,
}

/// Policies, counterfactual advantages and the mixed value for one step.
/// `utilities` and `avail` are `n_agents x n_actions` row-major.
pub(crate) fn sample_terms<F: Fn(&[f64]) -> f64>(
    utilities: &[f64],
    avail: &[bool],
    actions: &[usize],
    n_actions: usize,
    cfg: &LearnerConfig,
    joint_value: F,
) -> Result<SampleTerms, CgrpaError> {
    let n = actions.len();
    let mut pi = vec![0.0; n * n_actions];
    for i in 0..n {
        let r = i * n_actions..(i + 1) * n_actions;
        masked_softmax(&utilities[r.clone()], &avail[r.clone()], cfg.policy_temperature, &mut pi[r])
            .ok_or(CgrpaError::NoAvailableAction)?;
    }
    let rows: Vec<&[f64]> = pi.chunks(n_actions).collect();
    let mut pibar = vec![0.0; n_actions];
    mean_policy(&rows, &mut pibar);
    let kls: Vec<f64> = rows.iter().map(|p| kl(p, &pibar)).collect();
    let q: Vec<f64> = actions
        .iter()
        .enumerate()
        .map(|(i, &a)| utilities[i * n_actions + a])
        .collect();
    let joint = joint_value(&q);
    let mut cf_values = vec![0.0; n * n_actions];
    let mut baseline = vec![0.0; n];
    let mut scratch = q.clone();
    for i in 0..n {
        let mut total = 0.0;
        for a in 0..n_actions {
            let p = pi[i * n_actions + a];
            if p > 0.0 {
                scratch[i] = utilities[i * n_actions + a];
                let v = joint_value(&scratch);
                cf_values[i * n_actions + a] = v;
                total += p * v;
            }
        }
        scratch[i] = q[i];
        baseline[i] = total;
    }
    let adv: Vec<f64> = (0..n).map(|i| joint - baseline[i] - cfg.alpha * kls[i]).collect();
    let q_tilde: Vec<f64> = (0..n).map(|i| q[i] + cfg.lambda * adv[i]).collect();
    let q_tot = joint_value(&q_tilde);
    Ok(SampleTerms {
        pi,
        pibar,
        kl: kls,
        q,
        cf_values,
        adv,
        q_tilde,
        q_tot,
    })
}

/// Agent-wise greedy action over available entries (lowest index on ties).
pub(crate) fn greedy(utilities: &[f64], avail: &[bool], n_actions: usize) -> Vec<usize> {
    utilities
        .chunks(n_actions)
        .zip(avail.chunks(n_actions))
        .map(|(q, m)| {
            let mut best = None;
            for a in 0..n_actions {
                if m[a] && best.is_none_or(|b: usize| q[a] > q[b]) {
                    best = Some(a);
                }
            }
            best.unwrap_or(0)
        })
        .collect()
}

/// Bootstrapped target for one transition from next-step target utilities.
///
/// The next joint action is the agent-wise greedy choice; the mixer value is
/// taken on utilities augmented with their own counterfactual advantages.
pub fn td_target<F: Fn(&[f64]) -> f64>(
    next_utilities: &[Vec<f64>],
    next_avail: &[Vec<bool>],
    reward: f64,
    terminal: bool,
    cfg: &LearnerConfig,
    target_value: F,
) -> Result<f64, CgrpaError> {
    if terminal {
        return Ok(reward);
    }
    let n_actions = next_utilities.first().map_or(0, |u| u.len());
    let flat_q: Vec<f64> = next_utilities.concat();
    let flat_m: Vec<bool> = next_avail.concat();
    if flat_q.len() != flat_m.len() {
        return Err(CgrpaError::Batch("utilities and masks differ in shape".into()));
    }
    let next_actions = greedy(&flat_q, &flat_m, n_actions);
    let terms = sample_terms(&flat_q, &flat_m, &next_actions, n_actions, cfg, target_value)?;
    Ok(reward + cfg.gamma * terms.q_tot)
}

/// Gradients of the per-step scalar objectives with respect to the agent
/// utilities (`grad_q`, `n_agents x n_actions`) and the mixer row (`acc`).
struct Upstream<'a> {
    /// dL/dQ_tot.
    q_tot: f64,
    /// Weight on each agent's KL term in the loss.
    kl: f64,
    /// Weight on each agent's `log pi_i(u_i)` in the loss (zero when off).
    logp: &'a [f64],
}

fn sample_backward(
    terms: &SampleTerms,
    utilities: &[f64],
    actions: &[usize],
    n_actions: usize,
    cfg: &LearnerConfig,
    point: &MixPoint<'_>,
    up: &Upstream<'_>,
    grad_q: &mut [f64],
    acc: &mut MixRowGrad,
) {
    let n = actions.len();
    let temp = cfg.policy_temperature;
    let mut g_qt = vec![0.0; n];
    point.backward(&terms.q_tilde, up.q_tot, &mut g_qt, acc);
    let mut g_q = g_qt.clone();
    let g_adv: Vec<f64> = g_qt.iter().map(|g| cfg.lambda * g).collect();
    let mut g_pi = vec![0.0; n * n_actions];

    let g_joint: f64 = g_adv.iter().sum();
    if g_joint != 0.0 {
        point.backward(&terms.q, g_joint, &mut g_q, acc);
    }

    let mut scratch = terms.q.clone();
    let mut g_cf = vec![0.0; n];
    for j in 0..n {
        let g_base = -g_adv[j];
        if g_base == 0.0 {
            continue;
        }
        for a in 0..n_actions {
            let k = j * n_actions + a;
            let p = terms.pi[k];
            if p <= 0.0 {
                continue;
            }
            g_pi[k] += g_base * terms.cf_values[k];
            scratch[j] = utilities[k];
            g_cf.iter_mut().for_each(|g| *g = 0.0);
            point.backward(&scratch, g_base * p, &mut g_cf, acc);
            grad_q[k] += g_cf[j];
            for (m, g) in g_cf.iter().enumerate() {
                if m != j {
                    g_q[m] += g;
                }
            }
        }
        scratch[j] = terms.q[j];
    }

    let g_kl: Vec<f64> = (0..n).map(|j| -cfg.alpha * g_adv[j] + up.kl).collect();
    if g_kl.iter().any(|&g| g != 0.0) {
        let nf = n as f64;
        for a in 0..n_actions {
            let bar = terms.pibar[a];
            let through_bar = bar > KL_FLOOR;
            let mut spread = 0.0;
            for i in 0..n {
                let p = terms.pi[i * n_actions + a];
                if p > 0.0 {
                    g_pi[i * n_actions + a] += g_kl[i] * (p.ln() - bar.max(KL_FLOOR).ln() + 1.0);
                    if through_bar {
                        spread += g_kl[i] * p / (nf * bar);
                    }
                }
            }
            if spread != 0.0 {
                for k in 0..n {
                    g_pi[k * n_actions + a] -= spread;
                }
            }
        }
    }

    for j in 0..n {
        let r = j * n_actions..(j + 1) * n_actions;
        let pi = &terms.pi[r.clone()];
        let gp = &g_pi[r.clone()];
        let dot: f64 = pi.iter().zip(gp).map(|(p, g)| p * g).sum();
        let w = up.logp.get(j).copied().unwrap_or(0.0);
        for a in 0..n_actions {
            let mut d = pi[a] * (gp[a] - dot);
            if w != 0.0 {
                let onehot = if a == actions[j] { 1.0 } else { 0.0 };
                d += w * (onehot - pi[a]);
            }
            if d != 0.0 {
                grad_q[j * n_actions + a] += d / temp;
            }
        }
        grad_q[j * n_actions + actions[j]] += g_q[j];
    }
}

fn log_prob(utilities: &[f64], avail: &[bool], action: usize, temperature: f64) -> f64 {
    let max = utilities
        .iter()
        .zip(avail)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let lse: f64 = utilities
        .iter()
        .zip(avail)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| ((v - max) / temperature).exp())
        .sum::<f64>()
        .ln();
    (utilities[action] - max) / temperature - lse
}

/// Online utilities for one step: `n_agents x n_actions` from the agent-net
/// output rows of episode `b`.
fn step_utilities(out: &Array2<f64>, b: usize, n: usize) -> Vec<f64> {
    out.slice(s![b * n..(b + 1) * n, ..]).iter().copied().collect()
}

fn step_avail(batch: &EpisodeBatch, t: usize, b: usize) -> &[bool] {
    let n = batch.n_agents * batch.n_actions;
    let k = (t * batch.batch + b) * n;
    &batch.avail[k..k + n]
}

/// Targets for every step, computed with the given (target) networks.
pub(crate) fn batch_targets(nets: &Nets, batch: &EpisodeBatch, cfg: &LearnerConfig) -> Result<Vec<f64>, CgrpaError> {
    let (bsz, n, na, tmax) = (batch.batch, batch.n_agents, batch.n_actions, batch.max_len);
    let h0 = nets.agent.zero_hidden(bsz * n);
    let (out, _) = nets.agent.forward(&batch.inputs, h0.view())?;
    let next_states: ArrayView2<f64> = batch.states.slice(s![bsz..(tmax + 1) * bsz, ..]);
    let hyper = nets.mixer.hyper(next_states)?;
    let mut targets = vec![0.0; tmax * bsz];
    for t in 0..tmax {
        for b in 0..bsz {
            let r = t * bsz + b;
            if !batch.filled[r] {
                continue;
            }
            if batch.terminal[r] {
                targets[r] = batch.rewards[r];
                continue;
            }
            let q = step_utilities(&out[t + 1], b, n);
            let m = step_avail(batch, t + 1, b);
            let next_actions = greedy(&q, m, na);
            let point = hyper.point(r);
            let terms = sample_terms(&q, m, &next_actions, na, cfg, |x| point.value(x))?;
            targets[r] = batch.rewards[r] + cfg.gamma * terms.q_tot;
        }
    }
    Ok(targets)
}

/// Loss and gradients of `nets` on `batch` against fixed `targets`. With
/// `frozen_adv`, the policy term is weighted by those advantages instead of
/// the ones computed here (they are equal unless the weights were perturbed).
pub(crate) fn loss_and_grad(
    nets: &Nets,
    batch: &EpisodeBatch,
    targets: &[f64],
    cfg: &LearnerConfig,
    frozen_adv: Option<&[f64]>,
    with_grad: bool,
) -> Result<StepOutput, CgrpaError> {
    let (bsz, n, na, tmax) = (batch.batch, batch.n_agents, batch.n_actions, batch.max_len);
    let h0 = nets.agent.zero_hidden(bsz * n);
    let (out, cache) = nets.agent.forward_cached(&batch.inputs[..tmax], h0.view())?;
    let states = batch.states.slice(s![0..tmax * bsz, ..]);
    let hyper = nets.mixer.hyper(states)?;
    let m = batch.n_filled();
    if m == 0 {
        return Err(CgrpaError::Batch("batch has no filled steps".into()));
    }
    let mf = m as f64;
    let mut advantages = vec![0.0; tmax * bsz * n];
    let mut all_terms: Vec<Option<SampleTerms>> = Vec::with_capacity(tmax * bsz);
    let (mut td, mut kl_sum, mut pol, mut adv_sum) = (0.0, 0.0, 0.0, 0.0);
    let mut logp_w = vec![0.0; tmax * bsz * n];
    for t in 0..tmax {
        for b in 0..bsz {
            let r = t * bsz + b;
            if !batch.filled[r] {
                all_terms.push(None);
                continue;
            }
            let q = step_utilities(&out[t], b, n);
            let mask = step_avail(batch, t, b);
            let acts = batch.actions_row(t, b);
            let point = hyper.point(r);
            let terms = sample_terms(&q, mask, acts, na, cfg, |x| point.value(x))?;
            let d = terms.q_tot - targets[r];
            td += d * d;
            for i in 0..n {
                let a = terms.adv[i];
                advantages[r * n + i] = a;
                adv_sum += a;
                kl_sum += terms.kl[i];
                if cfg.policy_term {
                    let weight = cfg.policy_coef * frozen_adv.map_or(a, |f| f[r * n + i]);
                    let lp = log_prob(&q[i * na..(i + 1) * na], &mask[i * na..(i + 1) * na], acts[i], cfg.policy_temperature);
                    pol += -weight * lp;
                    logp_w[r * n + i] = -weight / mf;
                }
            }
            all_terms.push(Some(terms));
        }
    }
    let td_loss = td / mf;
    let kl_loss = kl_sum / mf;
    let policy_loss = pol / mf;
    let total_loss = td_loss + cfg.beta * kl_loss + if cfg.policy_term { policy_loss } else { 0.0 };
    let mut report = LossReport {
        td_loss,
        kl_loss,
        policy_loss,
        total_loss,
        grad_norm: 0.0,
        mean_advantage: adv_sum / (mf * n as f64),
    };
    if !with_grad {
        return Ok(StepOutput {
            report,
            agent_grad: Vec::new(),
            mixer_grad: Vec::new(),
            targets: targets.to_vec(),
            advantages,
        });
    }

    let embed = nets.mixer.embed();
    let mut grad_out: Vec<Array2<f64>> = (0..tmax).map(|_| Array2::zeros((bsz * n, na))).collect();
    let mut row_grads = vec![MixRowGrad::zeros(n, embed); tmax * bsz];
    let kl_w = cfg.beta / mf;
    let mut gq = vec![0.0; n * na];
    for t in 0..tmax {
        for b in 0..bsz {
            let r = t * bsz + b;
            let Some(terms) = &all_terms[r] else { continue };
            let q = step_utilities(&out[t], b, n);
            let acts = batch.actions_row(t, b);
            let point = hyper.point(r);
            let up = Upstream {
                q_tot: 2.0 * (terms.q_tot - targets[r]) / mf,
                kl: kl_w,
                logp: &logp_w[r * n..(r + 1) * n],
            };
            gq.iter_mut().for_each(|g| *g = 0.0);
            sample_backward(terms, &q, acts, na, cfg, &point, &up, &mut gq, &mut row_grads[r]);
            let mut rows = grad_out[t].slice_mut(s![b * n..(b + 1) * n, ..]);
            for (dst, &g) in rows.iter_mut().zip(&gq) {
                *dst = g;
            }
        }
    }
    let agent_grad = nets.agent.backward(&cache, &grad_out);
    let mixer_grad = nets.mixer.backward(states, &hyper, &row_grads);
    report.grad_norm = global_norm(&[&agent_grad, &mixer_grad]);
    Ok(StepOutput {
        report,
        agent_grad,
        mixer_grad,
        targets: targets.to_vec(),
        advantages,
    })
}

/// Online and target networks with their optimizers.
#[derive(Debug, Clone)]
pub struct Learner {
    cfg: LearnerConfig,
    online: Nets,
    target: Nets,
    agent_opt: Adam,
    mixer_opt: Adam,
    grad_steps: u64,
}

impl Learner {
    pub fn new(
        cfg: LearnerConfig,
        obs_dim: usize,
        state_dim: usize,
        n_agents: usize,
        n_actions: usize,
        seed: u64,
    ) -> Result<Self, CgrpaError> {
        cfg.validate()?;
        let online = Nets::new(obs_dim, state_dim, n_agents, n_actions, &cfg, seed);
        Ok(Self::from_nets(cfg, online))
    }

    pub fn from_nets(cfg: LearnerConfig, online: Nets) -> Self {
        let adam = AdamConfig {
            lr: cfg.learning_rate,
            ..AdamConfig::default()
        };
        Self {
            agent_opt: Adam::new(online.agent.params.len(), adam),
            mixer_opt: Adam::new(online.mixer.params.len(), adam),
            target: online.clone(),
            online,
            cfg,
            grad_steps: 0,
        }
    }

    pub fn config(&self) -> &LearnerConfig {
        &self.cfg
    }

    pub fn online(&self) -> &Nets {
        &self.online
    }

    pub fn target(&self) -> &Nets {
        &self.target
    }

    pub fn online_mut(&mut self) -> &mut Nets {
        &mut self.online
    }

    pub fn grad_steps(&self) -> u64 {
        self.grad_steps
    }

    pub fn sync_targets(&mut self) -> Result<(), CgrpaError> {
        self.target.sync_from(&self.online)
    }

    /// TD targets for every step of `batch` from the target networks.
    pub fn td_targets(&self, batch: &EpisodeBatch) -> Result<Vec<f64>, CgrpaError> {
        batch_targets(&self.target, batch, &self.cfg)
    }

    /// Loss and gradients without touching any parameters.
    pub fn compute(&self, batch: &EpisodeBatch) -> Result<StepOutput, CgrpaError> {
        let targets = self.td_targets(batch)?;
        loss_and_grad(&self.online, batch, &targets, &self.cfg, None, true)
    }

    /// Total loss of `nets` on `batch` against this learner's targets, with
    /// the policy-term weights held at `frozen_adv`.
    pub fn loss_with(&self, nets: &Nets, batch: &EpisodeBatch, targets: &[f64], frozen_adv: &[f64]) -> Result<f64, CgrpaError> {
        Ok(loss_and_grad(nets, batch, targets, &self.cfg, Some(frozen_adv), false)?
            .report
            .total_loss)
    }

    /// One clipped optimizer step on the combined loss; targets are synced
    /// every `target_update_interval` steps.
    pub fn learner_step(&mut self, batch: &EpisodeBatch) -> Result<LossReport, CgrpaError> {
        let mut step = self.compute(batch)?;
        let r = step.report;
        if !r.total_loss.is_finite() || !r.grad_norm.is_finite() {
            return Err(CgrpaError::NonFinite {
                td: r.td_loss,
                kl: r.kl_loss,
                policy: r.policy_loss,
            });
        }
        clip_gradients(&mut [&mut step.agent_grad, &mut step.mixer_grad], self.cfg.grad_norm_clip);
        self.agent_opt.step(&mut self.online.agent.params, &step.agent_grad)?;
        self.mixer_opt.step(&mut self.online.mixer.params, &step.mixer_grad)?;
        self.grad_steps += 1;
        if self.grad_steps.is_multiple_of(self.cfg.target_update_interval) {
            self.sync_targets()?;
        }
        Ok(r)
    }

    /// Writes the online parameters to `dir/params.bin` and `dir/manifest.txt`.
    pub fn save(&self, dir: &Path) -> Result<(), CheckpointError> {
        std::fs::create_dir_all(dir)?;
        let groups = [
            (self.online.agent.layout(), self.online.agent.params.as_slice()),
            (self.online.mixer.layout(), self.online.mixer.params.as_slice()),
        ];
        let mut out = BufWriter::new(File::create(dir.join("params.bin"))?);
        checkpoint::write_tensors(&mut out, &groups)?;
        out.flush()?;
        std::fs::write(dir.join("manifest.txt"), checkpoint::manifest(&groups))?;
        Ok(())
    }

    /// Loads online parameters saved by [`Learner::save`] and syncs targets.
    pub fn load(&mut self, dir: &Path) -> Result<(), CheckpointError> {
        let tensors = checkpoint::read_tensors(BufReader::new(File::open(dir.join("params.bin"))?))?;
        let agent_layout = self.online.agent.layout().clone();
        checkpoint::load_into(&tensors, &agent_layout, &mut self.online.agent.params)?;
        let mixer_layout = self.online.mixer.layout().clone();
        checkpoint::load_into(&tensors, &mixer_layout, &mut self.online.mixer.params)?;
        self.target = self.online.clone();
        Ok(())
    }
}
