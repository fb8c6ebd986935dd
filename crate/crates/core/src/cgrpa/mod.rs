//! Counterfactual group-relative advantages fused into the utilities of a
//! monotonic value-factorization learner.
//!
//! For agent `i` with utilities `Q_i`, Boltzmann policy `pi_i` and chosen
//! action `u_i`:
//!
//! ```text
//! A_i  = f(q, s) - sum_a pi_i(a) f(q[i <- Q_i(a)], s) - alpha * KL(pi_i || pi_bar)
//! Q~_i = q_i + lambda * A_i
//! Q_tot = f(Q~, s)
//! ```
//!
//! where `q` holds every agent's chosen-action utility, `f` is the monotonic
//! mixer and `pi_bar` is the mean policy of the group. Behaviour stays
//! epsilon-greedy; the policies only shape the advantage, the KL penalty and
//! the advantage-weighted policy term of the loss.

mod episode;
mod learner;
mod plain;

pub use episode::{Episode, EpisodeBatch, Transition};
pub use learner::{td_target, Learner, LossReport, Nets, StepOutput};
pub use plain::{plain_td_loss, PlainLoss};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Floor applied to the reference distribution inside the KL logarithm.
pub const KL_FLOOR: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CgrpaError {
    #[error("no available action")]
    NoAvailableAction,
    #[error("invalid learner config: {0}")]
    Config(String),
    #[error("batch: {0}")]
    Batch(String),
    #[error("non-finite loss (td {td}, kl {kl}, policy {policy})")]
    NonFinite { td: f64, kl: f64, policy: f64 },
    #[error(transparent)]
    Nn(#[from] crate::nn::NnError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearnerConfig {
    /// Counterfactual integration strength.
    pub lambda: f64,
    /// KL temperature inside the advantage.
    pub alpha: f64,
    /// Weight of the KL term in the loss.
    pub beta: f64,
    /// Include the advantage-weighted log-policy term.
    pub policy_term: bool,
    /// Scale of the policy term.
    pub policy_coef: f64,
    pub gamma: f64,
    pub learning_rate: f64,
    pub grad_norm_clip: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub target_update_interval: u64,
    pub policy_temperature: f64,
    pub rnn_hidden: usize,
    pub mixer_embed: usize,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            alpha: 0.1,
            beta: 0.01,
            policy_term: true,
            policy_coef: 0.1,
            gamma: 0.99,
            learning_rate: 5e-4,
            grad_norm_clip: 10.0,
            batch_size: 32,
            buffer_capacity: 5000,
            target_update_interval: 200,
            policy_temperature: 1.0,
            rnn_hidden: 64,
            mixer_embed: 32,
        }
    }
}

impl LearnerConfig {
    /// The plain backbone: no advantage fusion, no KL, no policy term.
    pub fn plain(&self) -> Self {
        Self {
            lambda: 0.0,
            beta: 0.0,
            policy_term: false,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), CgrpaError> {
        let bad = |m: &str| Err(CgrpaError::Config(m.to_string()));
        if !self.lambda.is_finite() || self.lambda > 1.0 {
            return bad("lambda must be finite and at most 1");
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be nonnegative");
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("beta must be nonnegative");
        }
        if !(self.policy_coef >= 0.0 && self.policy_coef.is_finite()) {
            return bad("policy_coef must be nonnegative");
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1)");
        }
        if !(self.learning_rate > 0.0) || !(self.grad_norm_clip > 0.0) {
            return bad("learning_rate and grad_norm_clip must be positive");
        }
        if self.batch_size == 0 || self.buffer_capacity == 0 || self.target_update_interval == 0 {
            return bad("batch_size, buffer_capacity and target_update_interval must be positive");
        }
        if !(self.policy_temperature > 0.0) {
            return bad("policy_temperature must be positive");
        }
        if self.rnn_hidden == 0 || self.mixer_embed == 0 {
            return bad("network widths must be positive");
        }
        Ok(())
    }
}

/// Categorical distribution restricted to the available actions.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyDistribution {
    pub probs: Vec<f64>,
    pub avail_mask: Vec<bool>,
}

impl PolicyDistribution {
    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// Masked Boltzmann distribution `exp(q / T)` over available actions.
pub fn derive_policy(
    q_values: &[f64],
    avail_mask: &[bool],
    temperature: f64,
) -> Result<PolicyDistribution, CgrpaError> {
    let mut probs = vec![0.0; q_values.len()];
    masked_softmax(q_values, avail_mask, temperature, &mut probs)
        .ok_or(CgrpaError::NoAvailableAction)?;
    Ok(PolicyDistribution {
        probs,
        avail_mask: avail_mask.to_vec(),
    })
}

/// Writes the masked softmax into `out`; `None` if nothing is available.
pub(crate) fn masked_softmax(q: &[f64], mask: &[bool], temperature: f64, out: &mut [f64]) -> Option<()> {
    let max = q
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return None;
    }
    let mut total = 0.0;
    for ((o, &v), &m) in out.iter_mut().zip(q).zip(mask) {
        *o = if m { ((v - max) / temperature).exp() } else { 0.0 };
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
    Some(())
}

/// Entrywise mean of the policies, renormalized over the union of their
/// available actions.
pub fn group_average_policy(policies: &[PolicyDistribution]) -> Result<PolicyDistribution, CgrpaError> {
    let first = policies
        .first()
        .ok_or_else(|| CgrpaError::Batch("group average of no policies".into()))?;
    let len = first.len();
    if policies.iter().any(|p| p.len() != len || p.avail_mask.len() != len) {
        return Err(CgrpaError::Batch("policies over different action spaces".into()));
    }
    let rows: Vec<&[f64]> = policies.iter().map(|p| p.probs.as_slice()).collect();
    let mut probs = vec![0.0; len];
    mean_policy(&rows, &mut probs);
    let avail_mask = (0..len)
        .map(|a| policies.iter().any(|p| p.avail_mask[a]))
        .collect();
    Ok(PolicyDistribution { probs, avail_mask })
}

pub(crate) fn mean_policy(rows: &[&[f64]], out: &mut [f64]) {
    out.iter_mut().for_each(|o| *o = 0.0);
    for row in rows {
        for (o, &p) in out.iter_mut().zip(row.iter()) {
            *o += p;
        }
    }
    let n = rows.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    // normalized inputs already average to a distribution; leave those bits alone
    let total: f64 = out.iter().sum();
    if total > 0.0 && (total - 1.0).abs() > 1e-12 {
        out.iter_mut().for_each(|o| *o /= total);
    }
}

/// `sum p ln(p / max(q, 1e-8))` over the support of `p`.
pub fn kl_divergence(p: &PolicyDistribution, q: &PolicyDistribution) -> f64 {
    kl(&p.probs, &q.probs)
}

pub(crate) fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pa, _)| pa > 0.0)
        .map(|(&pa, &qa)| pa * (pa.ln() - qa.max(KL_FLOOR).ln()))
        .sum()
}

/// Advantage of one agent together with the pieces it was built from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CounterfactualAdvantage {
    pub agent: usize,
    pub value: f64,
    pub joint_q: f64,
    pub baseline: f64,
    pub kl_penalty: f64,
}

/// `E_{a ~ pi_i}[ f(q with agent i's entry replaced by Q_i(a)) ]`, computed by
/// enumerating the available actions. `joint_value` evaluates the mixer on a
/// full vector of per-agent utilities.
pub fn counterfactual_baseline<F: Fn(&[f64]) -> f64>(
    agent: usize,
    utilities: &[Vec<f64>],
    joint_action: &[usize],
    policy: &PolicyDistribution,
    joint_value: F,
) -> f64 {
    let mut q: Vec<f64> = utilities
        .iter()
        .zip(joint_action)
        .map(|(u, &a)| u[a])
        .collect();
    let mut total = 0.0;
    for (a, &p) in policy.probs.iter().enumerate() {
        if p > 0.0 {
            q[agent] = utilities[agent][a];
            total += p * joint_value(&q);
        }
    }
    total
}

pub fn counterfactual_advantage(
    agent: usize,
    joint_q: f64,
    baseline: f64,
    kl: f64,
    alpha: f64,
) -> CounterfactualAdvantage {
    CounterfactualAdvantage {
        agent,
        value: joint_q - baseline - alpha * kl,
        joint_q,
        baseline,
        kl_penalty: kl,
    }
}

pub fn augment_utilities(q: f64, advantage: f64, lambda: f64) -> f64 {
    q + lambda * advantage
}

pub fn augment_utilities_batch(q: &[f64], advantages: &[f64], lambda: f64) -> Vec<f64> {
    q.iter()
        .zip(advantages)
        .map(|(&q, &a)| augment_utilities(q, a, lambda))
        .collect()
}
