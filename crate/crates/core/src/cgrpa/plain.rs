//! The plain monotonic-factorization TD loss, written independently of the
//! counterfactual path so the two can be compared.

use ndarray::{s, Array2};

use super::{CgrpaError, EpisodeBatch, Nets};
use crate::nn::MixRowGrad;

#[derive(Debug, Clone)]
pub struct PlainLoss {
    pub targets: Vec<f64>,
    pub td_loss: f64,
    pub agent_grad: Vec<f64>,
    pub mixer_grad: Vec<f64>,
}

/// TD loss `mean (f(q_chosen, s) - y)^2` with `y` bootstrapped from the
/// target mixer over the target networks' greedy utilities.
pub fn plain_td_loss(online: &Nets, target: &Nets, batch: &EpisodeBatch, gamma: f64) -> Result<PlainLoss, CgrpaError> {
    let (bsz, n, na, tmax) = (batch.batch, batch.n_agents, batch.n_actions, batch.max_len);

    let h0 = target.agent.zero_hidden(bsz * n);
    let (next_out, _) = target.agent.forward(&batch.inputs, h0.view())?;
    let next_hyper = target.mixer.hyper(batch.states.slice(s![bsz..(tmax + 1) * bsz, ..]))?;
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
            let mut best = vec![0.0; n];
            for (i, slot) in best.iter_mut().enumerate() {
                let m = batch.avail_row(t + 1, b, i);
                let q = next_out[t + 1].row(b * n + i);
                let mut arg = None;
                for a in 0..na {
                    if m[a] && arg.is_none_or(|k: usize| q[a] > q[k]) {
                        arg = Some(a);
                    }
                }
                *slot = q[arg.unwrap_or(0)];
            }
            targets[r] = batch.rewards[r] + gamma * next_hyper.point(r).value(&best);
        }
    }

    let h0 = online.agent.zero_hidden(bsz * n);
    let (out, cache) = online.agent.forward_cached(&batch.inputs[..tmax], h0.view())?;
    let states = batch.states.slice(s![0..tmax * bsz, ..]);
    let hyper = online.mixer.hyper(states)?;
    let m = batch.n_filled() as f64;
    let mut td = 0.0;
    let mut deltas = vec![0.0; tmax * bsz];
    for t in 0..tmax {
        for b in 0..bsz {
            let r = t * bsz + b;
            if !batch.filled[r] {
                continue;
            }
            let acts = batch.actions_row(t, b);
            let chosen: Vec<f64> = (0..n).map(|i| out[t][[b * n + i, acts[i]]]).collect();
            let d = hyper.point(r).value(&chosen) - targets[r];
            deltas[r] = d;
            td += d * d;
        }
    }

    let mut grad_out: Vec<Array2<f64>> = (0..tmax).map(|_| Array2::zeros((bsz * n, na))).collect();
    let mut row_grads = vec![MixRowGrad::zeros(n, online.mixer.embed()); tmax * bsz];
    for t in 0..tmax {
        for b in 0..bsz {
            let r = t * bsz + b;
            if !batch.filled[r] {
                continue;
            }
            let acts = batch.actions_row(t, b);
            let chosen: Vec<f64> = (0..n).map(|i| out[t][[b * n + i, acts[i]]]).collect();
            let mut g = vec![0.0; n];
            hyper.point(r).backward(&chosen, 2.0 * deltas[r] / m, &mut g, &mut row_grads[r]);
            for i in 0..n {
                grad_out[t][[b * n + i, acts[i]]] = g[i];
            }
        }
    }
    Ok(PlainLoss {
        targets,
        td_loss: td / m,
        agent_grad: online.agent.backward(&cache, &grad_out),
        mixer_grad: online.mixer.backward(states, &hyper, &row_grads),
    })
}
