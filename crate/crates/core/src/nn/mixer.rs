use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use super::{elu, elu_grad, init_uniform, NnError, ParamLayout, Slot};

/// State-conditioned monotonic mixer.
///
/// Hypernetworks map the global state to first-layer weights `W1 (n x E)`,
/// bias `b1`, second-layer weights `w2` and a state value `V(s)`:
///
/// `Q_tot = elu(q . |W1| + b1) . |w2| + V(s)`
///
/// The absolute value on both weight sets makes `Q_tot` nondecreasing in
/// every utility for every parameter setting.
#[derive(Debug, Clone, PartialEq)]
pub struct MonotonicMixer {
    layout: ParamLayout,
    pub params: Vec<f64>,
    state_dim: usize,
    n_agents: usize,
    embed: usize,
    w1_w: Slot,
    w1_b: Slot,
    b1_w: Slot,
    b1_b: Slot,
    w2_w: Slot,
    w2_b: Slot,
    v1_w: Slot,
    v1_b: Slot,
    v2_w: Slot,
    v2_b: Slot,
}

/// Hypernetwork outputs for a batch of states, one row per state.
#[derive(Debug, Clone)]
pub struct MixerHyper {
    n_agents: usize,
    embed: usize,
    w1_pre: Array2<f64>,
    w1: Array2<f64>,
    b1: Array2<f64>,
    w2_pre: Array2<f64>,
    w2: Array2<f64>,
    v_pre: Array2<f64>,
    v: Array1<f64>,
}

/// The mixer evaluated at one fixed state: a function of utilities only.
#[derive(Debug, Clone, Copy)]
pub struct MixPoint<'a> {
    n_agents: usize,
    embed: usize,
    w1: &'a [f64],
    b1: &'a [f64],
    w2: &'a [f64],
    v: f64,
}

/// Gradient accumulator for one state's hypernetwork outputs.
#[derive(Debug, Clone)]
pub struct MixRowGrad {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub v: f64,
}

impl MixRowGrad {
    pub fn zeros(n_agents: usize, embed: usize) -> Self {
        Self {
            w1: vec![0.0; n_agents * embed],
            b1: vec![0.0; embed],
            w2: vec![0.0; embed],
            v: 0.0,
        }
    }
}

impl<'a> MixPoint<'a> {
    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    fn hidden_pre(&self, q: &[f64], e: usize) -> f64 {
        let mut h = self.b1[e];
        for (i, qi) in q.iter().enumerate() {
            h += qi * self.w1[i * self.embed + e];
        }
        h
    }

    pub fn value(&self, q: &[f64]) -> f64 {
        debug_assert_eq!(q.len(), self.n_agents);
        let mut out = self.v;
        for e in 0..self.embed {
            out += elu(self.hidden_pre(q, e)) * self.w2[e];
        }
        out
    }

    /// Accumulates `upstream * dQ_tot/dq` into `grad_q` and the hypernetwork
    /// output gradients into `acc`.
    pub fn backward(&self, q: &[f64], upstream: f64, grad_q: &mut [f64], acc: &mut MixRowGrad) {
        acc.v += upstream;
        for e in 0..self.embed {
            let pre = self.hidden_pre(q, e);
            acc.w2[e] += upstream * elu(pre);
            let dh = upstream * self.w2[e] * elu_grad(pre);
            acc.b1[e] += dh;
            for (i, qi) in q.iter().enumerate() {
                acc.w1[i * self.embed + e] += dh * qi;
                grad_q[i] += dh * self.w1[i * self.embed + e];
            }
        }
    }
}

impl MixerHyper {
    pub fn rows(&self) -> usize {
        self.v.len()
    }

    pub fn point(&self, row: usize) -> MixPoint<'_> {
        MixPoint {
            n_agents: self.n_agents,
            embed: self.embed,
            w1: self.w1.row(row).to_slice().expect("contiguous"),
            b1: self.b1.row(row).to_slice().expect("contiguous"),
            w2: self.w2.row(row).to_slice().expect("contiguous"),
            v: self.v[row],
        }
    }

    /// Effective (nonnegative) first-layer weights for one state, `n x E` row-major.
    pub fn effective_w1(&self, row: usize) -> &[f64] {
        self.w1.row(row).to_slice().expect("contiguous")
    }

    pub fn effective_w2(&self, row: usize) -> &[f64] {
        self.w2.row(row).to_slice().expect("contiguous")
    }
}

impl MonotonicMixer {
    pub fn new<R: Rng>(state_dim: usize, n_agents: usize, embed: usize, rng: &mut R) -> Self {
        let mut layout = ParamLayout::default();
        let w1_w = layout.add("mixer.hyper_w1.weight", state_dim, n_agents * embed);
        let w1_b = layout.add("mixer.hyper_w1.bias", 1, n_agents * embed);
        let b1_w = layout.add("mixer.hyper_b1.weight", state_dim, embed);
        let b1_b = layout.add("mixer.hyper_b1.bias", 1, embed);
        let w2_w = layout.add("mixer.hyper_w2.weight", state_dim, embed);
        let w2_b = layout.add("mixer.hyper_w2.bias", 1, embed);
        let v1_w = layout.add("mixer.hyper_v1.weight", state_dim, embed);
        let v1_b = layout.add("mixer.hyper_v1.bias", 1, embed);
        let v2_w = layout.add("mixer.hyper_v2.weight", embed, 1);
        let v2_b = layout.add("mixer.hyper_v2.bias", 1, 1);
        let mut params = vec![0.0; layout.len()];
        for slot in [w1_w, w1_b, b1_w, b1_b, w2_w, w2_b, v1_w, v1_b] {
            init_uniform(&mut params, slot, state_dim, rng);
        }
        init_uniform(&mut params, v2_w, embed, rng);
        init_uniform(&mut params, v2_b, embed, rng);
        Self {
            layout,
            params,
            state_dim,
            n_agents,
            embed,
            w1_w,
            w1_b,
            b1_w,
            b1_b,
            w2_w,
            w2_b,
            v1_w,
            v1_b,
            v2_w,
            v2_b,
        }
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    pub fn embed(&self) -> usize {
        self.embed
    }

    pub fn hyper(&self, states: ArrayView2<f64>) -> Result<MixerHyper, NnError> {
        if states.ncols() != self.state_dim {
            return Err(NnError::Shape(format!(
                "state width {} but mixer expects {}",
                states.ncols(),
                self.state_dim
            )));
        }
        let p = &self.params;
        let w1_pre = states.dot(&self.w1_w.mat(p)) + self.w1_b.vec(p);
        let b1 = states.dot(&self.b1_w.mat(p)) + self.b1_b.vec(p);
        let w2_pre = states.dot(&self.w2_w.mat(p)) + self.w2_b.vec(p);
        let v_pre = states.dot(&self.v1_w.mat(p)) + self.v1_b.vec(p);
        let v_hidden = v_pre.mapv(|x| x.max(0.0));
        let v = v_hidden.dot(&self.v2_w.mat(p)).column(0).to_owned() + p[self.v2_b.offset];
        Ok(MixerHyper {
            n_agents: self.n_agents,
            embed: self.embed,
            w1: w1_pre.mapv(f64::abs),
            w1_pre,
            b1,
            w2: w2_pre.mapv(f64::abs),
            w2_pre,
            v_pre,
            v,
        })
    }

    /// `Q_tot` for a single state.
    pub fn forward(&self, utilities: &[f64], state: &[f64]) -> Result<f64, NnError> {
        if utilities.len() != self.n_agents {
            return Err(NnError::Shape(format!(
                "{} utilities for {} agents",
                utilities.len(),
                self.n_agents
            )));
        }
        let s = ArrayView2::from_shape((1, state.len()), state)
            .map_err(|e| NnError::Shape(e.to_string()))?;
        Ok(self.hyper(s)?.point(0).value(utilities))
    }

    /// Parameter gradients from per-row hypernetwork output gradients.
    pub fn backward(
        &self,
        states: ArrayView2<f64>,
        hyper: &MixerHyper,
        row_grads: &[MixRowGrad],
    ) -> Vec<f64> {
        let p = &self.params;
        let m = states.nrows();
        let (n, e) = (self.n_agents, self.embed);
        let mut dw1 = Array2::zeros((m, n * e));
        let mut db1 = Array2::zeros((m, e));
        let mut dw2 = Array2::zeros((m, e));
        let mut dv = Array1::zeros(m);
        for (row, g) in row_grads.iter().enumerate() {
            for k in 0..n * e {
                // d|x|/dx = sign(x), zero at the kink
                dw1[[row, k]] = g.w1[k] * sign(hyper.w1_pre[[row, k]]);
            }
            for k in 0..e {
                db1[[row, k]] = g.b1[k];
                dw2[[row, k]] = g.w2[k] * sign(hyper.w2_pre[[row, k]]);
            }
            dv[row] = g.v;
        }
        let mut grad = vec![0.0; self.layout.len()];
        let st = states.t();
        self.w1_w.mat_mut(&mut grad).assign(&st.dot(&dw1));
        self.w1_b.vec_mut(&mut grad).assign(&dw1.sum_axis(Axis(0)));
        self.b1_w.mat_mut(&mut grad).assign(&st.dot(&db1));
        self.b1_b.vec_mut(&mut grad).assign(&db1.sum_axis(Axis(0)));
        self.w2_w.mat_mut(&mut grad).assign(&st.dot(&dw2));
        self.w2_b.vec_mut(&mut grad).assign(&dw2.sum_axis(Axis(0)));
        let v_hidden = hyper.v_pre.mapv(|x| x.max(0.0));
        let dv_col = dv.view().insert_axis(Axis(1));
        self.v2_w.mat_mut(&mut grad).assign(&v_hidden.t().dot(&dv_col));
        grad[self.v2_b.offset] = dv.sum();
        let v2 = self.v2_w.mat(p);
        let mut dvh = dv_col.dot(&v2.t());
        ndarray::Zip::from(&mut dvh)
            .and(&hyper.v_pre)
            .for_each(|d, &a| {
                if a <= 0.0 {
                    *d = 0.0
                }
            });
        self.v1_w.mat_mut(&mut grad).assign(&st.dot(&dvh));
        self.v1_b.vec_mut(&mut grad).assign(&dvh.sum_axis(Axis(0)));
        grad
    }

    /// Pins the hypernetworks so that the effective weights are exactly the
    /// given constants for every state.
    pub fn pin(&mut self, w1: &[f64], b1: &[f64], w2: &[f64], v: f64) {
        let p = &mut self.params;
        p.iter_mut().for_each(|x| *x = 0.0);
        p[self.w1_b.range()].copy_from_slice(w1);
        p[self.b1_b.range()].copy_from_slice(b1);
        p[self.w2_b.range()].copy_from_slice(w2);
        p[self.v2_b.offset] = v;
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
