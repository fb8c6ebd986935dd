use ndarray::{s, Array2, ArrayView2, Axis, Zip};
use rand::Rng;

use super::{init_orthogonal, init_uniform, sigmoid, NnError, ParamLayout, Slot};

/// Encoder (affine + ReLU), GRU cell, and a linear utility head.
///
/// Rows of every input matrix are independent sequences (one per agent per
/// episode in a batch); parameters are shared across rows.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentNet {
    layout: ParamLayout,
    pub params: Vec<f64>,
    input_dim: usize,
    hidden: usize,
    n_actions: usize,
    fc1_w: Slot,
    fc1_b: Slot,
    gru_wi: Slot,
    gru_bi: Slot,
    gru_wh: Slot,
    gru_bh: Slot,
    fc2_w: Slot,
    fc2_b: Slot,
}

/// Activations kept from a forward pass over a sequence.
#[derive(Debug, Clone)]
pub struct AgentCache {
    steps: Vec<StepCache>,
}

#[derive(Debug, Clone)]
struct StepCache {
    x: Array2<f64>,
    enc: Array2<f64>,
    h_prev: Array2<f64>,
    r: Array2<f64>,
    z: Array2<f64>,
    n: Array2<f64>,
    gh_n: Array2<f64>,
    h: Array2<f64>,
}

impl AgentNet {
    pub fn new<R: Rng>(input_dim: usize, hidden: usize, n_actions: usize, rng: &mut R) -> Self {
        let mut layout = ParamLayout::default();
        let fc1_w = layout.add("agent.fc1.weight", input_dim, hidden);
        let fc1_b = layout.add("agent.fc1.bias", 1, hidden);
        let gru_wi = layout.add("agent.gru.weight_ih", hidden, 3 * hidden);
        let gru_bi = layout.add("agent.gru.bias_ih", 1, 3 * hidden);
        let gru_wh = layout.add("agent.gru.weight_hh", hidden, 3 * hidden);
        let gru_bh = layout.add("agent.gru.bias_hh", 1, 3 * hidden);
        let fc2_w = layout.add("agent.fc2.weight", hidden, n_actions);
        let fc2_b = layout.add("agent.fc2.bias", 1, n_actions);
        let mut params = vec![0.0; layout.len()];
        init_uniform(&mut params, fc1_w, input_dim, rng);
        init_uniform(&mut params, fc1_b, input_dim, rng);
        init_uniform(&mut params, gru_wi, hidden, rng);
        init_uniform(&mut params, gru_bi, hidden, rng);
        for gate in 0..3 {
            init_orthogonal(&mut params, gru_wh, gate * hidden, hidden, 1.0, rng);
        }
        init_uniform(&mut params, gru_bh, hidden, rng);
        init_uniform(&mut params, fc2_w, hidden, rng);
        init_uniform(&mut params, fc2_b, hidden, rng);
        Self {
            layout,
            params,
            input_dim,
            hidden,
            n_actions,
            fc1_w,
            fc1_b,
            gru_wi,
            gru_bi,
            gru_wh,
            gru_bh,
            fc2_w,
            fc2_b,
        }
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn zero_hidden(&self, rows: usize) -> Array2<f64> {
        Array2::zeros((rows, self.hidden))
    }

    fn check_input(&self, x: &ArrayView2<f64>, h: &ArrayView2<f64>) -> Result<(), NnError> {
        if x.ncols() != self.input_dim {
            return Err(NnError::Shape(format!(
                "observation width {} but encoder expects {}",
                x.ncols(),
                self.input_dim
            )));
        }
        if h.ncols() != self.hidden || h.nrows() != x.nrows() {
            return Err(NnError::Shape(format!(
                "hidden state {}x{} for {} rows of width {}",
                h.nrows(),
                h.ncols(),
                x.nrows(),
                self.hidden
            )));
        }
        Ok(())
    }

    fn step_inner(&self, x: ArrayView2<f64>, h_prev: ArrayView2<f64>) -> (Array2<f64>, StepCache) {
        let p = &self.params;
        let hd = self.hidden;
        let mut enc = x.dot(&self.fc1_w.mat(p)) + self.fc1_b.vec(p);
        enc.mapv_inplace(|v| v.max(0.0));
        let gi = enc.dot(&self.gru_wi.mat(p)) + self.gru_bi.vec(p);
        let gh = h_prev.dot(&self.gru_wh.mat(p)) + self.gru_bh.vec(p);
        let rows = x.nrows();
        let mut r = Array2::zeros((rows, hd));
        let mut z = Array2::zeros((rows, hd));
        let mut n = Array2::zeros((rows, hd));
        let mut h = Array2::zeros((rows, hd));
        Zip::from(&mut r)
            .and(gi.slice(s![.., 0..hd]))
            .and(gh.slice(s![.., 0..hd]))
            .for_each(|r, &a, &b| *r = sigmoid(a + b));
        Zip::from(&mut z)
            .and(gi.slice(s![.., hd..2 * hd]))
            .and(gh.slice(s![.., hd..2 * hd]))
            .for_each(|z, &a, &b| *z = sigmoid(a + b));
        let gh_n = gh.slice(s![.., 2 * hd..]).to_owned();
        Zip::from(&mut n)
            .and(gi.slice(s![.., 2 * hd..]))
            .and(&r)
            .and(&gh_n)
            .for_each(|n, &a, &r, &b| *n = (a + r * b).tanh());
        Zip::from(&mut h)
            .and(&z)
            .and(&n)
            .and(&h_prev)
            .for_each(|h, &z, &n, &hp| *h = (1.0 - z) * n + z * hp);
        let cache = StepCache {
            x: x.to_owned(),
            enc,
            h_prev: h_prev.to_owned(),
            r,
            z,
            n,
            gh_n,
            h: h.clone(),
        };
        (h, cache)
    }

    fn head(&self, h: &Array2<f64>) -> Array2<f64> {
        let p = &self.params;
        h.dot(&self.fc2_w.mat(p)) + self.fc2_b.vec(p)
    }

    /// One recurrent step: `(utilities, next_hidden)`.
    pub fn step(
        &self,
        x: ArrayView2<f64>,
        h_prev: ArrayView2<f64>,
    ) -> Result<(Array2<f64>, Array2<f64>), NnError> {
        self.check_input(&x, &h_prev)?;
        let (h, _) = self.step_inner(x, h_prev);
        Ok((self.head(&h), h))
    }

    /// Runs the whole sequence, returning per-step utilities and the final hidden state.
    pub fn forward(
        &self,
        inputs: &[Array2<f64>],
        h0: ArrayView2<f64>,
    ) -> Result<(Vec<Array2<f64>>, Array2<f64>), NnError> {
        let mut h = h0.to_owned();
        let mut out = Vec::with_capacity(inputs.len());
        for x in inputs {
            self.check_input(&x.view(), &h.view())?;
            let (hn, _) = self.step_inner(x.view(), h.view());
            out.push(self.head(&hn));
            h = hn;
        }
        Ok((out, h))
    }

    /// Forward pass that keeps what [`AgentNet::backward`] needs.
    pub fn forward_cached(
        &self,
        inputs: &[Array2<f64>],
        h0: ArrayView2<f64>,
    ) -> Result<(Vec<Array2<f64>>, AgentCache), NnError> {
        let mut h = h0.to_owned();
        let mut out = Vec::with_capacity(inputs.len());
        let mut steps = Vec::with_capacity(inputs.len());
        for x in inputs {
            self.check_input(&x.view(), &h.view())?;
            let (hn, cache) = self.step_inner(x.view(), h.view());
            out.push(self.head(&hn));
            steps.push(cache);
            h = hn;
        }
        Ok((out, AgentCache { steps }))
    }

    /// Backpropagation through time. `grad_out[t]` is dL/d(utilities at t);
    /// returns dL/dparams in this network's layout.
    pub fn backward(&self, cache: &AgentCache, grad_out: &[Array2<f64>]) -> Vec<f64> {
        let p = &self.params;
        let hd = self.hidden;
        let mut grad = vec![0.0; self.layout.len()];
        let w2 = self.fc2_w.mat(p);
        let wi = self.gru_wi.mat(p);
        let wh = self.gru_wh.mat(p);
        let mut dh_next: Option<Array2<f64>> = None;
        for (t, step) in cache.steps.iter().enumerate().rev() {
            let dq = &grad_out[t];
            // head
            {
                let mut gw2 = self.fc2_w.mat_mut(&mut grad);
                gw2 += &step.h.t().dot(dq);
            }
            {
                let mut gb2 = self.fc2_b.vec_mut(&mut grad);
                gb2 += &dq.sum_axis(Axis(0));
            }
            let mut dh = dq.dot(&w2.t());
            if let Some(next) = dh_next.take() {
                dh += &next;
            }
            let rows = dh.nrows();
            let mut dgi = Array2::zeros((rows, 3 * hd));
            let mut dgh = Array2::zeros((rows, 3 * hd));
            let mut dh_prev = Array2::zeros((rows, hd));
            for i in 0..rows {
                for j in 0..hd {
                    let g = dh[[i, j]];
                    let z = step.z[[i, j]];
                    let n = step.n[[i, j]];
                    let r = step.r[[i, j]];
                    let hp = step.h_prev[[i, j]];
                    let ghn = step.gh_n[[i, j]];
                    let dn = g * (1.0 - z);
                    let dz = g * (hp - n);
                    dh_prev[[i, j]] = g * z;
                    let dan = dn * (1.0 - n * n);
                    let dr = dan * ghn;
                    let daz = dz * z * (1.0 - z);
                    let dar = dr * r * (1.0 - r);
                    dgi[[i, j]] = dar;
                    dgi[[i, hd + j]] = daz;
                    dgi[[i, 2 * hd + j]] = dan;
                    dgh[[i, j]] = dar;
                    dgh[[i, hd + j]] = daz;
                    dgh[[i, 2 * hd + j]] = dan * r;
                }
            }
            {
                let mut g = self.gru_wi.mat_mut(&mut grad);
                g += &step.enc.t().dot(&dgi);
            }
            {
                let mut g = self.gru_bi.vec_mut(&mut grad);
                g += &dgi.sum_axis(Axis(0));
            }
            {
                let mut g = self.gru_wh.mat_mut(&mut grad);
                g += &step.h_prev.t().dot(&dgh);
            }
            {
                let mut g = self.gru_bh.vec_mut(&mut grad);
                g += &dgh.sum_axis(Axis(0));
            }
            dh_prev += &dgh.dot(&wh.t());
            let mut denc = dgi.dot(&wi.t());
            Zip::from(&mut denc)
                .and(&step.enc)
                .for_each(|d, &e| {
                    if e <= 0.0 {
                        *d = 0.0
                    }
                });
            {
                let mut g = self.fc1_w.mat_mut(&mut grad);
                g += &step.x.t().dot(&denc);
            }
            {
                let mut g = self.fc1_b.vec_mut(&mut grad);
                g += &denc.sum_axis(Axis(0));
            }
            dh_next = Some(dh_prev);
        }
        grad
    }
}
