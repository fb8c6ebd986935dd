//! Fixed-architecture function approximators with hand-written backward passes.
//!
//! Parameters for each network live in one flat `Vec<f64>` described by a
//! [`ParamLayout`]. Gradients use the same layout, which keeps the optimizer,
//! clipping, target sync, and checkpointing oblivious to architecture.

mod agent;
pub mod checkpoint;
mod mixer;
mod optim;

pub use agent::{AgentCache, AgentNet};
pub use mixer::{MixPoint, MixRowGrad, MixerHyper, MonotonicMixer};
pub use optim::{clip_gradients, global_norm, Adam, AdamConfig};

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite gradient at flat index {0}")]
    NonFinite(usize),
    #[error("architecture mismatch: {0}")]
    Architecture(String),
}

/// Location of one 2-D tensor inside a flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    pub fn mat<'a>(&self, data: &'a [f64]) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((self.rows, self.cols), &data[self.range()]).expect("slot shape")
    }

    pub fn mat_mut<'a>(&self, data: &'a mut [f64]) -> ArrayViewMut2<'a, f64> {
        ArrayViewMut2::from_shape((self.rows, self.cols), &mut data[self.range()])
            .expect("slot shape")
    }

    pub fn vec<'a>(&self, data: &'a [f64]) -> ArrayView1<'a, f64> {
        ArrayView1::from(&data[self.range()])
    }

    pub fn vec_mut<'a>(&self, data: &'a mut [f64]) -> ArrayViewMut1<'a, f64> {
        ArrayViewMut1::from(&mut data[self.range()])
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub slot: Slot,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParamLayout {
    specs: Vec<TensorSpec>,
    len: usize,
}

impl ParamLayout {
    pub fn add(&mut self, name: &str, rows: usize, cols: usize) -> Slot {
        let slot = Slot {
            offset: self.len,
            rows,
            cols,
        };
        self.len += rows * cols;
        self.specs.push(TensorSpec {
            name: name.to_string(),
            slot,
        });
        slot
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn specs(&self) -> &[TensorSpec] {
        &self.specs
    }
}

/// Uniform `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub(crate) fn init_uniform<R: Rng>(data: &mut [f64], slot: Slot, fan_in: usize, rng: &mut R) {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    for x in &mut data[slot.range()] {
        *x = rng.gen_range(-bound..bound);
    }
}

/// Fills `rows x cols` (rows >= cols or not) with an orthonormal set of
/// columns (or rows, whichever is shorter) scaled by `gain`.
pub(crate) fn init_orthogonal<R: Rng>(
    data: &mut [f64],
    slot: Slot,
    col_offset: usize,
    cols: usize,
    gain: f64,
    rng: &mut R,
) {
    let n = slot.rows;
    // Gram-Schmidt on Gaussian columns; the block is square (hidden x hidden)
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while basis.len() < cols {
        let mut v: Vec<f64> = (0..n).map(|_| standard_normal(rng)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(a, c)| a * c).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= dot * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        basis.push(v);
    }
    let mut m = slot.mat_mut(data);
    for (j, b) in basis.iter().enumerate() {
        for i in 0..n {
            m[[i, col_offset + j]] = gain * b[i];
        }
    }
}

fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Bit-exact copy of online parameters into the target network.
pub fn sync_params(
    online_layout: &ParamLayout,
    online: &[f64],
    target_layout: &ParamLayout,
    target: &mut [f64],
) -> Result<(), NnError> {
    if online_layout != target_layout || online.len() != target.len() {
        return Err(NnError::Architecture(format!(
            "online has {} parameters, target {}",
            online.len(),
            target.len()
        )));
    }
    target.copy_from_slice(online);
    Ok(())
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub(crate) fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

#[inline]
pub(crate) fn elu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}
