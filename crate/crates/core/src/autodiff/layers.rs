//! Layers used by the models. A layer only remembers the names of its
//! parameters; the tensors themselves live in a [`ParamStore`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{Bindings, ParamStore};
use super::tape::{BatchStats, NodeId, Tape};
use super::tensor::Tensor;
use crate::error::Result;

pub const LEAKY_RELU_SLOPE: f64 = 0.01;
pub const BATCH_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    LeakyRelu,
    Tanh,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::LeakyRelu => tape.leaky_relu(x, LEAKY_RELU_SLOPE),
            Activation::Tanh => tape.tanh(x),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Affine map `x W + b` with `W: [in, out]`, `b: [1, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn declare(name: impl Into<String>, in_dim: usize, out_dim: usize) -> Self {
        Linear {
            name: name.into(),
            in_dim,
            out_dim,
        }
    }

    pub fn new(
        store: &mut ParamStore,
        name: impl Into<String>,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let layer = Self::declare(name, in_dim, out_dim);
        let bound = 1.0 / (in_dim as f64).sqrt();
        store.init_uniform(&layer.weight(), &[in_dim, out_dim], bound, rng);
        store.init_uniform(&layer.bias(), &[1, out_dim], bound, rng);
        layer
    }

    pub fn weight(&self) -> String {
        format!("{}.w", self.name)
    }

    pub fn bias(&self) -> String {
        format!("{}.b", self.name)
    }

    pub fn forward(&self, tape: &mut Tape, b: &Bindings, x: NodeId) -> Result<NodeId> {
        let xw = tape.matmul(x, b.get(&self.weight())?)?;
        tape.add(xw, b.get(&self.bias())?)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    #[default]
    Lstm,
    Gru,
}

/// Recurrent state; `c` is only present for LSTM cells.
#[derive(Clone, Copy, Debug)]
pub struct RecState {
    pub h: NodeId,
    pub c: Option<NodeId>,
}

/// One LSTM or GRU cell.
///
/// LSTM gate columns are ordered input, forget, cell, output. GRU columns
/// are reset, update, candidate.
#[derive(Clone, Debug)]
pub struct RecurrentCell {
    pub kind: CellKind,
    pub name: String,
    pub input: usize,
    pub hidden: usize,
}

impl RecurrentCell {
    pub fn declare(kind: CellKind, name: impl Into<String>, input: usize, hidden: usize) -> Self {
        RecurrentCell {
            kind,
            name: name.into(),
            input,
            hidden,
        }
    }

    pub fn new(
        store: &mut ParamStore,
        kind: CellKind,
        name: impl Into<String>,
        input: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let cell = Self::declare(kind, name, input, hidden);
        let bound = 1.0 / (hidden as f64).sqrt();
        let gates = cell.gates();
        store.init_uniform(&cell.p("w_ih"), &[input, gates * hidden], bound, rng);
        store.init_uniform(&cell.p("w_hh"), &[hidden, gates * hidden], bound, rng);
        match kind {
            CellKind::Lstm => {
                let mut bias = Tensor::zeros(&[1, 4 * hidden]);
                // forget gate starts open
                bias.data_mut()[hidden..2 * hidden]
                    .iter_mut()
                    .for_each(|v| *v = 1.0);
                store.insert(cell.p("b"), bias);
            }
            CellKind::Gru => {
                store.init_uniform(&cell.p("b_ih"), &[1, 3 * hidden], bound, rng);
                store.init_uniform(&cell.p("b_hh"), &[1, 3 * hidden], bound, rng);
            }
        }
        cell
    }

    fn gates(&self) -> usize {
        match self.kind {
            CellKind::Lstm => 4,
            CellKind::Gru => 3,
        }
    }

    pub fn p(&self, suffix: &str) -> String {
        format!("{}.{}", self.name, suffix)
    }

    pub fn zero_state(&self, tape: &mut Tape, batch: usize) -> Result<RecState> {
        let h = tape.constant(Tensor::zeros(&[batch, self.hidden]))?;
        let c = match self.kind {
            CellKind::Lstm => Some(tape.constant(Tensor::zeros(&[batch, self.hidden]))?),
            CellKind::Gru => None,
        };
        Ok(RecState { h, c })
    }

    pub fn step(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        x: NodeId,
        state: RecState,
    ) -> Result<RecState> {
        let hd = self.hidden;
        match self.kind {
            CellKind::Lstm => {
                let xg = tape.matmul(x, b.get(&self.p("w_ih"))?)?;
                let hg = tape.matmul(state.h, b.get(&self.p("w_hh"))?)?;
                let sum = tape.add(xg, hg)?;
                let gates = tape.add(sum, b.get(&self.p("b"))?)?;
                let i = tape.slice_cols(gates, 0, hd)?;
                let i = tape.sigmoid(i)?;
                let f = tape.slice_cols(gates, hd, 2 * hd)?;
                let f = tape.sigmoid(f)?;
                let g = tape.slice_cols(gates, 2 * hd, 3 * hd)?;
                let g = tape.tanh(g)?;
                let o = tape.slice_cols(gates, 3 * hd, 4 * hd)?;
                let o = tape.sigmoid(o)?;
                let c_prev = match state.c {
                    Some(c) => c,
                    None => tape.constant(Tensor::zeros(tape.value(state.h).shape()))?,
                };
                let keep = tape.mul(f, c_prev)?;
                let write = tape.mul(i, g)?;
                let c = tape.add(keep, write)?;
                let tc = tape.tanh(c)?;
                let h = tape.mul(o, tc)?;
                Ok(RecState { h, c: Some(c) })
            }
            CellKind::Gru => {
                let xg = tape.matmul(x, b.get(&self.p("w_ih"))?)?;
                let xg = tape.add(xg, b.get(&self.p("b_ih"))?)?;
                let hg = tape.matmul(state.h, b.get(&self.p("w_hh"))?)?;
                let hg = tape.add(hg, b.get(&self.p("b_hh"))?)?;
                let xr = tape.slice_cols(xg, 0, hd)?;
                let hr = tape.slice_cols(hg, 0, hd)?;
                let r = tape.add(xr, hr)?;
                let r = tape.sigmoid(r)?;
                let xz = tape.slice_cols(xg, hd, 2 * hd)?;
                let hz = tape.slice_cols(hg, hd, 2 * hd)?;
                let z = tape.add(xz, hz)?;
                let z = tape.sigmoid(z)?;
                let xn = tape.slice_cols(xg, 2 * hd, 3 * hd)?;
                let hn = tape.slice_cols(hg, 2 * hd, 3 * hd)?;
                let rhn = tape.mul(r, hn)?;
                let n = tape.add(xn, rhn)?;
                let n = tape.tanh(n)?;
                // h' = n + z * (h - n)
                let diff = tape.sub(state.h, n)?;
                let zd = tape.mul(z, diff)?;
                let h = tape.add(n, zd)?;
                Ok(RecState { h, c: None })
            }
        }
    }

    /// Runs the cell over `inputs` (one `[batch, input]` node per step).
    /// `keep[t][r]` is false on padded positions, where row `r` carries its
    /// state through unchanged. With `reverse`, steps run last to first, so
    /// right-padded rows start from the zero state at their own last token.
    pub fn run(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        inputs: &[NodeId],
        keep: &[Vec<bool>],
        reverse: bool,
        init: RecState,
    ) -> Result<RecState> {
        let mut state = init;
        let order: Box<dyn Iterator<Item = usize>> = if reverse {
            Box::new((0..inputs.len()).rev())
        } else {
            Box::new(0..inputs.len())
        };
        for t in order {
            let mask = &keep[t];
            if mask.iter().all(|&k| !k) {
                continue;
            }
            let next = self.step(tape, b, inputs[t], state)?;
            state = if mask.iter().all(|&k| k) {
                next
            } else {
                let h = tape.mask_rows(mask, next.h, state.h)?;
                let c = match (next.c, state.c) {
                    (Some(nc), Some(oc)) => Some(tape.mask_rows(mask, nc, oc)?),
                    _ => None,
                };
                RecState { h, c }
            };
        }
        Ok(state)
    }
}

/// Batch normalization over features of a `[batch, features]` input.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub name: String,
    pub features: usize,
}

impl BatchNorm {
    pub fn declare(name: impl Into<String>, features: usize) -> Self {
        BatchNorm {
            name: name.into(),
            features,
        }
    }

    pub fn new(store: &mut ParamStore, name: impl Into<String>, features: usize) -> Self {
        let bn = Self::declare(name, features);
        store.insert(bn.p("gamma"), Tensor::ones(&[1, features]));
        store.insert(bn.p("beta"), Tensor::zeros(&[1, features]));
        store.insert_buffer(bn.p("running_mean"), Tensor::zeros(&[1, features]));
        store.insert_buffer(bn.p("running_var"), Tensor::ones(&[1, features]));
        bn
    }

    pub fn p(&self, suffix: &str) -> String {
        format!("{}.{}", self.name, suffix)
    }

    /// Train mode normalizes with batch statistics (returned so the caller
    /// can fold them into the running averages); eval mode uses the stored
    /// running statistics.
    pub fn forward(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        store: &ParamStore,
        x: NodeId,
        mode: Mode,
    ) -> Result<(NodeId, Option<BatchStats>)> {
        let gamma = b.get(&self.p("gamma"))?;
        let beta = b.get(&self.p("beta"))?;
        match mode {
            Mode::Train => {
                let (y, stats) = tape.batch_norm_train(x, gamma, beta, BATCH_NORM_EPS)?;
                Ok((y, Some(stats)))
            }
            Mode::Eval => {
                let mean = store.buffer(&self.p("running_mean"))?;
                let var = store.buffer(&self.p("running_var"))?;
                let neg_mean = tape.constant(mean.map(|m| -m))?;
                let inv_std = tape.constant(var.map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt()))?;
                let centered = tape.add(x, neg_mean)?;
                let normed = tape.mul(centered, inv_std)?;
                let scaled = tape.mul(normed, gamma)?;
                Ok((tape.add(scaled, beta)?, None))
            }
        }
    }

    /// `running = (1 - momentum) * running + momentum * batch`, using the
    /// unbiased batch variance.
    pub fn update_running(&self, store: &mut ParamStore, stats: &BatchStats) -> Result<()> {
        let m = BATCH_NORM_MOMENTUM;
        let n = stats.count as f64;
        let rm = store.buffer_mut(&self.p("running_mean"))?;
        for (r, &s) in rm.data_mut().iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * s;
        }
        let rv = store.buffer_mut(&self.p("running_var"))?;
        for (r, &s) in rv.data_mut().iter_mut().zip(&stats.var) {
            *r = (1.0 - m) * *r + m * s * n / (n - 1.0);
        }
        Ok(())
    }
}
