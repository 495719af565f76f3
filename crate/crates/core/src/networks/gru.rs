use crate::error::{invalid, Result};
use crate::numerics::{ParamId, ParamStore, Rng, Tensor};

use super::init_uniform;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GruHead {
    /// One logit per sequence, read from the final hidden state.
    Classifier,
    /// `outputs` values per position, read from every hidden state.
    Forecaster { outputs: usize },
}

/// Single-layer gated recurrent unit with a task head.
///
/// ```text
/// z = sigmoid(x Wz + h Uz + bz)
/// r = sigmoid(x Wr + h Ur + br)
/// n = tanh(x Wn + (r * h) Un + bn)
/// h' = (1 - z) * n + z * h
/// ```
#[derive(Clone, Debug)]
pub struct GruNetwork {
    pub params: ParamStore,
    inputs: usize,
    hidden: usize,
    head: GruHead,
    w: ParamId,
    b: ParamId,
    u_zr: ParamId,
    u_n: ParamId,
    head_w: ParamId,
    head_b: ParamId,
}

impl GruNetwork {
    pub fn new(inputs: usize, hidden: usize, head: GruHead, rng: &mut Rng) -> Result<GruNetwork> {
        if inputs == 0 || hidden == 0 {
            return Err(invalid("GRU extents must be >= 1"));
        }
        let mut ps = ParamStore::new();
        // gate order in the fused matrices: z, r, n
        let w = ps.insert("w", init_uniform(rng, &[inputs, 3 * hidden], inputs)?);
        let b = ps.insert("b", Tensor::zeros(&[3 * hidden]));
        let u_zr = ps.insert("u_zr", init_uniform(rng, &[hidden, 2 * hidden], hidden)?);
        let u_n = ps.insert("u_n", init_uniform(rng, &[hidden, hidden], hidden)?);
        let out = match head {
            GruHead::Classifier => 1,
            GruHead::Forecaster { outputs } => outputs,
        };
        let head_w = ps.insert("head.w", init_uniform(rng, &[hidden, out], hidden)?);
        let head_b = ps.insert("head.b", Tensor::zeros(&[out]));
        Ok(GruNetwork {
            params: ps,
            inputs,
            hidden,
            head,
            w,
            b,
            u_zr,
            u_n,
            head_w,
            head_b,
        })
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden
    }

    fn p(&self, id: ParamId) -> &Tensor {
        self.params.param(id)
    }

    /// Hidden state after each step, each `(B, hidden)`, from a zero start.
    pub fn hidden_states(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let s = x.shape();
        if s.len() != 3 || s[2] != self.inputs {
            return Err(invalid(format!("GRU expects (batch, time, {}) input, got {s:?}", self.inputs)));
        }
        let (b, t, hd) = (s[0], s[1], self.hidden);
        let projected = x.matmul(self.p(self.w))?.add(self.p(self.b))?;
        let mut h = Tensor::zeros(&[b, hd]);
        let mut states = Vec::with_capacity(t);
        for step in 0..t {
            let xt = projected.slice(1, step, 1)?.reshape(&[b, 3 * hd])?;
            let hu = h.matmul(self.p(self.u_zr))?;
            let z = xt.slice(1, 0, hd)?.add(&hu.slice(1, 0, hd)?)?.sigmoid()?;
            let r = xt.slice(1, hd, hd)?.add(&hu.slice(1, hd, hd)?)?.sigmoid()?;
            let n = xt.slice(1, 2 * hd, hd)?.add(&r.mul(&h)?.matmul(self.p(self.u_n))?)?.tanh()?;
            // h' = n + z * (h - n)
            h = n.add(&z.mul(&h.sub(&n)?)?)?;
            states.push(h.clone());
        }
        Ok(states)
    }

    /// Classifier logits `(B)`.
    pub fn classify(&self, x: &Tensor) -> Result<Tensor> {
        if self.head != GruHead::Classifier {
            return Err(invalid("GRU has a forecasting head"));
        }
        let last = self
            .hidden_states(x)?
            .pop()
            .ok_or_else(|| invalid("GRU input has no time steps"))?;
        let b = last.shape()[0];
        last.matmul(self.p(self.head_w))?.add(self.p(self.head_b))?.reshape(&[b])
    }

    /// Per-position forecasts `(B, T, outputs)`.
    pub fn forecast(&self, x: &Tensor) -> Result<Tensor> {
        if self.head == GruHead::Classifier {
            return Err(invalid("GRU has a classification head"));
        }
        let states = self.hidden_states(x)?;
        let b = x.shape()[0];
        let stacked: Vec<Tensor> = states
            .iter()
            .map(|h| h.reshape(&[b, 1, self.hidden]))
            .collect::<Result<_>>()?;
        Tensor::concat(&stacked, 1)?.matmul(self.p(self.head_w))?.add(self.p(self.head_b))
    }
}
