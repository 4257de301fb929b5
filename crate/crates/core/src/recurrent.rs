//! Single-layer LSTM cell on the tape.

use crate::autodiff::Var;
use crate::blocks::Fwd;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Gate layout in the packed weights is `[input, forget, candidate, output]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmCell {
    pub wx: ParamId,
    pub wh: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub hidden: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmCell {
    /// Glorot weights; forget-gate bias starts at 1.
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut Rng) -> Self {
        let wx = store.glorot(format!("{name}.wx"), input, 4 * hidden, rng);
        let wh = store.glorot(format!("{name}.wh"), hidden, 4 * hidden, rng);
        let mut b = vec![0.0; 4 * hidden];
        b[hidden..2 * hidden].iter_mut().for_each(|v| *v = 1.0);
        let bias = store.add(format!("{name}.bias"), Tensor::vector(b));
        LstmCell {
            wx,
            wh,
            bias,
            input,
            hidden,
        }
    }

    pub fn zero_state(&self, fx: &mut Fwd) -> LstmState {
        LstmState {
            h: fx.graph.constant(Tensor::zeros(&[self.hidden])),
            c: fx.graph.constant(Tensor::zeros(&[self.hidden])),
        }
    }

    pub fn step(&self, fx: &mut Fwd, x: Var, state: LstmState) -> Result<LstmState> {
        let xv = fx.graph.value(x);
        if xv.rank() != 1 || xv.len() != self.input {
            return Err(Error::Dimension {
                op: "lstm_step",
                left: xv.shape().to_vec(),
                right: vec![self.input],
            });
        }
        let wx = fx.param(self.wx);
        let wh = fx.param(self.wh);
        let b = fx.param(self.bias);
        let g = &mut *fx.graph;
        let xw = g.matmul(x, wx)?;
        let hw = g.matmul(state.h, wh)?;
        let pre = g.add(xw, hw)?;
        let pre = g.add(pre, b)?;
        let n = self.hidden;
        let i = g.slice(pre, 0, n)?;
        let i = g.sigmoid(i);
        let f = g.slice(pre, n, n)?;
        let f = g.sigmoid(f);
        let cand = g.slice(pre, 2 * n, n)?;
        let cand = g.tanh(cand);
        let o = g.slice(pre, 3 * n, n)?;
        let o = g.sigmoid(o);
        let keep = g.mul(f, state.c)?;
        let write = g.mul(i, cand)?;
        let c = g.add(keep, write)?;
        let tc = g.tanh(c);
        let h = g.mul(o, tc)?;
        Ok(LstmState { h, c })
    }
}
