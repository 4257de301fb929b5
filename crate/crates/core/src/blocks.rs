//! Non-local, coupling and temporal aggregation blocks.
//!
//! All inputs are snippet-major `[K, D]` banks. A non-local block relates a
//! query bank to a context bank:
//!
//! ```text
//! q~ = LN_in(query), c~ = LN_in(context)
//! A  = softmax_rows( (q~ Wθ)(c~ Wφ)ᵀ / sqrt(d_attn) )        [Kq, Kc]
//! out = LN_out( query + dropout( A (c~ Wg) Wout ) )           [Kq, D]
//! ```
//!
//! A coupling block couples one recent bank `R` with one spanning bank `S`:
//! `S' = NLB(S, S)`, `R' = NLB(S', R)`, and fuses max-pooled summaries into
//! two `H`-vectors `R''`, `S''`. A temporal aggregation block runs one
//! coupling block per spanning scale and reduces them to `R'''` (concat and
//! linear) and `S'''` (elementwise max).

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Forward-pass context: the tape, frozen parameters, and the dropout stream.
pub struct Fwd<'a> {
    pub graph: &'a mut Graph,
    pub params: &'a ParamStore,
    pub training: bool,
    pub rng: &'a mut Rng,
}

impl<'a> Fwd<'a> {
    pub fn new(graph: &'a mut Graph, params: &'a ParamStore, training: bool, rng: &'a mut Rng) -> Self {
        Fwd {
            graph,
            params,
            training,
            rng,
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.graph.param(self.params, id)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        Linear {
            weight: store.glorot(format!("{name}.weight"), fan_in, fan_out, rng),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out])),
            fan_in,
            fan_out,
        }
    }

    /// `x W + b` for `x` of shape `[fan_in]` or `[rows, fan_in]`.
    pub fn forward(&self, fx: &mut Fwd, x: Var) -> Result<Var> {
        let w = fx.param(self.weight);
        let b = fx.param(self.bias);
        let xw = fx.graph.matmul(x, w)?;
        fx.graph.add_bias(xw, b)
    }

    pub fn forward_relu(&self, fx: &mut Fwd, x: Var) -> Result<Var> {
        let y = self.forward(fx, x)?;
        Ok(fx.graph.relu(y))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[dim], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, fx: &mut Fwd, x: Var) -> Result<Var> {
        let g = fx.param(self.gain);
        let b = fx.param(self.bias);
        fx.graph.layer_norm(x, g, b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NlbParams {
    pub theta: Linear,
    pub phi: Linear,
    pub g: Linear,
    pub out: Linear,
    pub ln_in: LayerNorm,
    pub ln_out: LayerNorm,
    pub dropout: f64,
    pub attn_dim: usize,
}

impl NlbParams {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, attn_dim: usize, dropout: f64, rng: &mut Rng) -> Self {
        NlbParams {
            theta: Linear::new(store, &format!("{name}.theta"), dim, attn_dim, rng),
            phi: Linear::new(store, &format!("{name}.phi"), dim, attn_dim, rng),
            g: Linear::new(store, &format!("{name}.g"), dim, attn_dim, rng),
            out: Linear::new(store, &format!("{name}.out"), attn_dim, dim, rng),
            ln_in: LayerNorm::new(store, &format!("{name}.ln_in"), dim),
            ln_out: LayerNorm::new(store, &format!("{name}.ln_out"), dim),
            dropout,
            attn_dim,
        }
    }
}

/// Output of one attention unit. `attention` is `[Kq, Kc]` when the unit is a real NLB.
pub struct NlbOutput {
    pub out: Var,
    pub attention: Option<Var>,
}

/// How banks are related inside a coupling block.
#[derive(Clone, Debug, PartialEq)]
pub enum Attention {
    Nlb(NlbParams),
    /// Ablation: per-row `relu(W [query_row, max(context)] + b)` instead of attention.
    ConcatLinear(Linear),
}

impl Attention {
    pub fn forward(&self, fx: &mut Fwd, context: Var, query: Var) -> Result<NlbOutput> {
        match self {
            Attention::Nlb(p) => nlb_forward(fx, context, query, p),
            Attention::ConcatLinear(lin) => {
                let ctx = fx.graph.max_over_axis(context, 0)?;
                let rows = fx.graph.value(query).rows();
                let query = as_matrix(fx.graph, query)?;
                let rep = fx.graph.repeat_rows(ctx, rows)?;
                let cat = fx.graph.concat(&[query, rep], 1)?;
                Ok(NlbOutput {
                    out: lin.forward_relu(fx, cat)?,
                    attention: None,
                })
            }
        }
    }
}

fn as_matrix(g: &mut Graph, x: Var) -> Result<Var> {
    let v = g.value(x);
    if v.rank() == 1 {
        let n = v.len();
        g.reshape(x, &[1, n])
    } else {
        Ok(x)
    }
}

pub fn nlb_forward(fx: &mut Fwd, context: Var, query: Var, p: &NlbParams) -> Result<NlbOutput> {
    let (cd, qd) = (fx.graph.value(context).cols(), fx.graph.value(query).cols());
    if cd != p.theta.fan_in || qd != p.theta.fan_in {
        return Err(Error::Dimension {
            op: "nlb_forward",
            left: fx.graph.value(context).shape().to_vec(),
            right: fx.graph.value(query).shape().to_vec(),
        });
    }
    let q_n = p.ln_in.forward(fx, query)?;
    let c_n = p.ln_in.forward(fx, context)?;
    let theta = p.theta.forward(fx, q_n)?;
    let phi = p.phi.forward(fx, c_n)?;
    let g = p.g.forward(fx, c_n)?;
    let phi_t = fx.graph.transpose(phi)?;
    let scores = fx.graph.matmul(theta, phi_t)?;
    let scores = fx.graph.scale(scores, 1.0 / (p.attn_dim as f64).sqrt());
    let attention = fx.graph.softmax(scores, 1)?;
    let mixed = fx.graph.matmul(attention, g)?;
    let branch = p.out.forward(fx, mixed)?;
    let branch = fx.graph.dropout(branch, p.dropout, fx.training, fx.rng)?;
    let res = fx.graph.add(query, branch)?;
    Ok(NlbOutput {
        out: p.ln_out.forward(fx, res)?,
        attention: Some(attention),
    })
}

/// Which banks a coupling block relates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coupling {
    /// `S' = NLB(S, S)`, `R' = NLB(S', R)`.
    #[default]
    Full,
    /// Spanning with spanning only: `R' = NLB(S', S')`.
    SpanningOnly,
    /// Recent with recent only: `S` is replaced by `R` inside the block.
    RecentOnly,
    /// No attention at all: both outputs from concatenated max-pooled `R` and `S`.
    None,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CbParams {
    pub self_attn: Attention,
    pub cross_attn: Attention,
    pub fuse_r: Linear,
    pub fuse_s: Linear,
    pub coupling: Coupling,
}

pub struct CbOutput {
    pub r2: Var,
    pub s2: Var,
}

pub fn cb_forward(fx: &mut Fwd, recent: Var, spanning: Var, p: &CbParams) -> Result<CbOutput> {
    let (r_pool, s_prime_pool, r_prime_pool) = match p.coupling {
        Coupling::None => {
            let r = fx.graph.max_over_axis(recent, 0)?;
            let s = fx.graph.max_over_axis(spanning, 0)?;
            let joint = cat(fx, r, s)?;
            let r2 = p.fuse_r.forward_relu(fx, joint)?;
            let s2 = p.fuse_s.forward_relu(fx, joint)?;
            return Ok(CbOutput { r2, s2 });
        }
        coupling => {
            let span_in = if coupling == Coupling::RecentOnly { recent } else { spanning };
            let s_prime = p.self_attn.forward(fx, span_in, span_in)?.out;
            let query = if coupling == Coupling::SpanningOnly { s_prime } else { recent };
            let r_prime = p.cross_attn.forward(fx, s_prime, query)?.out;
            (
                fx.graph.max_over_axis(recent, 0)?,
                fx.graph.max_over_axis(s_prime, 0)?,
                fx.graph.max_over_axis(r_prime, 0)?,
            )
        }
    };
    let r_in = cat(fx, r_prime_pool, r_pool)?;
    let s_in = cat(fx, r_prime_pool, s_prime_pool)?;
    Ok(CbOutput {
        r2: p.fuse_r.forward_relu(fx, r_in)?,
        s2: p.fuse_s.forward_relu(fx, s_in)?,
    })
}

fn cat(fx: &mut Fwd, a: Var, b: Var) -> Result<Var> {
    fx.graph.concat(&[a, b], 0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TabParams {
    pub cbs: Vec<CbParams>,
    pub fuse_recent: Linear,
}

pub struct TabOutput {
    pub r3: Var,
    pub s3: Var,
}

/// One aggregation block: `spanning[k]` is paired with `p.cbs[k]`.
pub fn tab_forward(fx: &mut Fwd, recent: Var, spanning: &[Var], p: &TabParams) -> Result<TabOutput> {
    if spanning.len() != p.cbs.len() {
        return Err(Error::config(format!(
            "{} spanning scales for {} coupling blocks",
            spanning.len(),
            p.cbs.len()
        )));
    }
    let mut r2s = Vec::with_capacity(spanning.len());
    let mut s2s = Vec::with_capacity(spanning.len());
    for (&s, cb) in spanning.iter().zip(&p.cbs) {
        let o = cb_forward(fx, recent, s, cb)?;
        r2s.push(o.r2);
        s2s.push(o.s2);
    }
    let r_cat = fx.graph.concat(&r2s, 0)?;
    let r3 = p.fuse_recent.forward_relu(fx, r_cat)?;
    let stacked = fx.graph.stack(&s2s)?;
    let s3 = fx.graph.max_over_axis(stacked, 0)?;
    Ok(TabOutput { r3, s3 })
}

/// Structural ablations of the aggregation stack.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    /// Replace every NLB with concatenation + linear.
    #[serde(default)]
    pub no_nlb: bool,
    #[serde(default)]
    pub coupling: Coupling,
    /// Each TAB uses only the first spanning scale.
    #[serde(default)]
    pub single_cb: bool,
    /// A single TAB over the first recent start.
    #[serde(default)]
    pub single_tab: bool,
}

/// Widths of the aggregation stack.
#[derive(Clone, Copy, Debug)]
pub struct StackDims {
    pub input: usize,
    pub attn: usize,
    pub hidden: usize,
    pub dropout: f64,
}

pub fn new_attention(store: &mut ParamStore, name: &str, dims: StackDims, variant: &Variant, rng: &mut Rng) -> Attention {
    if variant.no_nlb {
        Attention::ConcatLinear(Linear::new(store, name, 2 * dims.input, dims.input, rng))
    } else {
        Attention::Nlb(NlbParams::new(store, name, dims.input, dims.attn, dims.dropout, rng))
    }
}

pub fn new_cb(store: &mut ParamStore, name: &str, dims: StackDims, variant: &Variant, rng: &mut Rng) -> CbParams {
    CbParams {
        self_attn: new_attention(store, &format!("{name}.nlb_self"), dims, variant, rng),
        cross_attn: new_attention(store, &format!("{name}.nlb_cross"), dims, variant, rng),
        fuse_r: Linear::new(store, &format!("{name}.fuse_r"), 2 * dims.input, dims.hidden, rng),
        fuse_s: Linear::new(store, &format!("{name}.fuse_s"), 2 * dims.input, dims.hidden, rng),
        coupling: variant.coupling,
    }
}

pub fn new_tab(
    store: &mut ParamStore,
    name: &str,
    n_scales: usize,
    dims: StackDims,
    variant: &Variant,
    rng: &mut Rng,
) -> TabParams {
    let cbs = (0..n_scales)
        .map(|k| new_cb(store, &format!("{name}.cb{k}"), dims, variant, rng))
        .collect();
    TabParams {
        cbs,
        fuse_recent: Linear::new(store, &format!("{name}.fuse_recent"), n_scales * dims.hidden, dims.hidden, rng),
    }
}
