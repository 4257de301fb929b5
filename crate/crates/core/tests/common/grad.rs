//! Finite-difference checks of every differentiable op, every parameterized
//! block and the full model losses.

use tagg::autodiff::{Graph, Var};
use tagg::blocks::{new_cb, new_tab, Coupling, Fwd, LayerNorm, Linear, NlbParams, StackDims, Variant};
use tagg::heads::{ClassTargets, DenseConfig, DenseTargets, Model, ModelConfig, ModelShape};
use tagg::params::ParamStore;
use tagg::recurrent::LstmCell;
use tagg::rng::Rng;
use tagg::snippets::{Pooling, SnippetBank};
use tagg::tensor::Tensor;
use tagg::train::{sample_loss, Sample, Target};

use super::{flatten, numeric_grad, numeric_param_grad, random_tensor, randomize, rel_err};

/// `sum(out * w)` with a fixed random `w`, or `out` itself when scalar.
fn weighted_sum(g: &mut Graph, out: Var, seed: u64) -> Var {
    let v = g.value(out);
    if v.len() == 1 && v.rank() == 0 {
        return out;
    }
    let w = random_tensor(&v.shape().to_vec(), &mut Rng::stream(seed, 0x3E16));
    let w = g.constant(w);
    let prod = g.mul(out, w).unwrap();
    g.sum(prod)
}

type Build<'a> = &'a dyn Fn(&mut Graph, &[Var], &mut Rng) -> tagg::Result<Var>;

/// Checks gradients with respect to the op inputs.
fn op_check(seed: u64, inputs: Vec<Tensor>, build: Build) -> f64 {
    let run = |ts: &[Tensor], grads: bool| -> (f64, Vec<f64>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.leaf(t.clone())).collect();
        let mut rng = Rng::stream(seed, 0xD0);
        let out = build(&mut g, &vars, &mut rng).unwrap();
        let loss = weighted_sum(&mut g, out, seed);
        let value = g.value(loss).item();
        if !grads {
            return (value, Vec::new());
        }
        let gr = g.backward(loss).unwrap();
        let flat = vars
            .iter()
            .flat_map(|&v| gr.get(v).map_or_else(|| vec![0.0; g.value(v).len()], |t| t.data().to_vec()))
            .collect();
        (value, flat)
    };
    let (_, analytic) = run(&inputs, true);
    let shapes: Vec<Vec<usize>> = inputs.iter().map(|t| t.shape().to_vec()).collect();
    let mut x = flatten(&inputs);
    let numeric = numeric_grad(&mut x, |x| {
        let mut off = 0;
        let ts: Vec<Tensor> = shapes
            .iter()
            .map(|s| {
                let n: usize = s.iter().product();
                let t = Tensor::new(s, x[off..off + n].to_vec()).unwrap();
                off += n;
                t
            })
            .collect();
        run(&ts, false).0
    });
    rel_err(&analytic, &numeric)
}

type Forward<'a> = &'a dyn Fn(&mut Fwd) -> tagg::Result<Var>;

/// Checks gradients with respect to every parameter in `store`.
fn param_check(seed: u64, store: &mut ParamStore, forward: Forward) -> f64 {
    let eval = |s: &ParamStore, grads: bool| -> (f64, Vec<f64>) {
        let mut g = Graph::new();
        let mut rng = Rng::stream(seed, 0xD1);
        let out = {
            let mut fx = Fwd::new(&mut g, s, true, &mut rng);
            forward(&mut fx).unwrap()
        };
        let loss = weighted_sum(&mut g, out, seed);
        let value = g.value(loss).item();
        if !grads {
            return (value, Vec::new());
        }
        let gr = g.backward(loss).unwrap();
        (value, flatten(&gr.params(s)))
    };
    let (_, analytic) = eval(store, true);
    let numeric = numeric_param_grad(store, |s| eval(s, false).0);
    rel_err(&analytic, &numeric)
}

fn away_from_zero(t: Tensor) -> Tensor {
    let data = t.data().iter().map(|&v| v + 0.2 * v.signum()).collect();
    Tensor::new(t.shape(), data).unwrap()
}

fn const_of(fx: &mut Fwd, t: &Tensor) -> Var {
    fx.graph.constant(t.clone())
}

/// All checks for one seed as `(name, relative error)`.
pub fn gradient_suite(seed: u64) -> Vec<(String, f64)> {
    let mut rng = Rng::stream(seed, 0x6AD);
    let mut r = |shape: &[usize]| random_tensor(shape, &mut rng);
    let mut out: Vec<(String, f64)> = Vec::new();
    let mut push = |name: &str, e: f64| out.push((name.to_string(), e));

    push("matmul", op_check(seed, vec![r(&[3, 4]), r(&[4, 2])], &|g, v, _| g.matmul(v[0], v[1])));
    push("matmul_vec", op_check(seed, vec![r(&[4]), r(&[4, 3])], &|g, v, _| g.matmul(v[0], v[1])));
    push("transpose", op_check(seed, vec![r(&[3, 4])], &|g, v, _| g.transpose(v[0])));
    push("reshape", op_check(seed, vec![r(&[3, 4])], &|g, v, _| g.reshape(v[0], &[2, 6])));
    push("add", op_check(seed, vec![r(&[3, 4]), r(&[3, 4])], &|g, v, _| g.add(v[0], v[1])));
    push("sub", op_check(seed, vec![r(&[3, 4]), r(&[3, 4])], &|g, v, _| g.sub(v[0], v[1])));
    push("mul", op_check(seed, vec![r(&[3, 4]), r(&[3, 4])], &|g, v, _| g.mul(v[0], v[1])));
    push("add_bias", op_check(seed, vec![r(&[3, 4]), r(&[4])], &|g, v, _| g.add_bias(v[0], v[1])));
    push("scale", op_check(seed, vec![r(&[5])], &|g, v, _| Ok(g.scale(v[0], -1.7))));
    push("relu", op_check(seed, vec![away_from_zero(r(&[3, 4]))], &|g, v, _| Ok(g.relu(v[0]))));
    push("tanh", op_check(seed, vec![r(&[3, 4])], &|g, v, _| Ok(g.tanh(v[0]))));
    push("sigmoid", op_check(seed, vec![r(&[3, 4])], &|g, v, _| Ok(g.sigmoid(v[0]))));
    push("softmax_rows", op_check(seed, vec![r(&[3, 4])], &|g, v, _| g.softmax(v[0], 1)));
    push("softmax_cols", op_check(seed, vec![r(&[3, 4])], &|g, v, _| g.softmax(v[0], 0)));
    push(
        "layer_norm",
        op_check(seed, vec![r(&[3, 5]), r(&[5]), r(&[5])], &|g, v, _| g.layer_norm(v[0], v[1], v[2])),
    );
    push("concat_rows", op_check(seed, vec![r(&[2, 3]), r(&[1, 3])], &|g, v, _| g.concat(&[v[0], v[1]], 0)));
    push("concat_cols", op_check(seed, vec![r(&[2, 3]), r(&[2, 2])], &|g, v, _| g.concat(&[v[0], v[1]], 1)));
    push("stack", op_check(seed, vec![r(&[4]), r(&[4]), r(&[4])], &|g, v, _| g.stack(v)));
    push("max_rows", op_check(seed, vec![r(&[4, 3])], &|g, v, _| g.max_over_axis(v[0], 0)));
    push("max_cols", op_check(seed, vec![r(&[4, 3])], &|g, v, _| g.max_over_axis(v[0], 1)));
    push(
        "dropout",
        op_check(seed, vec![r(&[3, 4])], &|g, v, rng| g.dropout(v[0], 0.3, true, rng)),
    );
    push(
        "cross_entropy",
        op_check(seed, vec![r(&[5])], &|g, v, _| g.cross_entropy(v[0], (seed % 5) as usize)),
    );
    push("sum", op_check(seed, vec![r(&[3, 4])], &|g, v, _| Ok(g.sum(v[0]))));
    push("add_all", op_check(seed, vec![r(&[3]), r(&[3]), r(&[3])], &|g, v, _| g.add_all(v)));
    push("slice", op_check(seed, vec![r(&[7])], &|g, v, _| g.slice(v[0], 2, 3)));
    push("repeat_rows", op_check(seed, vec![r(&[3])], &|g, v, _| g.repeat_rows(v[0], 4)));

    let mut prng = Rng::stream(seed, 0x9A);
    let (d, attn, h) = (4, 3, 5);
    let x = r(&[3, d]);
    let ctx = r(&[4, d]);

    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, "lin", d, h, &mut prng);
    randomize(&mut store, &mut prng, 0.5);
    push("linear", param_check(seed, &mut store, &|fx| {
        let v = const_of(fx, &x);
        lin.forward(fx, v)
    }));

    let mut store = ParamStore::new();
    let ln = LayerNorm::new(&mut store, "ln", d);
    randomize(&mut store, &mut prng, 0.5);
    push("layer_norm_params", param_check(seed, &mut store, &|fx| {
        let v = const_of(fx, &x);
        ln.forward(fx, v)
    }));

    let mut store = ParamStore::new();
    let nlb = NlbParams::new(&mut store, "nlb", d, attn, 0.2, &mut prng);
    randomize(&mut store, &mut prng, 0.5);
    push("nlb", param_check(seed, &mut store, &|fx| {
        let (c, q) = (const_of(fx, &ctx), const_of(fx, &x));
        Ok(tagg::blocks::nlb_forward(fx, c, q, &nlb)?.out)
    }));

    let dims = StackDims {
        input: d,
        attn,
        hidden: h,
        dropout: 0.2,
    };
    let couplings = [
        ("cb_full", Coupling::Full, false),
        ("cb_spanning_only", Coupling::SpanningOnly, false),
        ("cb_recent_only", Coupling::RecentOnly, false),
        ("cb_none", Coupling::None, false),
        ("cb_concat_linear", Coupling::Full, true),
    ];
    for (name, coupling, no_nlb) in couplings {
        let variant = Variant {
            coupling,
            no_nlb,
            ..Default::default()
        };
        let mut store = ParamStore::new();
        let cb = new_cb(&mut store, "cb", dims, &variant, &mut prng);
        randomize(&mut store, &mut prng, 0.5);
        let e = param_check(seed, &mut store, &|fx| {
            let (rr, ss) = (const_of(fx, &x), const_of(fx, &ctx));
            let o = tagg::blocks::cb_forward(fx, rr, ss, &cb)?;
            fx.graph.concat(&[o.r2, o.s2], 0)
        });
        push(name, e);
    }

    let mut store = ParamStore::new();
    let tab = new_tab(&mut store, "tab", 2, dims, &Variant::default(), &mut prng);
    randomize(&mut store, &mut prng, 0.5);
    let ctx2 = r(&[2, d]);
    push("tab", param_check(seed, &mut store, &|fx| {
        let rr = const_of(fx, &x);
        let spans = [const_of(fx, &ctx), const_of(fx, &ctx2)];
        let o = tagg::blocks::tab_forward(fx, rr, &spans, &tab)?;
        fx.graph.concat(&[o.r3, o.s3], 0)
    }));

    let mut store = ParamStore::new();
    let cell = LstmCell::new(&mut store, "lstm", 3, 4, &mut prng);
    randomize(&mut store, &mut prng, 0.5);
    let xs = [r(&[3]), r(&[3]), r(&[3])];
    push("lstm_unrolled", param_check(seed, &mut store, &|fx| {
        let mut s = cell.zero_state(fx);
        for xt in &xs {
            let v = const_of(fx, xt);
            s = cell.step(fx, v, s)?;
        }
        fx.graph.concat(&[s.h, s.c], 0)
    }));

    let shape = ModelShape {
        input_dim: d,
        n_actions: 3,
        n_activities: 2,
        n_recent: 2,
        n_scales: 2,
    };
    let config = ModelConfig {
        hidden: h,
        attn_dim: attn,
        dropout: 0.2,
        ..Default::default()
    };
    let bank = SnippetBank {
        recent: vec![r(&[3, d]), r(&[2, d])],
        spanning: vec![r(&[2, d]), r(&[4, d])],
        pooling: Pooling::Max,
    };
    let model = Model::new(shape, config.clone(), None, seed).unwrap();
    let mut store = model.params().clone();
    randomize(&mut store, &mut prng, 0.5);
    let sample = Sample {
        bank: bank.clone(),
        target: Target::Class(ClassTargets {
            action: (seed % 3) as usize,
            activity: Some((seed % 2) as usize),
        }),
    };
    push("model_classification_loss", param_check(seed, &mut store, &|fx| sample_loss(&model, fx, &sample)));

    let dense_cfg = DenseConfig {
        duration_bins: 4,
        duration_interval: 2.0,
        rnn_hidden: 3,
        ..Default::default()
    };
    let model = Model::new(shape, config, Some(dense_cfg), seed).unwrap();
    let mut store = model.params().clone();
    randomize(&mut store, &mut prng, 0.5);
    let sample = Sample {
        bank,
        target: Target::Dense {
            targets: DenseTargets {
                action: 1,
                activity: Some(0),
                remaining_bin: 2,
                future: vec![(2, 1), (0, 3), (1, 0)],
            },
            elapsed: 5,
            fps: 1.0,
        },
    };
    push("model_dense_loss", param_check(seed, &mut store, &|fx| sample_loss(&model, fx, &sample)));
    out
}
