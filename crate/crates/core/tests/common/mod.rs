//! Independent oracles shared by the integration tests: straight-line forward
//! passes over plain nested vectors, brute-force metrics and finite differences.
#![allow(dead_code)]

pub mod checks;
pub mod fixtures;
pub mod grad;

use tagg::autodiff::LN_EPS;
use tagg::blocks::{Attention, CbParams, Coupling, Linear, NlbParams, TabParams, LayerNorm};
use tagg::params::ParamStore;
use tagg::rng::Rng;
use tagg::tensor::Tensor;

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

pub fn random_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.normal()).collect()).unwrap()
}

/// Replaces every parameter (including zero-initialized biases and unit gains) by random values.
pub fn randomize(store: &mut ParamStore, rng: &mut Rng, scale: f64) {
    for t in store.tensors_mut() {
        for v in t.data_mut() {
            *v = scale * rng.normal();
        }
    }
}

pub fn linear(store: &ParamStore, l: &Linear, x: &Mat) -> Mat {
    let w = store.get(l.weight);
    let b = store.get(l.bias);
    x.iter()
        .map(|row| {
            (0..l.fan_out)
                .map(|o| {
                    let mut acc = b.data()[o];
                    for i in 0..l.fan_in {
                        acc += row[i] * w.at(i, o);
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

pub fn relu(x: &Mat) -> Mat {
    x.iter().map(|r| r.iter().map(|&v| v.max(0.0)).collect()).collect()
}

pub fn layer_norm(store: &ParamStore, ln: &LayerNorm, x: &Mat) -> Mat {
    let g = store.get(ln.gain).data();
    let b = store.get(ln.bias).data();
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let sd = (var + LN_EPS).sqrt();
            row.iter().enumerate().map(|(c, v)| (v - mean) / sd * g[c] + b[c]).collect()
        })
        .collect()
}

pub fn softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn max_rows(x: &Mat) -> Vec<f64> {
    (0..x[0].len())
        .map(|c| x.iter().map(|r| r[c]).fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

/// Eval-mode non-local block; returns the output and the attention matrix.
pub fn nlb(store: &ParamStore, p: &NlbParams, context: &Mat, query: &Mat) -> (Mat, Mat) {
    let qn = layer_norm(store, &p.ln_in, query);
    let cn = layer_norm(store, &p.ln_in, context);
    let theta = linear(store, &p.theta, &qn);
    let phi = linear(store, &p.phi, &cn);
    let g = linear(store, &p.g, &cn);
    let scale = 1.0 / (p.attn_dim as f64).sqrt();
    let attn: Mat = theta
        .iter()
        .map(|t| {
            let scores: Vec<f64> = phi
                .iter()
                .map(|f| t.iter().zip(f).map(|(a, b)| a * b).sum::<f64>() * scale)
                .collect();
            softmax_row(&scores)
        })
        .collect();
    let mixed: Mat = attn
        .iter()
        .map(|w| {
            (0..p.attn_dim)
                .map(|c| w.iter().zip(&g).map(|(a, row)| a * row[c]).sum())
                .collect()
        })
        .collect();
    let branch = linear(store, &p.out, &mixed);
    let res: Mat = query
        .iter()
        .zip(&branch)
        .map(|(q, b)| q.iter().zip(b).map(|(x, y)| x + y).collect())
        .collect();
    (layer_norm(store, &p.ln_out, &res), attn)
}

pub fn attention(store: &ParamStore, a: &Attention, context: &Mat, query: &Mat) -> Mat {
    match a {
        Attention::Nlb(p) => nlb(store, p, context, query).0,
        Attention::ConcatLinear(l) => {
            let ctx = max_rows(context);
            let cat: Mat = query.iter().map(|q| [q.clone(), ctx.clone()].concat()).collect();
            relu(&linear(store, l, &cat))
        }
    }
}

fn fuse(store: &ParamStore, l: &Linear, a: &[f64], b: &[f64]) -> Vec<f64> {
    relu(&linear(store, l, &vec![[a, b].concat()])).remove(0)
}

/// Coupling block: `(R'', S'')`.
pub fn cb(store: &ParamStore, p: &CbParams, recent: &Mat, spanning: &Mat) -> (Vec<f64>, Vec<f64>) {
    if p.coupling == Coupling::None {
        let (r, s) = (max_rows(recent), max_rows(spanning));
        return (fuse(store, &p.fuse_r, &r, &s), fuse(store, &p.fuse_s, &r, &s));
    }
    let span_in = if p.coupling == Coupling::RecentOnly { recent } else { spanning };
    let s_prime = attention(store, &p.self_attn, span_in, span_in);
    let query = if p.coupling == Coupling::SpanningOnly { &s_prime } else { recent };
    let r_prime = attention(store, &p.cross_attn, &s_prime, query);
    let (rp, sp, r) = (max_rows(&r_prime), max_rows(&s_prime), max_rows(recent));
    (fuse(store, &p.fuse_r, &rp, &r), fuse(store, &p.fuse_s, &rp, &sp))
}

/// Temporal aggregation block: `(R''', S''')`.
pub fn tab(store: &ParamStore, p: &TabParams, recent: &Mat, spanning: &[Mat]) -> (Vec<f64>, Vec<f64>) {
    let outs: Vec<(Vec<f64>, Vec<f64>)> = p.cbs.iter().zip(spanning).map(|(c, s)| cb(store, c, recent, s)).collect();
    let r_cat: Vec<f64> = outs.iter().flat_map(|o| o.0.clone()).collect();
    let r3 = relu(&linear(store, &p.fuse_recent, &vec![r_cat])).remove(0);
    let s2: Mat = outs.into_iter().map(|o| o.1).collect();
    (r3, max_rows(&s2))
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Runs of equal labels as `(start, end_inclusive, label)`.
pub fn runs(labels: &[usize]) -> Vec<(usize, usize, usize)> {
    let mut out: Vec<(usize, usize, usize)> = Vec::new();
    for (t, &l) in labels.iter().enumerate() {
        match out.last_mut() {
            Some(r) if r.2 == l => r.1 = t,
            _ => out.push((t, t, l)),
        }
    }
    out
}

pub fn brute_topk(scores: &[Vec<f64>], targets: &[usize], k: usize) -> f64 {
    let mut hits = 0;
    for (s, &t) in scores.iter().zip(targets) {
        // Order classes by (score desc, index asc) and look for the target in the first k.
        let mut order: Vec<usize> = (0..s.len()).collect();
        order.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap().then(a.cmp(&b)));
        if order[..k].contains(&t) {
            hits += 1;
        }
    }
    100.0 * hits as f64 / targets.len() as f64
}

pub fn brute_class_mean(pred: &[usize], target: &[usize]) -> f64 {
    let mut classes: Vec<usize> = target.to_vec();
    classes.sort();
    classes.dedup();
    let recalls: Vec<f64> = classes
        .iter()
        .map(|&c| {
            let idx: Vec<usize> = (0..target.len()).filter(|&i| target[i] == c).collect();
            idx.iter().filter(|&&i| pred[i] == c).count() as f64 / idx.len() as f64
        })
        .collect();
    100.0 * recalls.iter().sum::<f64>() / recalls.len() as f64
}

fn brute_iou(a: (usize, usize, usize), b: (usize, usize, usize)) -> f64 {
    let frames_a: Vec<usize> = (a.0..=a.1).collect();
    let frames_b: Vec<usize> = (b.0..=b.1).collect();
    let inter = frames_a.iter().filter(|f| frames_b.contains(f)).count();
    let union = frames_a.len() + frames_b.len() - inter;
    inter as f64 / union as f64
}

/// Repeatedly takes the best remaining same-label pair (ties: lower predicted, then lower GT index).
pub fn brute_f1_counts(pred: &[usize], gt: &[usize], tau: f64) -> (usize, usize, usize) {
    let (ps, gs) = (runs(pred), runs(gt));
    let mut used_p = vec![false; ps.len()];
    let mut used_g = vec![false; gs.len()];
    let mut tp = 0;
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..ps.len() {
            for j in 0..gs.len() {
                if used_p[i] || used_g[j] || ps[i].2 != gs[j].2 {
                    continue;
                }
                let o = brute_iou(ps[i], gs[j]);
                if o < tau || o == 0.0 {
                    continue;
                }
                if best.is_none_or(|b| o > b.0) {
                    best = Some((o, i, j));
                }
            }
        }
        match best {
            Some((_, i, j)) => {
                used_p[i] = true;
                used_g[j] = true;
                tp += 1;
            }
            None => break,
        }
    }
    (tp, ps.len() - tp, gs.len() - tp)
}

/// Exponential-time edit distance by plain recursion.
pub fn brute_levenshtein(a: &[usize], b: &[usize]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let sub = brute_levenshtein(&a[1..], &b[1..]) + usize::from(a[0] != b[0]);
    let del = brute_levenshtein(&a[1..], b) + 1;
    let ins = brute_levenshtein(a, &b[1..]) + 1;
    sub.min(del).min(ins)
}

/// Corpus-level (f1 x3, edit, accuracy) by the definitions.
pub fn brute_seg_scores(corpus: &[(Vec<usize>, Vec<usize>)]) -> ([f64; 3], f64, f64) {
    let mut f1 = [0.0; 3];
    for (k, tau) in [0.1, 0.25, 0.5].into_iter().enumerate() {
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for (p, g) in corpus {
            let c = brute_f1_counts(p, g, tau);
            tp += c.0;
            fp += c.1;
            fn_ += c.2;
        }
        let denom = (2 * tp + fp + fn_) as f64;
        f1[k] = if denom == 0.0 { 0.0 } else { 100.0 * 2.0 * tp as f64 / denom };
    }
    let edits: Vec<f64> = corpus
        .iter()
        .map(|(p, g)| {
            let (pl, gl): (Vec<usize>, Vec<usize>) = (runs(p).iter().map(|r| r.2).collect(), runs(g).iter().map(|r| r.2).collect());
            100.0 * (1.0 - brute_levenshtein(&pl, &gl) as f64 / pl.len().max(gl.len()) as f64)
        })
        .collect();
    let frames: usize = corpus.iter().map(|(_, g)| g.len()).sum();
    let hits: usize = corpus.iter().map(|(p, g)| p.iter().zip(g).filter(|(a, b)| a == b).count()).sum();
    (f1, edits.iter().sum::<f64>() / edits.len() as f64, 100.0 * hits as f64 / frames as f64)
}

/// Norm-wise relative error `|a - n| / max(|a| + |n|, floor)`.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / (na + nn).max(1e-6)
}

pub const FD_STEP: f64 = 1e-5;

/// Central differences of `f` with respect to every entry of `x`.
pub fn numeric_grad(x: &mut [f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + FD_STEP;
            let up = f(x);
            x[i] = orig - FD_STEP;
            let down = f(x);
            x[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Central differences of `loss(store)` with respect to every parameter scalar.
pub fn numeric_param_grad(store: &mut ParamStore, mut loss: impl FnMut(&ParamStore) -> f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(store.num_scalars());
    for k in 0..store.tensors().len() {
        for i in 0..store.tensors()[k].len() {
            let orig = store.tensors()[k].data()[i];
            store.tensors_mut()[k].data_mut()[i] = orig + FD_STEP;
            let up = loss(store);
            store.tensors_mut()[k].data_mut()[i] = orig - FD_STEP;
            let down = loss(store);
            store.tensors_mut()[k].data_mut()[i] = orig;
            out.push((up - down) / (2.0 * FD_STEP));
        }
    }
    out
}

pub fn flatten(ts: &[Tensor]) -> Vec<f64> {
    ts.iter().flat_map(|t| t.data().iter().copied()).collect()
}
