//! Property and oracle checks shared by the focused tests and the acceptance run.

use tagg::autodiff::Graph;
use tagg::blocks::{new_cb, new_tab, nlb_forward, Coupling, Fwd, NlbParams, StackDims, Variant};
use tagg::heads::{ensemble_infer, ensemble_scores, Model, ModelConfig, ModelShape};
use tagg::metrics::{class_mean_accuracy, dense_protocol, frame_accuracy, topk_accuracy, SegAccumulator};
use tagg::params::ParamStore;
use tagg::rng::Rng;
use tagg::snippets::{FrameSequence, Pooling, SnippetBank};
use tagg::tensor::Tensor;

use super::*;

/// Largest `|forward - oracle|` per block family.
pub fn block_oracle_diffs(seed: u64) -> Vec<(String, f64)> {
    let mut rng = Rng::stream(seed, 0x0AC1E);
    let mut out = Vec::new();
    let d = 2 + rng.below(5);
    let attn = 1 + rng.below(4);
    let h = 1 + rng.below(6);
    let t = |rows: usize| random_tensor(&[rows, d], &mut Rng::stream(seed, rows as u64 * 7919 + d as u64));

    // NLB on several context/query sizes, including a singleton context.
    let mut worst = 0.0f64;
    for (kq, kc) in [(1, 1), (3, 1), (2, 5), (4, 4)] {
        let mut store = ParamStore::new();
        let p = NlbParams::new(&mut store, "nlb", d, attn, 0.3, &mut rng);
        randomize(&mut store, &mut rng, 0.7);
        let (q, c) = (t(kq), t(kc + 10));
        let c = Tensor::new(&[kc, d], c.data()[..kc * d].to_vec()).unwrap();
        let mut g = Graph::new();
        let mut r = Rng::new(0);
        let (o, a) = {
            let mut fx = Fwd::new(&mut g, &store, false, &mut r);
            let (cv, qv) = (fx.graph.constant(c.clone()), fx.graph.constant(q.clone()));
            let o = nlb_forward(&mut fx, cv, qv, &p).unwrap();
            (o.out, o.attention.unwrap())
        };
        let (eo, ea) = nlb(&store, &p, &to_mat(&c), &to_mat(&q));
        let flat = |m: &Mat| m.concat();
        worst = worst.max(max_abs_diff(g.value(o).data(), &flat(&eo)));
        worst = worst.max(max_abs_diff(g.value(a).data(), &flat(&ea)));
    }
    out.push(("nlb".to_string(), worst));

    let dims = StackDims {
        input: d,
        attn,
        hidden: h,
        dropout: 0.3,
    };
    let variants = [
        ("cb_full", Coupling::Full, false),
        ("cb_spanning_only", Coupling::SpanningOnly, false),
        ("cb_recent_only", Coupling::RecentOnly, false),
        ("cb_none", Coupling::None, false),
        ("cb_concat_linear", Coupling::Full, true),
    ];
    for (name, coupling, no_nlb) in variants {
        let v = Variant {
            coupling,
            no_nlb,
            ..Default::default()
        };
        let mut store = ParamStore::new();
        let p = new_cb(&mut store, "cb", dims, &v, &mut rng);
        randomize(&mut store, &mut rng, 0.7);
        let (r, s) = (t(3), t(4));
        let mut g = Graph::new();
        let mut rr = Rng::new(0);
        let o = {
            let mut fx = Fwd::new(&mut g, &store, false, &mut rr);
            let (rv, sv) = (fx.graph.constant(r.clone()), fx.graph.constant(s.clone()));
            tagg::blocks::cb_forward(&mut fx, rv, sv, &p).unwrap()
        };
        let (er, es) = cb(&store, &p, &to_mat(&r), &to_mat(&s));
        let diff = max_abs_diff(g.value(o.r2).data(), &er).max(max_abs_diff(g.value(o.s2).data(), &es));
        out.push((name.to_string(), diff));
    }

    let mut worst = 0.0f64;
    for n_scales in 1..=3 {
        let mut store = ParamStore::new();
        let p = new_tab(&mut store, "tab", n_scales, dims, &Variant::default(), &mut rng);
        randomize(&mut store, &mut rng, 0.7);
        let r = t(2);
        let spans: Vec<Tensor> = (0..n_scales).map(|k| t(1 + 2 * k)).collect();
        let mut g = Graph::new();
        let mut rr = Rng::new(0);
        let o = {
            let mut fx = Fwd::new(&mut g, &store, false, &mut rr);
            let rv = fx.graph.constant(r.clone());
            let sv: Vec<_> = spans.iter().map(|s| fx.graph.constant(s.clone())).collect();
            tagg::blocks::tab_forward(&mut fx, rv, &sv, &p).unwrap()
        };
        let span_m: Vec<Mat> = spans.iter().map(to_mat).collect();
        let (er, es) = tab(&store, &p, &to_mat(&r), &span_m);
        worst = worst
            .max(max_abs_diff(g.value(o.r3).data(), &er))
            .max(max_abs_diff(g.value(o.s3).data(), &es));
    }
    out.push(("tab".to_string(), worst));
    out
}

/// Names of metrics that differ from their brute-force definitions on a
/// random corpus of at most five sequences. Comparisons are exact.
pub fn metric_mismatches(seed: u64) -> Vec<String> {
    let mut rng = Rng::stream(seed, 0xB0B);
    let mut bad = Vec::new();
    let n_seq = 1 + rng.below(5);
    let n_cls = 2 + rng.below(4);

    // Scores drawn from a few levels so ties occur.
    let n = 1 + rng.below(20);
    let scores: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..n_cls).map(|_| rng.below(4) as f64 * 0.25).collect())
        .collect();
    let targets: Vec<usize> = (0..n).map(|_| rng.below(n_cls)).collect();
    for k in 1..=n_cls {
        if topk_accuracy(&scores, &targets, k).unwrap() != brute_topk(&scores, &targets, k) {
            bad.push(format!("top{k}"));
        }
    }

    let mut corpus = Vec::new();
    for _ in 0..n_seq {
        let len = 4 + rng.below(20);
        let mut gt = Vec::with_capacity(len);
        while gt.len() < len {
            let a = rng.below(n_cls);
            let run = 1 + rng.below(6);
            gt.extend(std::iter::repeat(a).take(run.min(len - gt.len())));
        }
        // Prediction: ground truth with shifted boundaries and a few flipped frames.
        let shift = rng.below(3);
        let mut pred: Vec<usize> = (0..len).map(|i| gt[i.saturating_sub(shift)]).collect();
        for p in pred.iter_mut() {
            if rng.uniform() < 0.15 {
                *p = rng.below(n_cls);
            }
        }
        corpus.push((pred, gt));
    }

    let (all_p, all_g): (Vec<usize>, Vec<usize>) = (
        corpus.iter().flat_map(|c| c.0.clone()).collect(),
        corpus.iter().flat_map(|c| c.1.clone()).collect(),
    );
    if class_mean_accuracy(&all_p, &all_g).unwrap() != brute_class_mean(&all_p, &all_g) {
        bad.push("class_mean".into());
    }
    let brute_acc = 100.0 * all_p.iter().zip(&all_g).filter(|(a, b)| a == b).count() as f64 / all_g.len() as f64;
    if frame_accuracy(&all_p, &all_g).unwrap() != brute_acc {
        bad.push("frame_accuracy".into());
    }

    let mut acc = SegAccumulator::default();
    for (p, g) in &corpus {
        acc.add(p, g).unwrap();
    }
    let got = acc.finish();
    let (f1, edit, accuracy) = brute_seg_scores(&corpus);
    if got.f1 != f1 {
        bad.push(format!("f1 {:?} vs {:?}", got.f1, f1));
    }
    if got.edit != edit {
        bad.push(format!("edit {} vs {}", got.edit, edit));
    }
    if got.accuracy != accuracy {
        bad.push("segmentation accuracy".into());
    }

    // Dense table: the predictor replays the stored prediction; the oracle pools the same spans.
    let seqs: Vec<FrameSequence> = corpus
        .iter()
        .map(|(_, g)| {
            FrameSequence::new(vec![0.0; g.len()], 1, 1.0)
                .unwrap()
                .with_labels(g.clone())
                .unwrap()
        })
        .collect();
    let (obs, preds) = ([0.2, 0.3], [0.1, 0.2, 0.3, 0.5]);
    let table = dense_protocol(&seqs, &obs, &preds, |seq, t_obs, len| {
        let k = seqs.iter().position(|s| std::ptr::eq(s, seq)).unwrap();
        Ok(corpus[k].0[t_obs..t_obs + len].to_vec())
    });
    let mut expect = Vec::new();
    for &o in &obs {
        for &p in &preds {
            let (mut pp, mut gg) = (Vec::new(), Vec::new());
            for (pred, gt) in &corpus {
                let t = gt.len();
                let t_obs = (o * t as f64).floor() as usize;
                let len = (p * (t - t_obs) as f64).floor() as usize;
                if t_obs >= 2 && len > 0 {
                    pp.extend_from_slice(&pred[t_obs..t_obs + len]);
                    gg.extend_from_slice(&gt[t_obs..t_obs + len]);
                }
            }
            expect.push((!gg.is_empty()).then(|| brute_class_mean(&pp, &gg)));
        }
    }
    match table {
        Ok(t) => {
            let got: Vec<Option<f64>> = t.iter().map(|e| Some(e.class_mean)).collect();
            if got != expect {
                bad.push(format!("dense table {got:?} vs {expect:?}"));
            }
        }
        Err(_) => {
            if expect.iter().all(Option::is_some) {
                bad.push("dense table errored on a valid corpus".into());
            }
        }
    }
    bad
}

/// `(max |row sum - 1|, max |pre-affine row mean|, singleton context uniform)`.
pub fn normalization_invariants(seed: u64) -> (f64, f64, bool) {
    let mut rng = Rng::stream(seed, 0x50F7);
    let rows = 1 + rng.below(6);
    let cols = 1 + rng.below(9);
    let spread = [1.0, 30.0, 300.0][rng.below(3)];
    let offset = rng.normal() * 1e3;
    let data: Vec<f64> = (0..rows * cols).map(|_| offset + spread * rng.normal()).collect();
    let x = Tensor::new(&[rows, cols], data).unwrap();

    let mut g = Graph::new();
    let xv = g.constant(x);
    let s1 = g.softmax(xv, 1).unwrap();
    let s0 = g.softmax(xv, 0).unwrap();
    let mut sum_err = 0.0f64;
    for r in 0..rows {
        sum_err = sum_err.max((g.value(s1).row(r).iter().sum::<f64>() - 1.0).abs());
    }
    for c in 0..cols {
        let col: f64 = (0..rows).map(|r| g.value(s0).at(r, c)).sum();
        sum_err = sum_err.max((col - 1.0).abs());
    }

    let gain = g.constant(Tensor::full(&[cols], 1.0));
    let bias = g.constant(Tensor::zeros(&[cols]));
    let ln = g.layer_norm(xv, gain, bias).unwrap();
    let mut mean_err = 0.0f64;
    for r in 0..rows {
        mean_err = mean_err.max((g.value(ln).row(r).iter().sum::<f64>() / cols as f64).abs());
    }

    let d = 2 + rng.below(5);
    let mut store = ParamStore::new();
    let p = NlbParams::new(&mut store, "nlb", d, 1 + rng.below(3), 0.0, &mut rng);
    randomize(&mut store, &mut rng, 1.0);
    let kq = 1 + rng.below(4);
    let q = random_tensor(&[kq, d], &mut rng);
    let c = random_tensor(&[1, d], &mut rng);
    let mut g = Graph::new();
    let mut r = Rng::new(0);
    let mut fx = Fwd::new(&mut g, &store, false, &mut r);
    let (cv, qv) = (fx.graph.constant(c), fx.graph.constant(q));
    let a = nlb_forward(&mut fx, cv, qv, &p).unwrap().attention.unwrap();
    let uniform = g.value(a).data().iter().all(|&w| w == 1.0);
    (sum_err, mean_err, uniform)
}

/// Number of random cases (out of `cases`) where reordering the ensemble
/// members or shifting one member's logits changes the decision, plus the
/// largest score change seen.
pub fn ensemble_invariance(seed: u64, cases: usize) -> (usize, f64) {
    let mut rng = Rng::stream(seed, 0xE25);
    let (mut failures, mut worst) = (0usize, 0.0f64);
    for _ in 0..cases {
        let m = 1 + rng.below(5);
        let n = 2 + rng.below(9);
        let logits: Vec<Vec<f64>> = (0..m).map(|_| (0..n).map(|_| 3.0 * rng.normal()).collect()).collect();
        let base = ensemble_scores(&logits).unwrap();
        let choice = ensemble_infer(&logits).unwrap();

        let mut perm = logits.clone();
        rng.shuffle(&mut perm);
        let mut shifted = logits.clone();
        for row in shifted.iter_mut() {
            let c = rng.uniform_range(-50.0, 50.0);
            row.iter_mut().for_each(|v| *v += c);
        }
        for variant in [&perm, &shifted] {
            let s = ensemble_scores(variant).unwrap();
            worst = worst.max(max_abs_diff(&s, &base));
            if ensemble_infer(variant).unwrap() != choice {
                failures += 1;
            }
        }
    }
    (failures, worst)
}

/// Action logits of a full model against the oracle TAB plus a linear head.
pub fn model_logit_diff(seed: u64) -> f64 {
    let mut rng = Rng::stream(seed, 0x10C);
    let shape = ModelShape {
        input_dim: 3,
        n_actions: 4,
        n_activities: 2,
        n_recent: 2,
        n_scales: 2,
    };
    let cfg = ModelConfig {
        hidden: 5,
        attn_dim: 2,
        ..Default::default()
    };
    let mut model = Model::new(shape, cfg, None, seed).unwrap();
    randomize(model.params_mut(), &mut rng, 0.7);
    let bank = SnippetBank {
        recent: vec![random_tensor(&[2, 3], &mut rng), random_tensor(&[3, 3], &mut rng)],
        spanning: vec![random_tensor(&[2, 3], &mut rng), random_tensor(&[4, 3], &mut rng)],
        pooling: Pooling::Max,
    };
    let mut r = Rng::new(0);
    let got = model.classify(&bank, None, false, &mut r).unwrap();
    // Parameters are looked up by name so the oracle does not reuse the model's wiring.
    let store = model.params();
    let lin = |name: &str, x: &[f64]| -> Vec<f64> {
        let w = store.get(store.id(&format!("{name}.weight")).unwrap());
        let b = store.get(store.id(&format!("{name}.bias")).unwrap());
        (0..b.len())
            .map(|o| b.data()[o] + (0..x.len()).map(|i| x[i] * w.at(i, o)).sum::<f64>())
            .collect()
    };
    let mut worst = 0.0f64;
    let mut s3_all = Vec::new();
    for (k, recent) in bank.recent.iter().enumerate() {
        let p = tab_params_by_name(store, &format!("tab{k}"), 2);
        let spans: Vec<Mat> = bank.spanning.iter().map(to_mat).collect();
        let (r3, s3) = tab(store, &p, &to_mat(recent), &spans);
        worst = worst.max(max_abs_diff(got.action_logits[k].data(), &lin("action_head", &r3)));
        s3_all.extend(s3);
    }
    let z = got.activity_logits.unwrap();
    worst.max(max_abs_diff(z.data(), &lin("activity_head", &s3_all)))
}

fn tab_params_by_name(store: &ParamStore, name: &str, n_scales: usize) -> tagg::blocks::TabParams {
    use tagg::blocks::{Attention, CbParams, LayerNorm, Linear};
    let lin = |n: &str| {
        let w = store.id(&format!("{n}.weight")).unwrap();
        let shape = store.get(w).shape().to_vec();
        Linear {
            weight: w,
            bias: store.id(&format!("{n}.bias")).unwrap(),
            fan_in: shape[0],
            fan_out: shape[1],
        }
    };
    let ln = |n: &str| LayerNorm {
        gain: store.id(&format!("{n}.gain")).unwrap(),
        bias: store.id(&format!("{n}.bias")).unwrap(),
    };
    let nlb = |n: &str| {
        let theta = lin(&format!("{n}.theta"));
        Attention::Nlb(NlbParams {
            attn_dim: theta.fan_out,
            theta,
            phi: lin(&format!("{n}.phi")),
            g: lin(&format!("{n}.g")),
            out: lin(&format!("{n}.out")),
            ln_in: ln(&format!("{n}.ln_in")),
            ln_out: ln(&format!("{n}.ln_out")),
            dropout: 0.0,
        })
    };
    tagg::blocks::TabParams {
        cbs: (0..n_scales)
            .map(|k| CbParams {
                self_attn: nlb(&format!("{name}.cb{k}.nlb_self")),
                cross_attn: nlb(&format!("{name}.cb{k}.nlb_cross")),
                fuse_r: lin(&format!("{name}.cb{k}.fuse_r")),
                fuse_s: lin(&format!("{name}.cb{k}.fuse_s")),
                coupling: Coupling::Full,
            })
            .collect(),
        fuse_recent: lin(&format!("{name}.fuse_recent")),
    }
}
