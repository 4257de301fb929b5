//! Sample construction, the training loop, evaluation, ablations and the
//! spanning-scope sweep.

use crate::autodiff::{Graph, Var};
use crate::blocks::{Coupling, Fwd};
use crate::config::{InputMode, RunConfig, Task};
use crate::error::{Error, Result};
use crate::heads::{
    expand_segments, recognition_scope, sliding_windows, window_scope, ClassTargets, DenseConfig, DenseTargets, Model,
    ModelShape,
};
use crate::metrics::{class_mean_accuracy, dense_protocol, topk_accuracy, EvalReport, SegAccumulator};
use crate::optim::{adam_step, AdamState, GradAccumulator};
use crate::rng::Rng;
use crate::snippets::{segments_of, FrameSequence, Pooling, SnippetBank, SnippetConfig};
use crate::tensor::argmax;

/// Stream index of the epoch-shuffling generator.
const SHUFFLE_STREAM: u64 = 0x5AFF1E;

#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Class(ClassTargets),
    Dense {
        targets: DenseTargets,
        elapsed: usize,
        fps: f64,
    },
}

/// A bank together with what the model should predict from it.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub bank: SnippetBank,
    pub target: Target,
}

impl Sample {
    pub fn action(&self) -> usize {
        match &self.target {
            Target::Class(c) => c.action,
            Target::Dense { targets, .. } => targets.action,
        }
    }
}

/// Replaces features by one-hot labels in frame-GT mode.
pub fn model_input(seq: &FrameSequence, mode: InputMode, n_actions: usize) -> Result<FrameSequence> {
    match mode {
        InputMode::Features => Ok(seq.clone()),
        InputMode::FrameGt => seq.one_hot_labels(n_actions),
    }
}

/// Sizes implied by the configuration and corpus.
pub fn model_shape(cfg: &RunConfig, seqs: &[FrameSequence]) -> Result<ModelShape> {
    let first = seqs.first().ok_or_else(|| Error::arg("empty corpus"))?;
    let mut max_label = 0;
    for s in seqs {
        max_label = max_label.max(s.labels()?.iter().copied().max().unwrap_or(0));
    }
    let n_actions = cfg.n_actions.unwrap_or(max_label + 1);
    let n_activities = cfg
        .n_activities
        .unwrap_or_else(|| seqs.iter().filter_map(|s| s.activity).max().map_or(0, |m| m + 1));
    let input_dim = match cfg.input {
        InputMode::Features => first.dim(),
        InputMode::FrameGt => n_actions,
    };
    Ok(ModelShape {
        input_dim,
        n_actions,
        n_activities,
        n_recent: cfg.snippets.recent_starts.len(),
        n_scales: cfg.snippets.spanning_scales.len(),
    })
}

/// One sample per action boundary: observation ends `tau_alpha` seconds before
/// the segment starts and the target is that segment's action.
pub fn next_action_samples(seq: &FrameSequence, cfg: &SnippetConfig, tau_alpha: f64) -> Result<Vec<Sample>> {
    let tau = seq.seconds_to_frames(tau_alpha);
    let mut out = Vec::new();
    for seg in seq.segments()?.iter().skip(1) {
        let cut = match seg.start.checked_sub(tau) {
            Some(c) if c >= 2 => c,
            _ => continue,
        };
        out.push(Sample {
            bank: SnippetBank::build(seq, cut - 1, cfg)?,
            target: Target::Class(ClassTargets {
                action: seg.action,
                activity: seq.activity,
            }),
        });
    }
    Ok(out)
}

/// Targets for observing the first `t_obs` frames.
pub fn dense_targets(seq: &FrameSequence, t_obs: usize, dense: &DenseConfig) -> Result<DenseTargets> {
    let segs = seq.segments()?;
    let k = segs
        .iter()
        .position(|s| s.end + 1 >= t_obs)
        .ok_or_else(|| Error::arg(format!("cut {t_obs} beyond the sequence")))?;
    let remaining = segs[k].end + 1 - t_obs;
    Ok(DenseTargets {
        action: segs[k].action,
        activity: seq.activity,
        remaining_bin: dense.bin(remaining, seq.fps),
        future: segs[k + 1..]
            .iter()
            .map(|s| (s.action, dense.bin(s.frames(), seq.fps)))
            .collect(),
    })
}

pub fn dense_samples(seq: &FrameSequence, cfg: &SnippetConfig, dense: &DenseConfig, fractions: &[f64]) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for &f in fractions {
        let t_obs = (f * seq.len() as f64).floor() as usize;
        if t_obs < 2 || t_obs >= seq.len() {
            continue;
        }
        out.push(Sample {
            bank: SnippetBank::build(seq, t_obs - 1, cfg)?,
            target: Target::Dense {
                targets: dense_targets(seq, t_obs, dense)?,
                elapsed: t_obs,
                fps: seq.fps,
            },
        });
    }
    Ok(out)
}

/// One sample per ground-truth segment with the recognition scopes around it.
pub fn recognition_samples(seq: &FrameSequence, cfg: &SnippetConfig) -> Result<Vec<Sample>> {
    let duration = seq.len() as f64 / seq.fps;
    seq.segments()?
        .iter()
        .map(|s| {
            let scope = recognition_scope(
                s.start as f64 / seq.fps,
                (s.end + 1) as f64 / seq.fps,
                cfg.recent_starts.len(),
                duration,
            )?;
            Ok(Sample {
                bank: scope.bank(seq, cfg)?,
                target: Target::Class(ClassTargets {
                    action: s.action,
                    activity: seq.activity,
                }),
            })
        })
        .collect()
}

/// Windows every `stride` seconds, labeled by their center frame.
pub fn segmentation_samples(seq: &FrameSequence, cfg: &SnippetConfig, window: f64, stride: f64) -> Result<Vec<Sample>> {
    let labels = seq.labels()?;
    let w = seq.seconds_to_frames(window).max(1);
    let s = seq.seconds_to_frames(stride).max(1);
    sliding_windows(seq.len(), w, s)
        .into_iter()
        .map(|(a, b)| {
            let (recent, spanning) = window_scope(a, b, cfg.recent_starts.len());
            Ok(Sample {
                bank: SnippetBank::from_ranges(seq, &recent, spanning, cfg)?,
                target: Target::Class(ClassTargets {
                    action: labels[(a + b) / 2],
                    activity: seq.activity,
                }),
            })
        })
        .collect()
}

/// Training samples of `seq` (already mapped to model input) for the configured task.
pub fn task_samples(cfg: &RunConfig, seq: &FrameSequence) -> Result<Vec<Sample>> {
    match cfg.task {
        Task::NextAction => next_action_samples(seq, &cfg.snippets, cfg.anticipation.tau_alpha),
        Task::Dense => dense_samples(seq, &cfg.snippets, &cfg.dense.head, &cfg.dense.train_obs),
        Task::Recognition => recognition_samples(seq, &cfg.snippets),
        Task::Segmentation => segmentation_samples(
            seq,
            &cfg.snippets,
            cfg.segmentation.window,
            cfg.segmentation.train_stride,
        ),
    }
}

pub fn sample_loss(model: &Model, fx: &mut Fwd, sample: &Sample) -> Result<Var> {
    match &sample.target {
        Target::Class(t) => {
            let enc = model.encode(fx, &sample.bank)?;
            model.classification_loss(fx, &enc, t)
        }
        Target::Dense { targets, elapsed, fps } => model.dense_loss(fx, &sample.bank, *elapsed, *fps, targets),
    }
}

/// Loss value and parameter gradients of one sample.
pub fn sample_gradients(model: &Model, sample: &Sample, training: bool, rng: &mut Rng) -> Result<(f64, Vec<crate::tensor::Tensor>)> {
    let mut graph = Graph::new();
    let loss = {
        let mut fx = Fwd::new(&mut graph, model.params(), training, rng);
        sample_loss(model, &mut fx, sample)?
    };
    let value = graph.value(loss).item();
    let grads = graph.backward(loss)?.params(model.params());
    Ok((value, grads))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub heldout: Option<f64>,
}

/// Everything a checkpoint stores.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: RunConfig,
    pub model: Model,
    pub adam: AdamState,
    pub rng: Rng,
    pub curve: Vec<EpochLog>,
}

/// Mini-batch Adam over the task samples of `train_seqs`. When `heldout` is
/// non-empty its headline metric is logged after every epoch.
pub fn train(cfg: &RunConfig, train_seqs: &[FrameSequence], heldout: &[FrameSequence]) -> Result<TrainState> {
    cfg.validate()?;
    let shape = model_shape(cfg, train_seqs)?;
    let dense = (cfg.task == Task::Dense).then(|| cfg.dense.head.clone());
    let mut model = Model::new(shape, cfg.model.clone(), dense, cfg.seed)?;
    let mut samples = Vec::new();
    for seq in train_seqs {
        let input = model_input(seq, cfg.input, shape.n_actions)?;
        samples.extend(task_samples(cfg, &input)?);
    }
    if samples.is_empty() {
        return Err(Error::arg("corpus yields no training samples"));
    }
    log::info!("{} training samples, {} parameters", samples.len(), model.params().num_scalars());
    let mut adam = AdamState::new(model.params().tensors(), cfg.optim.lr);
    let mut shuffle = Rng::stream(cfg.seed, SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut curve = Vec::with_capacity(cfg.optim.epochs);
    for epoch in 1..=cfg.optim.epochs {
        adam.lr = cfg.optim.lr_at(epoch);
        shuffle.shuffle(&mut order);
        let mut acc = GradAccumulator::new();
        let mut total = 0.0;
        for (k, &i) in order.iter().enumerate() {
            let mut drop_rng = Rng::stream(cfg.seed, ((epoch as u64) << 32) | i as u64);
            let (loss, grads) = sample_gradients(&model, &samples[i], true, &mut drop_rng)?;
            if !loss.is_finite() {
                return Err(Error::arg(format!("non-finite loss at epoch {epoch}")));
            }
            total += loss;
            acc.add(grads);
            if acc.count() == cfg.optim.batch || k + 1 == order.len() {
                let g = acc.take_mean();
                adam_step(model.params_mut().tensors_mut(), &g, &mut adam)?;
            }
        }
        let heldout_score = if heldout.is_empty() {
            None
        } else {
            Some(evaluate(&model, cfg, heldout)?.headline())
        };
        let log = EpochLog {
            epoch,
            lr: adam.lr,
            loss: total / samples.len() as f64,
            heldout: heldout_score,
        };
        log::info!(
            "epoch {} lr {} loss {:.6} heldout {}",
            log.epoch,
            log.lr,
            log.loss,
            log.heldout.map_or("-".to_string(), |h| format!("{h:.2}"))
        );
        curve.push(log);
    }
    Ok(TrainState {
        config: cfg.snapshot(),
        model,
        adam,
        rng: shuffle,
        curve,
    })
}

/// Splits off every `every`-th sequence (by position) as held-out data.
pub fn holdout_split(seqs: Vec<FrameSequence>, every: usize) -> (Vec<FrameSequence>, Vec<FrameSequence>) {
    if every == 0 {
        return (seqs, Vec::new());
    }
    let (mut train, mut held) = (Vec::new(), Vec::new());
    for (i, s) in seqs.into_iter().enumerate() {
        if (i + 1) % every == 0 {
            held.push(s);
        } else {
            train.push(s);
        }
    }
    (train, held)
}

fn classification_report(model: &Model, task: Task, samples: &[Sample]) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::arg("no evaluation samples"));
    }
    let scores = samples
        .iter()
        .map(|s| model.scores(&s.bank))
        .collect::<Result<Vec<_>>>()?;
    let targets: Vec<usize> = samples.iter().map(Sample::action).collect();
    let preds: Vec<usize> = scores.iter().map(|s| argmax(s)).collect();
    let n = model.shape().n_actions;
    Ok(EvalReport {
        task: task.to_string(),
        samples: samples.len(),
        top1: Some(topk_accuracy(&scores, &targets, 1)?),
        top5: (n >= 5).then(|| topk_accuracy(&scores, &targets, 5)).transpose()?,
        class_mean: Some(class_mean_accuracy(&preds, &targets)?),
        ..Default::default()
    })
}

/// Evaluates `model` on `seqs` for `cfg.task`.
pub fn evaluate(model: &Model, cfg: &RunConfig, seqs: &[FrameSequence]) -> Result<EvalReport> {
    let n_actions = model.shape().n_actions;
    let inputs = seqs
        .iter()
        .map(|s| model_input(s, cfg.input, n_actions))
        .collect::<Result<Vec<_>>>()?;
    match cfg.task {
        Task::NextAction | Task::Recognition => {
            let mut samples = Vec::new();
            for s in &inputs {
                samples.extend(match cfg.task {
                    Task::NextAction => next_action_samples(s, &cfg.snippets, cfg.anticipation.tau_alpha)?,
                    _ => recognition_samples(s, &cfg.snippets)?,
                });
            }
            classification_report(model, cfg.task, &samples)
        }
        Task::Dense => {
            let dense = dense_protocol(&inputs, &cfg.dense.eval_obs, &cfg.dense.eval_pred, |seq, t_obs, len| {
                let bank = SnippetBank::build(seq, t_obs - 1, &cfg.snippets)?;
                Ok(expand_segments(&model.dense_rollout(&bank, t_obs, seq.fps, len)?))
            })?;
            Ok(EvalReport {
                task: cfg.task.to_string(),
                samples: inputs.len(),
                dense,
                ..Default::default()
            })
        }
        Task::Segmentation => {
            let mut acc = SegAccumulator::default();
            for s in &inputs {
                let pred = model.segment_sliding(s, &cfg.snippets, cfg.segmentation.window, cfg.segmentation.stride)?;
                acc.add(&pred, s.labels()?)?;
            }
            Ok(EvalReport {
                task: cfg.task.to_string(),
                samples: inputs.len(),
                seg: Some(acc.finish()),
                segments: Some(acc.predicted_segments()),
                ..Default::default()
            })
        }
    }
}

/// Per-sample top-1 correctness of `evaluate` for classification tasks, in sample order.
pub fn sample_predictions(model: &Model, cfg: &RunConfig, seqs: &[FrameSequence]) -> Result<Vec<(usize, usize)>> {
    let n_actions = model.shape().n_actions;
    let mut out = Vec::new();
    for s in seqs {
        let input = model_input(s, cfg.input, n_actions)?;
        for sample in task_samples(cfg, &input)? {
            out.push((model.predict(&sample.bank)?, sample.action()));
        }
    }
    Ok(out)
}

pub const ABLATION_AXES: [&str; 11] = [
    "pooling_type",
    "recent_starts",
    "spanning_scales",
    "recent_k",
    "no_z",
    "no_nlb",
    "couple_ss_only",
    "couple_rr_only",
    "no_cb",
    "single_cb",
    "single_tab",
];

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub report: EvalReport,
}

fn parse_list<T: std::str::FromStr>(v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(|x| x.trim().parse::<T>().map_err(|_| Error::arg(format!("bad list value {x:?} in {v:?}"))))
        .collect()
}

/// Variant configurations of one ablation axis. `values` overrides the default rows.
pub fn ablation_variants(base: &RunConfig, axis: &str, values: Option<&[String]>) -> Result<Vec<(String, RunConfig)>> {
    let axis = axis.to_ascii_lowercase();
    if !ABLATION_AXES.contains(&axis.as_str()) {
        return Err(Error::arg(format!("unknown ablation axis {axis:?}; expected one of {ABLATION_AXES:?}")));
    }
    let own = |d: &[&str]| -> Vec<String> { d.iter().map(|s| s.to_string()).collect() };
    let values: Vec<String> = match values {
        Some(v) => v.to_vec(),
        None => match axis.as_str() {
            "pooling_type" => own(&["sample", "mean", "max"]),
            "recent_starts" => own(&["10", "10,20", "10,20,30"]),
            "spanning_scales" => own(&["10", "10,15", "10,15,20"]),
            "recent_k" => own(&["1", "3", "5"]),
            _ => own(&["off", "on"]),
        },
    };
    values
        .iter()
        .map(|v| {
            let mut c = base.clone();
            let on = || -> Result<bool> {
                match v.as_str() {
                    "on" | "true" => Ok(true),
                    "off" | "false" => Ok(false),
                    _ => Err(Error::arg(format!("axis {axis} takes on/off, got {v:?}"))),
                }
            };
            match axis.as_str() {
                "pooling_type" => c.snippets.pooling = v.parse::<Pooling>()?,
                "recent_starts" => c.snippets.recent_starts = parse_list(v)?,
                "spanning_scales" => c.snippets.spanning_scales = parse_list(v)?,
                "recent_k" => c.snippets.recent_k = v.parse().map_err(|_| Error::arg(format!("bad recent_k {v:?}")))?,
                "no_z" => c.model.no_z = on()?,
                "no_nlb" => c.model.variant.no_nlb = on()?,
                "couple_ss_only" => {
                    c.model.variant.coupling = if on()? { Coupling::SpanningOnly } else { Coupling::Full }
                }
                "couple_rr_only" => c.model.variant.coupling = if on()? { Coupling::RecentOnly } else { Coupling::Full },
                "no_cb" => c.model.variant.coupling = if on()? { Coupling::None } else { Coupling::Full },
                "single_cb" => c.model.variant.single_cb = on()?,
                "single_tab" => c.model.variant.single_tab = on()?,
                _ => unreachable!(),
            }
            c.validate()?;
            Ok((format!("{axis}={v}"), c))
        })
        .collect()
}

/// Trains and evaluates every variant of `axis` with the same seed and data.
pub fn ablate(
    base: &RunConfig,
    train_seqs: &[FrameSequence],
    test_seqs: &[FrameSequence],
    axis: &str,
    values: Option<&[String]>,
) -> Result<Vec<AblationRow>> {
    ablation_variants(base, axis, values)?
        .into_iter()
        .map(|(variant, cfg)| {
            log::info!("ablation variant {variant}");
            let state = train(&cfg, train_seqs, &[])?;
            Ok(AblationRow {
                variant,
                report: evaluate(&state.model, &cfg, test_seqs)?,
            })
        })
        .collect()
}

/// Retrains and evaluates with the spanning range starting at each fraction of the cut.
pub fn spanning_sweep(
    base: &RunConfig,
    train_seqs: &[FrameSequence],
    test_seqs: &[FrameSequence],
    fractions: &[f64],
) -> Result<Vec<(f64, EvalReport)>> {
    fractions
        .iter()
        .map(|&f| {
            let mut cfg = base.clone();
            cfg.snippets.spanning_start_fraction = f;
            cfg.validate()?;
            let state = train(&cfg, train_seqs, &[])?;
            Ok((f, evaluate(&state.model, &cfg, test_seqs)?))
        })
        .collect()
}

/// Ground-truth segments of a labeled sequence as `(action, frames)` pairs.
pub fn gt_segments(seq: &FrameSequence) -> Result<Vec<(usize, usize)>> {
    Ok(segments_of(seq.labels()?).iter().map(|s| (s.action, s.frames())).collect())
}
