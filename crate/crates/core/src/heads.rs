//! Task heads over the temporal aggregate representation: next-action
//! classification with the complex-activity auxiliary loss, summed-score
//! inference, dense anticipation by recurrent rollout, recognition scopes
//! and sliding-window segmentation.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::blocks::{new_tab, tab_forward, Fwd, Linear, StackDims, TabParams, Variant};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::recurrent::LstmCell;
use crate::rng::Rng;
use crate::snippets::{FrameSequence, SnippetBank, SnippetConfig};
use crate::tensor::{argmax, Tensor};

/// Stream index for parameter initialization.
const INIT_STREAM: u64 = 0x1A17;

/// Data-dependent sizes of a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelShape {
    pub input_dim: usize,
    pub n_actions: usize,
    /// Number of complex activities; 0 means no activity head.
    pub n_activities: usize,
    pub n_recent: usize,
    pub n_scales: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Width `H` of the aggregate vectors.
    pub hidden: usize,
    /// Attention width; 0 means half the input width.
    #[serde(default)]
    pub attn_dim: usize,
    pub dropout: f64,
    #[serde(default)]
    pub variant: Variant,
    /// Drop the activity head and its loss term.
    #[serde(default)]
    pub no_z: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: 1024,
            attn_dim: 0,
            dropout: 0.3,
            variant: Variant::default(),
            no_z: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenseConfig {
    /// Number of duration bins `N_D`.
    pub duration_bins: usize,
    /// Seconds per duration bin.
    pub duration_interval: f64,
    pub rnn_hidden: usize,
    /// Feed the elapsed observation time (as a duration-bin one-hot) to the duration head.
    #[serde(default = "default_true")]
    pub elapsed_input: bool,
    /// Upper bound on rollout steps before the last segment is stretched to the horizon.
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
}

fn default_true() -> bool {
    true
}

fn default_max_steps() -> usize {
    64
}

impl Default for DenseConfig {
    fn default() -> Self {
        DenseConfig {
            duration_bins: 16,
            duration_interval: 20.0,
            rnn_hidden: 512,
            elapsed_input: true,
            max_steps: default_max_steps(),
        }
    }
}

impl DenseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.duration_bins == 0 || self.rnn_hidden == 0 || self.max_steps == 0 {
            return Err(Error::config("duration_bins, rnn_hidden and max_steps must be >= 1"));
        }
        if !(self.duration_interval > 0.0) || !self.duration_interval.is_finite() {
            return Err(Error::config(format!(
                "duration_interval must be positive, got {}",
                self.duration_interval
            )));
        }
        Ok(())
    }

    /// Bin of a duration in frames: `floor(seconds / interval)`, clamped to the last bin.
    pub fn bin(&self, frames: usize, fps: f64) -> usize {
        let b = (frames as f64 / fps / self.duration_interval).floor() as usize;
        b.min(self.duration_bins - 1)
    }

    /// Bin midpoint in frames, at least one.
    pub fn decode(&self, bin: usize, fps: f64) -> usize {
        (((bin as f64 + 0.5) * self.duration_interval * fps).round() as usize).max(1)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct DenseHead {
    duration: Linear,
    rollout_in: Linear,
    cell: LstmCell,
    step_action: Linear,
    step_duration: Linear,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassTargets {
    pub action: usize,
    pub activity: Option<usize>,
}

/// Targets of one dense-anticipation sample.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DenseTargets {
    pub action: usize,
    pub activity: Option<usize>,
    /// Bin of the remaining duration of the current action.
    pub remaining_bin: usize,
    /// Ground-truth future `(action, duration bin)` pairs.
    pub future: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classification {
    pub action_logits: Vec<Tensor>,
    pub activity_logits: Option<Tensor>,
    pub loss: Option<f64>,
}

/// Tape handles of one encoded bank.
pub struct Encoded {
    pub r3: Vec<Var>,
    pub s3: Vec<Var>,
    pub action_logits: Vec<Var>,
    pub activity_logits: Option<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    shape: ModelShape,
    config: ModelConfig,
    dense_config: Option<DenseConfig>,
    params: ParamStore,
    tabs: Vec<TabParams>,
    action_head: Linear,
    activity_head: Option<Linear>,
    dense: Option<DenseHead>,
}

impl Model {
    /// Freshly initialized model; the same `(shape, config, seed)` gives the same weights.
    pub fn new(shape: ModelShape, config: ModelConfig, dense: Option<DenseConfig>, seed: u64) -> Result<Self> {
        if shape.n_actions < 2 {
            return Err(Error::config("at least two action classes are required"));
        }
        if shape.input_dim == 0 || shape.n_recent == 0 || shape.n_scales == 0 || config.hidden == 0 {
            return Err(Error::config("model widths and bank counts must be >= 1"));
        }
        if !(0.0..1.0).contains(&config.dropout) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", config.dropout)));
        }
        if let Some(d) = &dense {
            d.validate()?;
        }
        let mut rng = Rng::stream(seed, INIT_STREAM);
        let mut params = ParamStore::new();
        let attn = if config.attn_dim == 0 {
            (shape.input_dim / 2).max(1)
        } else {
            config.attn_dim
        };
        let dims = StackDims {
            input: shape.input_dim,
            attn,
            hidden: config.hidden,
            dropout: config.dropout,
        };
        let n_tabs = if config.variant.single_tab { 1 } else { shape.n_recent };
        let n_cbs = if config.variant.single_cb { 1 } else { shape.n_scales };
        let tabs = (0..n_tabs)
            .map(|r| new_tab(&mut params, &format!("tab{r}"), n_cbs, dims, &config.variant, &mut rng))
            .collect();
        let h = config.hidden;
        let action_head = Linear::new(&mut params, "action_head", h, shape.n_actions, &mut rng);
        let activity_head = (shape.n_activities > 0 && !config.no_z)
            .then(|| Linear::new(&mut params, "activity_head", n_tabs * h, shape.n_activities, &mut rng));
        let dense_head = dense.as_ref().map(|d| {
            let elapsed = if d.elapsed_input { d.duration_bins } else { 0 };
            let ctx_in = 2 * n_tabs * h + n_tabs * shape.n_actions;
            let step_in = h + shape.n_actions + d.duration_bins;
            DenseHead {
                duration: Linear::new(&mut params, "dense.duration", n_tabs * h + elapsed, d.duration_bins, &mut rng),
                rollout_in: Linear::new(&mut params, "dense.rollout_in", ctx_in, h, &mut rng),
                cell: LstmCell::new(&mut params, "dense.lstm", step_in, d.rnn_hidden, &mut rng),
                step_action: Linear::new(&mut params, "dense.step_action", d.rnn_hidden, shape.n_actions, &mut rng),
                step_duration: Linear::new(&mut params, "dense.step_duration", d.rnn_hidden, d.duration_bins, &mut rng),
            }
        });
        Ok(Model {
            shape,
            config,
            dense_config: dense,
            params,
            tabs,
            action_head,
            activity_head,
            dense: dense_head,
        })
    }

    pub fn shape(&self) -> &ModelShape {
        &self.shape
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn dense_config(&self) -> Option<&DenseConfig> {
        self.dense_config.as_ref()
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn has_activity_head(&self) -> bool {
        self.activity_head.is_some()
    }

    /// Runs every TAB and the classification layers on `bank`.
    pub fn encode(&self, fx: &mut Fwd, bank: &SnippetBank) -> Result<Encoded> {
        if bank.recent.len() != self.shape.n_recent || bank.spanning.len() != self.shape.n_scales {
            return Err(Error::config(format!(
                "bank has {} recent / {} spanning entries, model expects {} / {}",
                bank.recent.len(),
                bank.spanning.len(),
                self.shape.n_recent,
                self.shape.n_scales
            )));
        }
        let n_cbs = self.tabs[0].cbs.len();
        let spanning: Vec<Var> = bank.spanning[..n_cbs]
            .iter()
            .map(|s| fx.graph.constant(s.clone()))
            .collect();
        let mut enc = Encoded {
            r3: Vec::with_capacity(self.tabs.len()),
            s3: Vec::with_capacity(self.tabs.len()),
            action_logits: Vec::with_capacity(self.tabs.len()),
            activity_logits: None,
        };
        for (tab, recent) in self.tabs.iter().zip(&bank.recent) {
            let r = fx.graph.constant(recent.clone());
            let out = tab_forward(fx, r, &spanning, tab)?;
            enc.action_logits.push(self.action_head.forward(fx, out.r3)?);
            enc.r3.push(out.r3);
            enc.s3.push(out.s3);
        }
        if let Some(head) = &self.activity_head {
            let s_cat = fx.graph.concat(&enc.s3, 0)?;
            enc.activity_logits = Some(head.forward(fx, s_cat)?);
        }
        Ok(enc)
    }

    /// Summed cross-entropy over starts plus the activity term when available.
    pub fn classification_loss(&self, fx: &mut Fwd, enc: &Encoded, targets: &ClassTargets) -> Result<Var> {
        let mut terms = Vec::with_capacity(enc.action_logits.len() + 1);
        if let (Some(z), Some(target)) = (enc.activity_logits, targets.activity) {
            terms.push(fx.graph.cross_entropy(z, target)?);
        }
        for &y in &enc.action_logits {
            terms.push(fx.graph.cross_entropy(y, targets.action)?);
        }
        fx.graph.add_all(&terms)
    }

    /// Forward pass returning per-start logits, activity logits and (with targets) the loss.
    pub fn classify(
        &self,
        bank: &SnippetBank,
        targets: Option<&ClassTargets>,
        training: bool,
        rng: &mut Rng,
    ) -> Result<Classification> {
        if training && targets.is_none() {
            return Err(Error::arg("training mode needs target labels"));
        }
        let mut graph = Graph::new();
        let mut fx = Fwd::new(&mut graph, &self.params, training, rng);
        let enc = self.encode(&mut fx, bank)?;
        let loss = match targets {
            Some(t) => Some(self.classification_loss(&mut fx, &enc, t)?),
            None => None,
        };
        Ok(Classification {
            action_logits: enc.action_logits.iter().map(|&v| graph.value(v).clone()).collect(),
            activity_logits: enc.activity_logits.map(|v| graph.value(v).clone()),
            loss: loss.map(|v| graph.value(v).item()),
        })
    }

    /// Eval-mode summed softmax scores over starts.
    pub fn scores(&self, bank: &SnippetBank) -> Result<Vec<f64>> {
        let mut rng = Rng::new(0);
        let c = self.classify(bank, None, false, &mut rng)?;
        ensemble_scores(&c.action_logits)
    }

    pub fn predict(&self, bank: &SnippetBank) -> Result<usize> {
        Ok(argmax(&self.scores(bank)?))
    }

    fn dense_parts(&self) -> Result<(&DenseHead, &DenseConfig)> {
        match (&self.dense, &self.dense_config) {
            (Some(h), Some(c)) => Ok((h, c)),
            _ => Err(Error::config("model was built without a dense head")),
        }
    }

    /// Duration logits of the current action and the rollout context vector.
    fn dense_context(&self, fx: &mut Fwd, enc: &Encoded, elapsed_frames: usize, fps: f64) -> Result<(Var, Var)> {
        let (head, cfg) = self.dense_parts()?;
        let r_cat = fx.graph.concat(&enc.r3, 0)?;
        let dur_in = if cfg.elapsed_input {
            let e = fx.graph.constant(one_hot(cfg.bin(elapsed_frames, fps), cfg.duration_bins));
            fx.graph.concat(&[r_cat, e], 0)?
        } else {
            r_cat
        };
        let dur = head.duration.forward(fx, dur_in)?;
        let mut parts = enc.r3.clone();
        parts.extend(&enc.s3);
        for &y in &enc.action_logits {
            parts.push(fx.graph.softmax(y, 0)?);
        }
        let ctx_in = fx.graph.concat(&parts, 0)?;
        let ctx = head.rollout_in.forward_relu(fx, ctx_in)?;
        Ok((dur, ctx))
    }

    fn step_input(&self, fx: &mut Fwd, ctx: Var, action: usize, bin: usize) -> Result<Var> {
        let (_, cfg) = self.dense_parts()?;
        let a = fx.graph.constant(one_hot(action, self.shape.n_actions));
        let d = fx.graph.constant(one_hot(bin, cfg.duration_bins));
        fx.graph.concat(&[ctx, a, d], 0)
    }

    /// Classification loss plus current-duration and teacher-forced future terms.
    pub fn dense_loss(
        &self,
        fx: &mut Fwd,
        bank: &SnippetBank,
        elapsed_frames: usize,
        fps: f64,
        targets: &DenseTargets,
    ) -> Result<Var> {
        let (head, _) = self.dense_parts()?;
        let enc = self.encode(fx, bank)?;
        let cls = ClassTargets {
            action: targets.action,
            activity: targets.activity,
        };
        let l_cl = self.classification_loss(fx, &enc, &cls)?;
        let (dur, ctx) = self.dense_context(fx, &enc, elapsed_frames, fps)?;
        let l_dur = fx.graph.cross_entropy(dur, targets.remaining_bin)?;
        let mut total = fx.graph.add(l_cl, l_dur)?;
        if targets.future.is_empty() {
            return Ok(total);
        }
        let mut state = head.cell.zero_state(fx);
        let (mut prev_a, mut prev_d) = (targets.action, targets.remaining_bin);
        let mut steps = Vec::with_capacity(2 * targets.future.len());
        for &(a, d) in &targets.future {
            let x = self.step_input(fx, ctx, prev_a, prev_d)?;
            state = head.cell.step(fx, x, state)?;
            let ya = head.step_action.forward(fx, state.h)?;
            let yd = head.step_duration.forward(fx, state.h)?;
            steps.push(fx.graph.cross_entropy(ya, a)?);
            steps.push(fx.graph.cross_entropy(yd, d)?);
            (prev_a, prev_d) = (a, d);
        }
        let future = fx.graph.add_all(&steps)?;
        let future = fx.graph.scale(future, 1.0 / targets.future.len() as f64);
        total = fx.graph.add(total, future)?;
        Ok(total)
    }

    /// Free-running rollout covering exactly `horizon_frames`; returns `(action, frames)` segments.
    pub fn dense_rollout(
        &self,
        bank: &SnippetBank,
        elapsed_frames: usize,
        fps: f64,
        horizon_frames: usize,
    ) -> Result<Vec<(usize, usize)>> {
        if horizon_frames == 0 {
            return Err(Error::arg("rollout horizon must be >= 1 frame"));
        }
        let (head, cfg) = self.dense_parts()?;
        let mut graph = Graph::new();
        let mut rng = Rng::new(0);
        let mut fx = Fwd::new(&mut graph, &self.params, false, &mut rng);
        let enc = self.encode(&mut fx, bank)?;
        let (dur, ctx) = self.dense_context(&mut fx, &enc, elapsed_frames, fps)?;
        let logits: Vec<Tensor> = enc.action_logits.iter().map(|&v| fx.graph.value(v).clone()).collect();
        let current = ensemble_infer(&logits)?;
        let bin = fx.graph.value(dur).argmax();
        let mut segments = vec![(current, cfg.decode(bin, fps))];
        let mut covered = segments[0].1;
        let mut state = head.cell.zero_state(&mut fx);
        let (mut prev_a, mut prev_d) = (current, bin);
        let mut steps = 0;
        while covered < horizon_frames && steps < cfg.max_steps {
            let x = self.step_input(&mut fx, ctx, prev_a, prev_d)?;
            state = head.cell.step(&mut fx, x, state)?;
            let ya = head.step_action.forward(&mut fx, state.h)?;
            let yd = head.step_duration.forward(&mut fx, state.h)?;
            let (a, d) = (fx.graph.value(ya).argmax(), fx.graph.value(yd).argmax());
            let frames = cfg.decode(d, fps);
            segments.push((a, frames));
            covered += frames;
            (prev_a, prev_d) = (a, d);
            steps += 1;
        }
        Ok(fit_to_horizon(segments, horizon_frames))
    }

    /// Eval-mode label of every frame from windows of `window_seconds` spaced `stride_seconds` apart.
    pub fn segment_sliding(
        &self,
        seq: &FrameSequence,
        cfg: &SnippetConfig,
        window_seconds: f64,
        stride_seconds: f64,
    ) -> Result<Vec<usize>> {
        if !(window_seconds > 0.0) || !(stride_seconds > 0.0) {
            return Err(Error::arg("window and stride must be positive"));
        }
        let window = seq.seconds_to_frames(window_seconds).max(1);
        let stride = seq.seconds_to_frames(stride_seconds).max(1);
        let windows = sliding_windows(seq.len(), window, stride);
        let labels = windows
            .iter()
            .map(|&(a, b)| {
                let (recent, spanning) = window_scope(a, b, self.shape.n_recent);
                self.predict(&SnippetBank::from_ranges(seq, &recent, spanning, cfg)?)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(nearest_window_labels(seq.len(), &windows, &labels))
    }
}

pub fn one_hot(index: usize, n: usize) -> Tensor {
    let mut v = vec![0.0; n];
    v[index] = 1.0;
    Tensor::vector(v)
}

/// Max-subtracted softmax of one logit vector.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Sum over starts of post-softmax scores.
pub fn ensemble_scores<L: AsRef<[f64]>>(logits: &[L]) -> Result<Vec<f64>> {
    let first = logits.first().ok_or_else(|| Error::arg("no logit vectors to ensemble"))?;
    let n = first.as_ref().len();
    let mut acc = vec![0.0; n];
    for l in logits {
        let l = l.as_ref();
        if l.len() != n {
            return Err(Error::Dimension {
                op: "ensemble",
                left: vec![n],
                right: vec![l.len()],
            });
        }
        acc.iter_mut().zip(softmax(l)).for_each(|(a, p)| *a += p);
    }
    Ok(acc)
}

/// Argmax of the summed scores, lowest class index on ties.
pub fn ensemble_infer<L: AsRef<[f64]>>(logits: &[L]) -> Result<usize> {
    Ok(argmax(&ensemble_scores(logits)?))
}

/// Truncates or stretches the segment list so the frames sum to `horizon`.
fn fit_to_horizon(mut segments: Vec<(usize, usize)>, horizon: usize) -> Vec<(usize, usize)> {
    let mut covered = 0;
    for (k, seg) in segments.iter_mut().enumerate() {
        if covered + seg.1 >= horizon {
            seg.1 = horizon - covered;
            segments.truncate(k + 1);
            return segments;
        }
        covered += seg.1;
    }
    if let Some(last) = segments.last_mut() {
        last.1 += horizon - covered;
    }
    segments
}

/// Frame labels of a segment list.
pub fn expand_segments(segments: &[(usize, usize)]) -> Vec<usize> {
    segments
        .iter()
        .flat_map(|&(a, n)| std::iter::repeat(a).take(n))
        .collect()
}

/// Time ranges (seconds) for recognizing a trimmed segment `[ts, te]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RecognitionScope {
    pub spanning: (f64, f64),
    pub recent: Vec<(f64, f64)>,
}

/// Spanning `[ts - 6, te + 6]`, recents `[ts - k, te + k]` for `k = 0..n_recent`,
/// all clamped to `[0, duration]`.
pub fn recognition_scope(ts: f64, te: f64, n_recent: usize, duration: f64) -> Result<RecognitionScope> {
    if !(ts <= te) {
        return Err(Error::arg(format!("segment start {ts} after end {te}")));
    }
    let clamp = |a: f64, b: f64| (a.max(0.0), b.min(duration).max(a.max(0.0)));
    Ok(RecognitionScope {
        spanning: clamp(ts - 6.0, te + 6.0),
        recent: (0..n_recent).map(|k| clamp(ts - k as f64, te + k as f64)).collect(),
    })
}

impl RecognitionScope {
    /// Inclusive frame ranges: start `floor(a·fps)`, end `ceil(b·fps) - 1`, at least one frame.
    pub fn frame_ranges(&self, seq: &FrameSequence) -> (Vec<(usize, usize)>, (usize, usize)) {
        let last = seq.len() - 1;
        let conv = |(a, b): (f64, f64)| {
            let lo = ((a * seq.fps).floor() as usize).min(last);
            let hi = ((b * seq.fps).ceil() as usize).saturating_sub(1).min(last);
            (lo, hi.max(lo))
        };
        (self.recent.iter().map(|&r| conv(r)).collect(), conv(self.spanning))
    }

    pub fn bank(&self, seq: &FrameSequence, cfg: &SnippetConfig) -> Result<SnippetBank> {
        let (recent, spanning) = self.frame_ranges(seq);
        SnippetBank::from_ranges(seq, &recent, spanning, cfg)
    }
}

/// Inclusive windows of `window` frames every `stride` frames; a final window is
/// aligned to the end when the stride does not land there. Short sequences get one window.
pub fn sliding_windows(len: usize, window: usize, stride: usize) -> Vec<(usize, usize)> {
    if len <= window {
        return vec![(0, len.saturating_sub(1))];
    }
    let mut out: Vec<(usize, usize)> = (0..)
        .map(|k| k * stride)
        .take_while(|&s| s + window <= len)
        .map(|s| (s, s + window - 1))
        .collect();
    if out.last().map_or(true, |&(_, e)| e != len - 1) {
        out.push((len - window, len - 1));
    }
    out
}

/// Banks inside window `[a, b]`: spanning is the whole window, recent `r` is the
/// centered sub-window covering `(r + 1) / n_recent` of it.
pub fn window_scope(a: usize, b: usize, n_recent: usize) -> (Vec<(usize, usize)>, (usize, usize)) {
    let len = b - a + 1;
    let recent = (0..n_recent)
        .map(|r| {
            let width = ((len * (r + 1)).div_ceil(n_recent)).max(1);
            let lo = a + (len - width) / 2;
            (lo, lo + width - 1)
        })
        .collect();
    (recent, (a, b))
}

/// Each frame takes the label of the window whose center is nearest (earlier window on ties).
pub fn nearest_window_labels(len: usize, windows: &[(usize, usize)], labels: &[usize]) -> Vec<usize> {
    // Twice the center keeps the arithmetic integral.
    let centers: Vec<usize> = windows.iter().map(|&(a, b)| a + b).collect();
    let mut out = Vec::with_capacity(len);
    let mut w = 0;
    for t in 0..len {
        while w + 1 < centers.len() && centers[w + 1].abs_diff(2 * t) < centers[w].abs_diff(2 * t) {
            w += 1;
        }
        out.push(labels[w]);
    }
    out
}
