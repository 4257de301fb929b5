//! Snippet pooling and the recent/spanning feature banks.
//!
//! Banks are stored snippet-major: a bank of `K` snippets over `D`-dimensional
//! frames is a `[K, D]` tensor whose row `p` is the pooled feature of part `p`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-frame features plus optional ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    /// `T x D`, row-major.
    features: Vec<f64>,
    dim: usize,
    pub frame_labels: Option<Vec<usize>>,
    pub activity: Option<usize>,
    pub fps: f64,
}

impl FrameSequence {
    pub fn new(features: Vec<f64>, dim: usize, fps: f64) -> Result<Self> {
        if dim == 0 || features.is_empty() || features.len() % dim != 0 {
            return Err(Error::arg(format!(
                "feature buffer of {} values is not a whole number of {dim}-dim frames",
                features.len()
            )));
        }
        if !(fps > 0.0) {
            return Err(Error::arg(format!("fps must be positive, got {fps}")));
        }
        Ok(FrameSequence {
            features,
            dim,
            frame_labels: None,
            activity: None,
            fps,
        })
    }

    pub fn with_labels(mut self, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(Error::arg(format!(
                "{} labels for {} frames",
                labels.len(),
                self.len()
            )));
        }
        self.frame_labels = Some(labels);
        Ok(self)
    }

    pub fn with_activity(mut self, activity: Option<usize>) -> Self {
        self.activity = activity;
        self
    }

    /// Frame count `T`.
    pub fn len(&self) -> usize {
        self.features.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.features[t * self.dim..(t + 1) * self.dim]
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn labels(&self) -> Result<&[usize]> {
        self.frame_labels
            .as_deref()
            .ok_or_else(|| Error::arg("sequence has no frame labels"))
    }

    /// Maximal constant runs of the frame labels.
    pub fn segments(&self) -> Result<Vec<Segment>> {
        Ok(segments_of(self.labels()?))
    }

    /// Same annotations with one-hot label frames replacing the features.
    pub fn one_hot_labels(&self, n_classes: usize) -> Result<FrameSequence> {
        let labels = self.labels()?;
        let mut features = vec![0.0; labels.len() * n_classes];
        for (t, &l) in labels.iter().enumerate() {
            if l >= n_classes {
                return Err(Error::arg(format!("label {l} >= {n_classes} classes")));
            }
            features[t * n_classes + l] = 1.0;
        }
        Ok(FrameSequence {
            features,
            dim: n_classes,
            frame_labels: self.frame_labels.clone(),
            activity: self.activity,
            fps: self.fps,
        })
    }

    /// Frames `[start, end]` as a new sequence.
    pub fn crop(&self, start: usize, end: usize) -> Result<FrameSequence> {
        if start > end || end >= self.len() {
            return Err(Error::arg(format!("crop [{start}, {end}] of {} frames", self.len())));
        }
        Ok(FrameSequence {
            features: self.features[start * self.dim..(end + 1) * self.dim].to_vec(),
            dim: self.dim,
            frame_labels: self.frame_labels.as_ref().map(|l| l[start..=end].to_vec()),
            activity: self.activity,
            fps: self.fps,
        })
    }

    pub fn seconds_to_frames(&self, seconds: f64) -> usize {
        (seconds * self.fps).round().max(0.0) as usize
    }
}

/// Inclusive frame range carrying one action label.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    pub action: usize,
}

impl Segment {
    pub fn frames(&self) -> usize {
        self.end - self.start + 1
    }
}

/// Maximal runs of equal labels.
pub fn segments_of(labels: &[usize]) -> Vec<Segment> {
    let mut out: Vec<Segment> = Vec::new();
    for (t, &a) in labels.iter().enumerate() {
        match out.last_mut() {
            Some(s) if s.action == a => s.end = t,
            _ => out.push(Segment { start: t, end: t, action: a }),
        }
    }
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Max,
    Mean,
    /// Center frame of each part.
    Sample,
}

impl std::str::FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Pooling::Max),
            "mean" => Ok(Pooling::Mean),
            "sample" | "sampling" => Ok(Pooling::Sample),
            _ => Err(Error::arg(format!("unknown pooling {s:?}"))),
        }
    }
}

impl std::fmt::Display for Pooling {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Pooling::Max => "max",
            Pooling::Mean => "mean",
            Pooling::Sample => "sample",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SnippetConfig {
    /// Recent-bank start offsets, in seconds before the current frame.
    pub recent_starts: Vec<f64>,
    /// Snippets per recent bank.
    pub recent_k: usize,
    /// Snippet counts of the spanning banks.
    pub spanning_scales: Vec<usize>,
    /// Spanning start as a fraction of the current frame (0 = whole past).
    #[serde(default)]
    pub spanning_start_fraction: f64,
    #[serde(default)]
    pub pooling: Pooling,
}

impl Default for SnippetConfig {
    /// Breakfast settings: starts t-10/20/30 s, five recent snippets, spanning {10, 15, 20}.
    fn default() -> Self {
        SnippetConfig {
            recent_starts: vec![10.0, 20.0, 30.0],
            recent_k: 5,
            spanning_scales: vec![10, 15, 20],
            spanning_start_fraction: 0.0,
            pooling: Pooling::Max,
        }
    }
}

impl SnippetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.recent_starts.is_empty() {
            return Err(Error::config("at least one recent start is required"));
        }
        if self.recent_starts.iter().any(|&o| !(o > 0.0) || !o.is_finite()) {
            return Err(Error::config("recent start offsets must be positive seconds"));
        }
        if self.recent_k == 0 || self.spanning_scales.is_empty() || self.spanning_scales.contains(&0) {
            return Err(Error::config("snippet counts must be >= 1 and at least one spanning scale is required"));
        }
        if !(0.0..=1.0).contains(&self.spanning_start_fraction) {
            return Err(Error::config(format!(
                "spanning_start_fraction {} outside [0, 1]",
                self.spanning_start_fraction
            )));
        }
        Ok(())
    }
}

/// Recent banks `R_i` and spanning banks `S_K`, each `[K, D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SnippetBank {
    pub recent: Vec<Tensor>,
    pub spanning: Vec<Tensor>,
    pub pooling: Pooling,
}

impl SnippetBank {
    /// Banks for anticipation at frame `t` (inclusive end of the observation).
    pub fn build(seq: &FrameSequence, t: usize, cfg: &SnippetConfig) -> Result<Self> {
        Ok(SnippetBank {
            recent: build_recent_bank(seq, t, cfg)?,
            spanning: build_spanning_bank(seq, t, cfg)?,
            pooling: cfg.pooling,
        })
    }

    /// Banks over explicit inclusive frame ranges.
    pub fn from_ranges(
        seq: &FrameSequence,
        recent: &[(usize, usize)],
        spanning: (usize, usize),
        cfg: &SnippetConfig,
    ) -> Result<Self> {
        let recent = recent
            .iter()
            .map(|&(i, j)| pool_snippets(seq, i, j, cfg.recent_k, cfg.pooling))
            .collect::<Result<_>>()?;
        let spanning = cfg
            .spanning_scales
            .iter()
            .map(|&k| pool_snippets(seq, spanning.0, spanning.1, k, cfg.pooling))
            .collect::<Result<_>>()?;
        Ok(SnippetBank {
            recent,
            spanning,
            pooling: cfg.pooling,
        })
    }

    pub fn dim(&self) -> usize {
        self.spanning[0].cols()
    }
}

/// Frame range of part `p` out of `k` over `[i, j]`: `[i + floor(pL/K), i + floor((p+1)L/K) - 1]`.
/// Parts that would be empty (more parts than frames) collapse onto their first frame.
pub fn part_range(i: usize, j: usize, k: usize, p: usize) -> (usize, usize) {
    let len = j - i + 1;
    let lo = i + p * len / k;
    let hi = (i + (p + 1) * len / k).saturating_sub(1);
    (lo, hi.max(lo))
}

/// Pools frames `[i, j]` into `k` contiguous parts; returns `[k, D]`.
pub fn pool_snippets(seq: &FrameSequence, i: usize, j: usize, k: usize, pooling: Pooling) -> Result<Tensor> {
    if j < i {
        return Err(Error::arg(format!("snippet range end {j} before start {i}")));
    }
    if j >= seq.len() {
        return Err(Error::arg(format!("snippet range end {j} beyond {} frames", seq.len())));
    }
    if k == 0 {
        return Err(Error::arg("snippet count must be >= 1"));
    }
    let d = seq.dim();
    let mut out = Vec::with_capacity(k * d);
    for p in 0..k {
        let (lo, hi) = part_range(i, j, k, p);
        match pooling {
            Pooling::Max => {
                let mut acc = seq.frame(lo).to_vec();
                for t in lo + 1..=hi {
                    for (a, &v) in acc.iter_mut().zip(seq.frame(t)) {
                        if v > *a {
                            *a = v;
                        }
                    }
                }
                out.extend(acc);
            }
            Pooling::Mean => {
                let mut acc = vec![0.0; d];
                for t in lo..=hi {
                    for (a, &v) in acc.iter_mut().zip(seq.frame(t)) {
                        *a += v;
                    }
                }
                let n = (hi - lo + 1) as f64;
                out.extend(acc.into_iter().map(|a| a / n));
            }
            Pooling::Sample => out.extend_from_slice(seq.frame(lo + (hi - lo) / 2)),
        }
    }
    Tensor::new(&[k, d], out)
}

fn check_cut(seq: &FrameSequence, t: usize) -> Result<()> {
    if t == 0 || t >= seq.len() {
        return Err(Error::arg(format!(
            "observation frame {t} must lie in [1, {})",
            seq.len()
        )));
    }
    Ok(())
}

/// Inclusive frame ranges of the recent banks at frame `t`.
pub fn recent_ranges(seq: &FrameSequence, t: usize, cfg: &SnippetConfig) -> Vec<(usize, usize)> {
    cfg.recent_starts
        .iter()
        .map(|&offset| {
            let back = seq.seconds_to_frames(offset).max(1);
            (t.saturating_sub(back).min(t - 1), t)
        })
        .collect()
}

/// Inclusive frame range of the spanning banks at frame `t`.
pub fn spanning_range(t: usize, cfg: &SnippetConfig) -> (usize, usize) {
    let start = (cfg.spanning_start_fraction * t as f64).floor() as usize;
    (start.min(t - 1), t)
}

pub fn build_recent_bank(seq: &FrameSequence, t: usize, cfg: &SnippetConfig) -> Result<Vec<Tensor>> {
    check_cut(seq, t)?;
    recent_ranges(seq, t, cfg)
        .into_iter()
        .map(|(i, j)| pool_snippets(seq, i, j, cfg.recent_k, cfg.pooling))
        .collect()
}

pub fn build_spanning_bank(seq: &FrameSequence, t: usize, cfg: &SnippetConfig) -> Result<Vec<Tensor>> {
    check_cut(seq, t)?;
    let (i, j) = spanning_range(t, cfg);
    cfg.spanning_scales
        .iter()
        .map(|&k| pool_snippets(seq, i, j, k, cfg.pooling))
        .collect()
}
