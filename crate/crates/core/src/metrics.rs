//! Evaluation metrics. All percentages are in `[0, 100]`.

use crate::error::{Error, Result};
use crate::snippets::{segments_of, FrameSequence, Segment};

/// F1 overlap thresholds reported for segmentation.
pub const F1_THRESHOLDS: [f64; 3] = [0.10, 0.25, 0.50];

/// Position of `target` when classes are sorted by descending score, lower index first on ties.
pub fn rank_of(scores: &[f64], target: usize) -> usize {
    let s = scores[target];
    scores
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > s || (v == s && j < target))
        .count()
}

/// Percentage of samples whose target ranks among the `k` best scores.
pub fn topk_accuracy<S: AsRef<[f64]>>(scores: &[S], targets: &[usize], k: usize) -> Result<f64> {
    if scores.is_empty() || scores.len() != targets.len() {
        return Err(Error::arg(format!(
            "{} score lists for {} targets",
            scores.len(),
            targets.len()
        )));
    }
    let mut hits = 0usize;
    for (s, &t) in scores.iter().zip(targets) {
        let s = s.as_ref();
        if k == 0 || k > s.len() || t >= s.len() {
            return Err(Error::arg(format!("k = {k} or target {t} invalid for {} classes", s.len())));
        }
        if rank_of(s, t) < k {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / scores.len() as f64)
}

/// Unweighted mean over target classes of per-class recall.
pub fn class_mean_accuracy(pred: &[usize], target: &[usize]) -> Result<f64> {
    check_lengths(pred, target)?;
    let n = target.iter().max().map_or(0, |&m| m + 1);
    let mut hit = vec![0usize; n];
    let mut tot = vec![0usize; n];
    for (&p, &t) in pred.iter().zip(target) {
        tot[t] += 1;
        if p == t {
            hit[t] += 1;
        }
    }
    let present: Vec<f64> = tot
        .iter()
        .zip(&hit)
        .filter(|(&t, _)| t > 0)
        .map(|(&t, &h)| h as f64 / t as f64)
        .collect();
    Ok(100.0 * present.iter().sum::<f64>() / present.len() as f64)
}

pub fn frame_accuracy(pred: &[usize], target: &[usize]) -> Result<f64> {
    check_lengths(pred, target)?;
    let hits = pred.iter().zip(target).filter(|(p, t)| p == t).count();
    Ok(100.0 * hits as f64 / target.len() as f64)
}

fn check_lengths(pred: &[usize], target: &[usize]) -> Result<()> {
    if pred.len() != target.len() || target.is_empty() {
        return Err(Error::arg(format!(
            "{} predictions for {} targets",
            pred.len(),
            target.len()
        )));
    }
    Ok(())
}

fn iou(a: &Segment, b: &Segment) -> f64 {
    let inter = (a.end.min(b.end) + 1).saturating_sub(a.start.max(b.start));
    let union = a.end.max(b.end) + 1 - a.start.min(b.start);
    inter as f64 / union as f64
}

/// True positives, false positives and false negatives at overlap `tau`.
///
/// Same-label pairs are matched greedily by descending IoU (ties: predicted
/// index, then ground-truth index); each segment is matched at most once.
pub fn f1_counts(pred: &[usize], gt: &[usize], tau: f64) -> Result<(usize, usize, usize)> {
    check_lengths(pred, gt)?;
    let (ps, gs) = (segments_of(pred), segments_of(gt));
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, p) in ps.iter().enumerate() {
        for (j, g) in gs.iter().enumerate() {
            if p.action == g.action {
                let o = iou(p, g);
                if o >= tau && o > 0.0 {
                    pairs.push((o, i, j));
                }
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let (mut pu, mut gu) = (vec![false; ps.len()], vec![false; gs.len()]);
    let mut tp = 0;
    for (_, i, j) in pairs {
        if !pu[i] && !gu[j] {
            pu[i] = true;
            gu[j] = true;
            tp += 1;
        }
    }
    Ok((tp, ps.len() - tp, gs.len() - tp))
}

pub fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        return 0.0;
    }
    100.0 * 2.0 * tp as f64 / denom as f64
}

pub fn levenshtein(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, x) in a.iter().enumerate() {
        let mut cur = vec![i + 1; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        prev = cur;
    }
    prev[b.len()]
}

/// `100 * (1 - d / max(#pred, #gt))` over segment label strings.
pub fn edit_score(pred: &[usize], gt: &[usize]) -> Result<f64> {
    check_lengths(pred, gt)?;
    let p: Vec<usize> = segments_of(pred).iter().map(|s| s.action).collect();
    let g: Vec<usize> = segments_of(gt).iter().map(|s| s.action).collect();
    let d = levenshtein(&p, &g);
    Ok(100.0 * (1.0 - d as f64 / p.len().max(g.len()) as f64))
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SegScores {
    /// F1 at [`F1_THRESHOLDS`].
    pub f1: [f64; 3],
    pub edit: f64,
    pub accuracy: f64,
}

pub fn segmentation_scores(pred: &[usize], gt: &[usize]) -> Result<SegScores> {
    let mut acc = SegAccumulator::default();
    acc.add(pred, gt)?;
    Ok(acc.finish())
}

/// Corpus-level segmentation scores: F1 from summed counts, edit averaged over
/// sequences, accuracy over all frames.
#[derive(Clone, Debug, Default)]
pub struct SegAccumulator {
    counts: [(usize, usize, usize); 3],
    edit_sum: f64,
    sequences: usize,
    correct: usize,
    frames: usize,
    pred_segments: usize,
}

impl SegAccumulator {
    pub fn add(&mut self, pred: &[usize], gt: &[usize]) -> Result<()> {
        for (c, &tau) in self.counts.iter_mut().zip(&F1_THRESHOLDS) {
            let (tp, fp, fn_) = f1_counts(pred, gt, tau)?;
            c.0 += tp;
            c.1 += fp;
            c.2 += fn_;
        }
        self.edit_sum += edit_score(pred, gt)?;
        self.sequences += 1;
        self.correct += pred.iter().zip(gt).filter(|(p, t)| p == t).count();
        self.frames += gt.len();
        self.pred_segments += segments_of(pred).len();
        Ok(())
    }

    /// Total number of predicted segments added so far.
    pub fn predicted_segments(&self) -> usize {
        self.pred_segments
    }

    pub fn finish(&self) -> SegScores {
        SegScores {
            f1: self.counts.map(|(tp, fp, fn_)| f1_from_counts(tp, fp, fn_)),
            edit: if self.sequences == 0 { 0.0 } else { self.edit_sum / self.sequences as f64 },
            accuracy: if self.frames == 0 {
                0.0
            } else {
                100.0 * self.correct as f64 / self.frames as f64
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DenseEntry {
    pub obs: f64,
    pub pred: f64,
    pub class_mean: f64,
}

/// Obs/Pred table. For each sequence of length `T` and each pair, observation
/// ends at `floor(obs * T)` and `predict(seq, t_obs, len)` must label the next
/// `floor(pred * (T - t_obs))` frames. Frames are pooled over the corpus before
/// taking the class mean. Sequences too short for a pair are skipped with a warning.
pub fn dense_protocol<F>(corpus: &[FrameSequence], obs: &[f64], preds: &[f64], mut predict: F) -> Result<Vec<DenseEntry>>
where
    F: FnMut(&FrameSequence, usize, usize) -> Result<Vec<usize>>,
{
    let mut table = Vec::with_capacity(obs.len() * preds.len());
    for &o in obs {
        for &p in preds {
            let (mut all_pred, mut all_gt) = (Vec::new(), Vec::new());
            for (k, seq) in corpus.iter().enumerate() {
                let t = seq.len();
                let t_obs = (o * t as f64).floor() as usize;
                let len = (p * (t - t_obs.min(t)) as f64).floor() as usize;
                if t_obs < 2 || len == 0 || t_obs + len > t {
                    log::warn!("sequence {k} ({t} frames) too short for obs {o} / pred {p}; skipped");
                    continue;
                }
                let labels = seq.labels()?;
                let out = predict(seq, t_obs, len)?;
                if out.len() != len {
                    return Err(Error::arg(format!("predictor returned {} labels for {len} frames", out.len())));
                }
                all_pred.extend(out);
                all_gt.extend_from_slice(&labels[t_obs..t_obs + len]);
            }
            if all_gt.is_empty() {
                return Err(Error::arg(format!("no sequence long enough for obs {o} / pred {p}")));
            }
            table.push(DenseEntry {
                obs: o,
                pred: p,
                class_mean: class_mean_accuracy(&all_pred, &all_gt)?,
            });
        }
    }
    Ok(table)
}

/// Metric bundle of one evaluation run. Absent entries do not apply to the task.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub task: String,
    pub samples: usize,
    pub top1: Option<f64>,
    pub top5: Option<f64>,
    pub class_mean: Option<f64>,
    pub dense: Vec<DenseEntry>,
    pub seg: Option<SegScores>,
    /// Number of predicted segments (segmentation only).
    pub segments: Option<usize>,
}

impl EvalReport {
    /// The task's main number: top-1, mean dense class-mean accuracy, or frame accuracy.
    pub fn headline(&self) -> f64 {
        if let Some(t) = self.top1 {
            return t;
        }
        if let Some(s) = &self.seg {
            return s.accuracy;
        }
        if self.dense.is_empty() {
            return 0.0;
        }
        self.dense.iter().map(|d| d.class_mean).sum::<f64>() / self.dense.len() as f64
    }

    pub fn dense_at(&self, obs: f64, pred: f64) -> Option<f64> {
        self.dense
            .iter()
            .find(|d| d.obs == obs && d.pred == pred)
            .map(|d| d.class_mean)
    }
}
