//! Reference next-action predictors over segment-level label sequences:
//! transition matrix, longest-suffix lookup table and an LSTM.
//!
//! All of them work on collapsed sequences (consecutive duplicates merged).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::blocks::{Fwd, Linear};
use crate::error::{Error, Result};
use crate::heads::one_hot;
use crate::optim::{adam_step, AdamState, GradAccumulator};
use crate::params::ParamStore;
use crate::recurrent::LstmCell;
use crate::rng::Rng;
use crate::tensor::{argmax, Tensor};

/// Segment-level actions of one sequence plus its activity, if known.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentSequence {
    pub actions: Vec<usize>,
    pub activity: Option<usize>,
}

impl SegmentSequence {
    /// Collapses a frame- or segment-level labeling.
    pub fn from_labels(labels: &[usize], activity: Option<usize>) -> Self {
        SegmentSequence {
            actions: collapse(labels),
            activity,
        }
    }
}

/// Merges runs of equal labels.
pub fn collapse(labels: &[usize]) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::with_capacity(labels.len());
    for &l in labels {
        if out.last() != Some(&l) {
            out.push(l);
        }
    }
    out
}

fn check_labels(seqs: &[SegmentSequence], n_actions: usize) -> Result<()> {
    for s in seqs {
        if let Some(&a) = s.actions.iter().find(|&&a| a >= n_actions) {
            return Err(Error::arg(format!("action {a} out of range for {n_actions} classes")));
        }
    }
    Ok(())
}

/// Percent of positions `k >= 1` whose action `predict(actions[..k], activity)` gets right.
pub fn next_action_accuracy<F>(seqs: &[SegmentSequence], mut predict: F) -> Result<f64>
where
    F: FnMut(&[usize], Option<usize>) -> Result<usize>,
{
    let (mut hits, mut total) = (0usize, 0usize);
    for s in seqs {
        let a = collapse(&s.actions);
        for k in 1..a.len() {
            hits += (predict(&a[..k], s.activity)? == a[k]) as usize;
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::arg("no transitions to score"));
    }
    Ok(100.0 * hits as f64 / total as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransitionMatrix {
    n_actions: usize,
    alpha: f64,
    counts: Vec<Vec<f64>>,
    per_activity: BTreeMap<usize, Vec<Vec<f64>>>,
    prior: Vec<f64>,
}

impl TransitionMatrix {
    pub fn fit(seqs: &[SegmentSequence], n_actions: usize, alpha: f64) -> Result<Self> {
        check_labels(seqs, n_actions)?;
        if !(alpha >= 0.0) {
            return Err(Error::arg(format!("smoothing must be non-negative, got {alpha}")));
        }
        let mut tm = TransitionMatrix {
            n_actions,
            alpha,
            counts: vec![vec![0.0; n_actions]; n_actions],
            per_activity: BTreeMap::new(),
            prior: vec![0.0; n_actions],
        };
        let mut seen = 0usize;
        for s in seqs {
            for w in collapse(&s.actions).windows(2) {
                tm.counts[w[0]][w[1]] += 1.0;
                tm.prior[w[1]] += 1.0;
                if let Some(z) = s.activity {
                    tm.per_activity
                        .entry(z)
                        .or_insert_with(|| vec![vec![0.0; n_actions]; n_actions])[w[0]][w[1]] += 1.0;
                }
                seen += 1;
            }
        }
        if seen == 0 {
            return Err(Error::arg("no transitions to fit"));
        }
        Ok(tm)
    }

    /// Smoothed, normalized row of `last`; `None` when the row was never observed.
    pub fn row(&self, last: usize, activity: Option<usize>) -> Option<Vec<f64>> {
        let counts = activity
            .and_then(|z| self.per_activity.get(&z))
            .map(|m| &m[last])
            .filter(|r| r.iter().sum::<f64>() > 0.0)
            .or_else(|| Some(&self.counts[last]).filter(|r| r.iter().sum::<f64>() > 0.0))?;
        let z: f64 = counts.iter().sum::<f64>() + self.alpha * self.n_actions as f64;
        Some(counts.iter().map(|c| (c + self.alpha) / z).collect())
    }

    pub fn predict(&self, last: usize, activity: Option<usize>) -> usize {
        if last >= self.n_actions {
            return self.prior_argmax();
        }
        self.row(last, activity)
            .map_or_else(|| self.prior_argmax(), |r| argmax(&r))
    }

    /// Most frequent next action over all training transitions.
    pub fn prior_argmax(&self) -> usize {
        argmax(&self.prior)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LookupTable {
    n_max: usize,
    table: BTreeMap<Vec<usize>, Vec<f64>>,
    tm: TransitionMatrix,
}

impl LookupTable {
    pub fn fit(seqs: &[SegmentSequence], n_actions: usize, n_max: usize, alpha: f64) -> Result<Self> {
        if n_max == 0 {
            return Err(Error::arg("lookup table context length must be >= 1"));
        }
        let tm = TransitionMatrix::fit(seqs, n_actions, alpha)?;
        let mut table: BTreeMap<Vec<usize>, Vec<f64>> = BTreeMap::new();
        for s in seqs {
            let a = collapse(&s.actions);
            for end in 1..a.len() {
                for n in 1..=n_max.min(end) {
                    table.entry(a[end - n..end].to_vec()).or_insert_with(|| vec![0.0; n_actions])[a[end]] += 1.0;
                }
            }
        }
        Ok(LookupTable { n_max, table, tm })
    }

    /// Longest stored suffix of `context` wins; otherwise the transition matrix, then the prior.
    pub fn predict(&self, context: &[usize]) -> usize {
        let ctx = collapse(context);
        for n in (1..=self.n_max.min(ctx.len())).rev() {
            if let Some(counts) = self.table.get(&ctx[ctx.len() - n..]) {
                return argmax(counts);
            }
        }
        match ctx.last() {
            Some(&last) => self.tm.predict(last, None),
            None => self.tm.prior_argmax(),
        }
    }

    pub fn contains(&self, context: &[usize]) -> bool {
        self.table.contains_key(context)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RnnConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
}

impl Default for RnnConfig {
    fn default() -> Self {
        RnnConfig {
            hidden: 512,
            epochs: 25,
            lr: 1e-3,
            batch: 10,
        }
    }
}

/// LSTM over one-hot segment labels with a linear head on the last state.
#[derive(Clone, Debug, PartialEq)]
pub struct RnnBaseline {
    n_actions: usize,
    params: ParamStore,
    cell: LstmCell,
    head: Linear,
}

impl RnnBaseline {
    pub fn new(n_actions: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = Rng::stream(seed, 0x5EED);
        let mut params = ParamStore::new();
        let cell = LstmCell::new(&mut params, "rnn.lstm", n_actions, hidden, &mut rng);
        let head = Linear::new(&mut params, "rnn.head", hidden, n_actions, &mut rng);
        RnnBaseline {
            n_actions,
            params,
            cell,
            head,
        }
    }

    /// Trains on next-label prediction at every position; returns the mean loss per epoch.
    pub fn fit(seqs: &[SegmentSequence], n_actions: usize, cfg: &RnnConfig, seed: u64) -> Result<(Self, Vec<f64>)> {
        check_labels(seqs, n_actions)?;
        if cfg.batch == 0 || cfg.hidden == 0 {
            return Err(Error::config("rnn batch and hidden must be >= 1"));
        }
        let mut model = RnnBaseline::new(n_actions, cfg.hidden, seed);
        let data: Vec<Vec<usize>> = seqs
            .iter()
            .map(|s| collapse(&s.actions))
            .filter(|a| a.len() >= 2)
            .collect();
        if data.is_empty() {
            return Err(Error::arg("no sequence has a transition"));
        }
        let mut adam = AdamState::new(model.params.tensors(), cfg.lr);
        let mut curve = Vec::with_capacity(cfg.epochs);
        let mut order: Vec<usize> = (0..data.len()).collect();
        for epoch in 0..cfg.epochs {
            Rng::stream(seed, 1 + epoch as u64).shuffle(&mut order);
            let mut acc = GradAccumulator::new();
            let mut total = 0.0;
            for (k, &i) in order.iter().enumerate() {
                let (loss, grads) = model.loss_and_grads(&data[i])?;
                total += loss;
                acc.add(grads);
                if acc.count() == cfg.batch || k + 1 == order.len() {
                    let g = acc.take_mean();
                    adam_step(model.params.tensors_mut(), &g, &mut adam)?;
                }
            }
            curve.push(total / data.len() as f64);
        }
        Ok((model, curve))
    }

    fn loss_and_grads(&self, seq: &[usize]) -> Result<(f64, Vec<Tensor>)> {
        let mut graph = Graph::new();
        let mut rng = Rng::new(0);
        let mut fx = Fwd::new(&mut graph, &self.params, true, &mut rng);
        let mut state = self.cell.zero_state(&mut fx);
        let mut terms = Vec::with_capacity(seq.len() - 1);
        for w in seq.windows(2) {
            let x = fx.graph.constant(one_hot(w[0], self.n_actions));
            state = self.cell.step(&mut fx, x, state)?;
            let logits = self.head.forward(&mut fx, state.h)?;
            terms.push(fx.graph.cross_entropy(logits, w[1])?);
        }
        let sum = fx.graph.add_all(&terms)?;
        let loss = fx.graph.scale(sum, 1.0 / terms.len() as f64);
        let value = graph.value(loss).item();
        let grads = graph.backward(loss)?.params(&self.params);
        Ok((value, grads))
    }

    /// Next-action logits after reading `context`.
    pub fn logits(&self, context: &[usize]) -> Result<Vec<f64>> {
        let ctx = collapse(context);
        if ctx.is_empty() {
            return Err(Error::arg("empty context"));
        }
        let mut graph = Graph::new();
        let mut rng = Rng::new(0);
        let mut fx = Fwd::new(&mut graph, &self.params, false, &mut rng);
        let mut state = self.cell.zero_state(&mut fx);
        for &a in &ctx {
            if a >= self.n_actions {
                return Err(Error::arg(format!("action {a} out of range")));
            }
            let x = fx.graph.constant(one_hot(a, self.n_actions));
            state = self.cell.step(&mut fx, x, state)?;
        }
        let logits = self.head.forward(&mut fx, state.h)?;
        Ok(graph.value(logits).data().to_vec())
    }

    pub fn predict(&self, context: &[usize]) -> Result<usize> {
        Ok(argmax(&self.logits(context)?))
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }
}
