//! Grammar-driven synthetic corpora of procedural activities.
//!
//! A grammar is a list of steps that expands to a sequence of action ids.
//! Each action gets a duration from its law, frames are labeled accordingly,
//! and features are drawn around per-action prototypes. Everything derives
//! from `Rng::stream(seed, sequence_index)`, so corpora are reproducible.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::snippets::{segments_of, FrameSequence, Segment};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Step {
    Action(usize),
    Choice {
        options: Vec<Vec<Step>>,
        /// Sampling weights for `ChoiceRule::Random`; empty means uniform.
        #[serde(default)]
        weights: Vec<f64>,
        #[serde(default)]
        rule: ChoiceRule,
    },
    Repeat {
        body: Vec<Step>,
        min: usize,
        max: usize,
    },
}

/// How a choice picks its option.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChoiceRule {
    #[default]
    Random,
    /// Same option index as the choice made `lag` choices earlier (modulo the option count).
    Lagged { lag: usize },
    /// Option `(sum of the last `order` action ids) mod options`.
    History { order: usize },
}

/// Duration in seconds: `mean * (1 + jitter * u)`, `u` uniform in `[-1, 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DurationLaw {
    pub mean: f64,
    #[serde(default)]
    pub jitter: f64,
}

impl DurationLaw {
    pub fn new(mean: f64, jitter: f64) -> Self {
        DurationLaw { mean, jitter }
    }

    pub fn sample_frames(&self, fps: f64, rng: &mut Rng) -> usize {
        let u = 2.0 * rng.uniform() - 1.0;
        ((self.mean * (1.0 + self.jitter * u) * fps).round() as usize).max(1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivityGrammar {
    pub activity: usize,
    pub steps: Vec<Step>,
    /// Duration law of each action id.
    pub durations: Vec<DurationLaw>,
}

struct Expansion<'a> {
    rng: &'a mut Rng,
    actions: Vec<usize>,
    choices: Vec<usize>,
}

impl ActivityGrammar {
    /// Deepest look-back of any choice rule (1 for purely random choices).
    pub fn markov_order(&self) -> usize {
        fn walk(steps: &[Step]) -> usize {
            steps
                .iter()
                .map(|s| match s {
                    Step::Action(_) => 1,
                    Step::Choice { options, rule, .. } => {
                        let own = match rule {
                            ChoiceRule::Random => 1,
                            ChoiceRule::Lagged { lag } => *lag,
                            ChoiceRule::History { order } => *order,
                        };
                        options.iter().map(|o| walk(o)).max().unwrap_or(1).max(own)
                    }
                    Step::Repeat { body, .. } => walk(body),
                })
                .max()
                .unwrap_or(1)
        }
        walk(&self.steps)
    }

    pub fn validate(&self, n_actions: usize) -> Result<()> {
        let root = format!("activity {}", self.activity);
        if min_len(&self.steps) == 0 {
            return Err(grammar_err(&root, "some derivation yields no action"));
        }
        self.validate_steps(&self.steps, &root, n_actions)
    }

    fn validate_steps(&self, steps: &[Step], path: &str, n_actions: usize) -> Result<()> {
        for (k, step) in steps.iter().enumerate() {
            match step {
                Step::Action(a) => {
                    let here = format!("{path}, step {k} (action {a})");
                    if *a >= n_actions {
                        return Err(grammar_err(&here, &format!("action id >= {n_actions}")));
                    }
                    let law = self
                        .durations
                        .get(*a)
                        .ok_or_else(|| grammar_err(&here, "no duration law"))?;
                    if !(law.mean > 0.0) || !(0.0..1.0).contains(&law.jitter) {
                        return Err(grammar_err(&here, "duration mean must be > 0 and jitter in [0, 1)"));
                    }
                }
                Step::Choice { options, weights, rule } => {
                    let here = format!("{path}, step {k} (choice)");
                    if options.is_empty() {
                        return Err(grammar_err(&here, "no options"));
                    }
                    if !weights.is_empty()
                        && (weights.len() != options.len()
                            || weights.iter().any(|&w| !(w >= 0.0))
                            || !(weights.iter().sum::<f64>() > 0.0))
                    {
                        return Err(grammar_err(&here, "weights must match options and have a positive sum"));
                    }
                    if matches!(rule, ChoiceRule::Lagged { lag: 0 } | ChoiceRule::History { order: 0 }) {
                        return Err(grammar_err(&here, "look-back must be >= 1"));
                    }
                    for (o, opt) in options.iter().enumerate() {
                        self.validate_steps(opt, &format!("{here}, option {o}"), n_actions)?;
                    }
                }
                Step::Repeat { body, min, max } => {
                    let here = format!("{path}, step {k} (repeat)");
                    if body.is_empty() || min > max {
                        return Err(grammar_err(&here, "needs a body and min <= max"));
                    }
                    self.validate_steps(body, &here, n_actions)?;
                }
            }
        }
        Ok(())
    }

    /// One derivation as a list of action ids.
    pub fn sample_actions(&self, rng: &mut Rng) -> Result<Vec<usize>> {
        let mut ex = Expansion {
            rng,
            actions: Vec::new(),
            choices: Vec::new(),
        };
        expand(&self.steps, &format!("activity {}", self.activity), &mut ex)?;
        Ok(ex.actions)
    }
}

fn grammar_err(rule: &str, reason: &str) -> Error {
    Error::Grammar {
        rule: rule.to_string(),
        reason: reason.to_string(),
    }
}

fn min_len(steps: &[Step]) -> usize {
    steps
        .iter()
        .map(|s| match s {
            Step::Action(_) => 1,
            Step::Choice { options, .. } => options.iter().map(|o| min_len(o)).min().unwrap_or(0),
            Step::Repeat { body, min, .. } => min * min_len(body),
        })
        .sum()
}

fn expand(steps: &[Step], path: &str, ex: &mut Expansion) -> Result<()> {
    for (k, step) in steps.iter().enumerate() {
        match step {
            Step::Action(a) => ex.actions.push(*a),
            Step::Choice { options, weights, rule } => {
                let here = format!("{path}, step {k} (choice)");
                let pick = match *rule {
                    ChoiceRule::Random if weights.is_empty() => ex.rng.below(options.len()),
                    ChoiceRule::Random => ex.rng.weighted(weights),
                    ChoiceRule::Lagged { lag } => {
                        let n = ex.choices.len();
                        if lag > n {
                            return Err(grammar_err(&here, &format!("lag {lag} but only {n} earlier choices")));
                        }
                        ex.choices[n - lag] % options.len()
                    }
                    ChoiceRule::History { order } => {
                        let n = ex.actions.len();
                        if order > n {
                            return Err(grammar_err(&here, &format!("order {order} but only {n} earlier actions")));
                        }
                        ex.actions[n - order..].iter().sum::<usize>() % options.len()
                    }
                };
                ex.choices.push(pick);
                expand(&options[pick], &format!("{here}, option {pick}"), ex)?;
            }
            Step::Repeat { body, min, max } => {
                let reps = min + ex.rng.below(max - min + 1);
                for _ in 0..reps {
                    expand(body, &format!("{path}, step {k} (repeat)"), ex)?;
                }
            }
        }
    }
    Ok(())
}

/// Per-action prototypes plus Gaussian noise and optional pure-noise dimensions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureEmitter {
    pub prototypes: Vec<Vec<f64>>,
    pub sigma: f64,
    #[serde(default)]
    pub distractors: usize,
}

impl FeatureEmitter {
    pub fn new(prototypes: Vec<Vec<f64>>, sigma: f64, distractors: usize) -> Result<Self> {
        let d = prototypes.first().map_or(0, Vec::len);
        if d == 0 || prototypes.iter().any(|p| p.len() != d) {
            return Err(Error::arg("prototypes must be non-empty and equally sized"));
        }
        for (i, a) in prototypes.iter().enumerate() {
            if prototypes[..i].contains(a) {
                return Err(Error::arg(format!("prototype {i} duplicates an earlier one")));
            }
        }
        if !(sigma >= 0.0) {
            return Err(Error::arg(format!("sigma must be non-negative, got {sigma}")));
        }
        Ok(FeatureEmitter {
            prototypes,
            sigma,
            distractors,
        })
    }

    /// Prototype `a` is `scale` times the `a`-th unit vector.
    pub fn orthogonal(n_actions: usize, dim: usize, scale: f64, sigma: f64) -> Result<Self> {
        if dim < n_actions {
            return Err(Error::arg(format!("{dim} dims cannot hold {n_actions} orthogonal prototypes")));
        }
        let protos = (0..n_actions)
            .map(|a| (0..dim).map(|j| if j == a { scale } else { 0.0 }).collect())
            .collect();
        Self::new(protos, sigma, 0)
    }

    /// Each prototype sets `active` random dimensions to `scale`, so prototypes share dimensions.
    pub fn overlapping(n_actions: usize, dim: usize, active: usize, scale: f64, sigma: f64, seed: u64) -> Result<Self> {
        if active == 0 || active > dim {
            return Err(Error::arg(format!("active dims {active} outside [1, {dim}]")));
        }
        let mut rng = Rng::stream(seed, 0xFEA7);
        let mut protos: Vec<Vec<f64>> = Vec::with_capacity(n_actions);
        while protos.len() < n_actions {
            let mut idx: Vec<usize> = (0..dim).collect();
            rng.shuffle(&mut idx);
            let mut p = vec![0.0; dim];
            idx[..active].iter().for_each(|&j| p[j] = scale);
            if !protos.contains(&p) {
                protos.push(p);
            }
        }
        Self::new(protos, sigma, 0)
    }

    pub fn dim(&self) -> usize {
        self.prototypes[0].len() + self.distractors
    }

    /// `T x dim()` features; values pass through `f32` so they survive the feature-file format.
    pub fn emit(&self, labels: &[usize], rng: &mut Rng) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(labels.len() * self.dim());
        for &l in labels {
            let proto = self
                .prototypes
                .get(l)
                .ok_or_else(|| Error::arg(format!("no prototype for action {l}")))?;
            for &p in proto {
                out.push(quantize(p + self.sigma * rng.normal()));
            }
            for _ in 0..self.distractors {
                out.push(quantize(self.sigma * rng.normal()));
            }
        }
        Ok(out)
    }
}

fn quantize(v: f64) -> f64 {
    v as f32 as f64
}

/// Features for `labels` drawn from `Rng::new(seed)`.
pub fn emit_features(labels: &[usize], emitter: &FeatureEmitter, seed: u64) -> Result<Vec<f64>> {
    emitter.emit(labels, &mut Rng::new(seed))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedSequence {
    pub sequence: FrameSequence,
    pub segments: Vec<Segment>,
}

/// Sequence `i` uses grammar `i % grammars.len()` and `Rng::stream(seed, i)`.
pub fn generate_corpus(
    grammars: &[ActivityGrammar],
    emitter: &FeatureEmitter,
    n_sequences: usize,
    fps: f64,
    seed: u64,
) -> Result<Vec<AnnotatedSequence>> {
    if n_sequences == 0 || grammars.is_empty() {
        return Err(Error::arg("need at least one grammar and one sequence"));
    }
    for g in grammars {
        g.validate(emitter.prototypes.len())?;
    }
    (0..n_sequences)
        .map(|i| {
            let g = &grammars[i % grammars.len()];
            let mut rng = Rng::stream(seed, i as u64);
            let actions = g.sample_actions(&mut rng)?;
            let mut labels = Vec::new();
            for a in actions {
                let n = g.durations[a].sample_frames(fps, &mut rng);
                labels.extend(std::iter::repeat(a).take(n));
            }
            let features = emitter.emit(&labels, &mut rng)?;
            let segments = segments_of(&labels);
            let sequence = FrameSequence::new(features, emitter.dim(), fps)?
                .with_labels(labels)?
                .with_activity(Some(g.activity));
            Ok(AnnotatedSequence { sequence, segments })
        })
        .collect()
}

/// Ready-made grammars used by the tests and the `generate` subcommand.
pub mod presets {
    use super::*;

    fn actions(ids: &[usize]) -> Vec<Step> {
        ids.iter().map(|&a| Step::Action(a)).collect()
    }

    /// Actions of the desk grammars.
    pub const DESK_ACTIONS: usize = 12;

    /// Three activities over twelve actions. Activity `z` opens with a brief
    /// key action `4 + z`, runs the shared actions 0, 1, 2, then its own
    /// action `7 + z`, shared 3, and closes with `10 + z % 2`. The actions
    /// after 2 and after 3 depend on the key, seen only at the very start.
    pub fn desk() -> Vec<ActivityGrammar> {
        let mut durations = vec![DurationLaw::new(25.0, 0.2); DESK_ACTIONS];
        for key in 4..7 {
            durations[key] = DurationLaw::new(1.6, 0.0);
        }
        (0..3)
            .map(|z| ActivityGrammar {
                activity: z,
                steps: actions(&[4 + z, 0, 1, 2, 7 + z, 3, 10 + z % 2]),
                durations: durations.clone(),
            })
            .collect()
    }

    /// Three activities with disjoint deterministic chains: the next action
    /// is always a function of the current one.
    pub fn markov() -> Vec<ActivityGrammar> {
        let durations = vec![DurationLaw::new(25.0, 0.2); DESK_ACTIONS];
        (0..3)
            .map(|z| ActivityGrammar {
                activity: z,
                steps: actions(&[4 * z, 4 * z + 1, 4 * z + 2, 4 * z + 3]),
                durations: durations.clone(),
            })
            .collect()
    }

    pub const ORDER3_ACTIONS: usize = 23;

    /// Start `z`, a branch `K`, two shared random steps, and an ending that
    /// repeats the `K` branch three choices later. Action ids: starts 0..3,
    /// branches 3..9, shared 9..17, endings 17..23.
    pub fn order3() -> Vec<ActivityGrammar> {
        let durations = vec![DurationLaw::new(4.0, 0.25); ORDER3_ACTIONS];
        let skew = vec![0.4, 0.3, 0.2, 0.1];
        (0..3)
            .map(|z| ActivityGrammar {
                activity: z,
                steps: vec![
                    Step::Action(z),
                    Step::Choice {
                        options: vec![actions(&[3 + 2 * z]), actions(&[4 + 2 * z])],
                        weights: vec![0.6, 0.4],
                        rule: ChoiceRule::Random,
                    },
                    Step::Choice {
                        options: (9..13).map(|a| actions(&[a])).collect(),
                        weights: skew.clone(),
                        rule: ChoiceRule::Random,
                    },
                    Step::Choice {
                        options: (13..17).map(|a| actions(&[a])).collect(),
                        weights: skew.clone(),
                        rule: ChoiceRule::Random,
                    },
                    Step::Choice {
                        options: vec![actions(&[17 + 2 * z]), actions(&[18 + 2 * z])],
                        weights: Vec::new(),
                        rule: ChoiceRule::Lagged { lag: 3 },
                    },
                ],
                durations: durations.clone(),
            })
            .collect()
    }

    /// A(40 s) -> B(40 s) -> C(40 s); at 1 fps every sequence is 120 frames.
    pub fn three_step() -> Vec<ActivityGrammar> {
        vec![ActivityGrammar {
            activity: 0,
            steps: actions(&[0, 1, 2]),
            durations: vec![DurationLaw::new(40.0, 0.0); 3],
        }]
    }

    /// Random orders of four actions of a few seconds each.
    pub fn segmentation() -> Vec<ActivityGrammar> {
        vec![ActivityGrammar {
            activity: 0,
            steps: vec![Step::Repeat {
                body: vec![Step::Choice {
                    options: (0..4).map(|a| actions(&[a])).collect(),
                    weights: Vec::new(),
                    rule: ChoiceRule::Random,
                }],
                min: 8,
                max: 12,
            }],
            durations: vec![DurationLaw::new(4.0, 0.5); 4],
        }]
    }
}
