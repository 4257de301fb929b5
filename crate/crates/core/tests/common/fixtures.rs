//! Small corpora and configurations that train in well under a second.

use tagg::config::{OptimConfig, RunConfig, Task};
use tagg::heads::ModelConfig;
use tagg::snippets::{FrameSequence, SnippetConfig};
use tagg::synth::{generate_corpus, presets, ActivityGrammar, FeatureEmitter};

pub fn corpus(grammars: &[ActivityGrammar], emitter: &FeatureEmitter, n: usize, fps: f64, seed: u64) -> Vec<FrameSequence> {
    generate_corpus(grammars, emitter, n, fps, seed)
        .unwrap()
        .into_iter()
        .map(|a| a.sequence)
        .collect()
}

/// Desk corpus at 1 fps with orthogonal action prototypes.
pub fn desk(n: usize, seed: u64) -> Vec<FrameSequence> {
    let emitter = FeatureEmitter::orthogonal(presets::DESK_ACTIONS, 16, 2.0, 0.5).unwrap();
    corpus(&presets::desk(), &emitter, n, 1.0, seed)
}

pub fn small_config(task: Task, seed: u64) -> RunConfig {
    RunConfig {
        task,
        seed,
        snippets: SnippetConfig {
            recent_starts: vec![10.0, 20.0],
            recent_k: 3,
            spanning_scales: vec![3, 5],
            ..Default::default()
        },
        model: ModelConfig {
            hidden: 16,
            dropout: 0.1,
            ..Default::default()
        },
        optim: OptimConfig {
            lr: 1e-3,
            batch: 8,
            epochs: 3,
            ..Default::default()
        },
        ..Default::default()
    }
}
