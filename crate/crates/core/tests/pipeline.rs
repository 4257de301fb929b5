mod common;

use std::path::Path;
use std::process::Command;

use tagg::config::Task;
use tagg::io;
use tagg::train::{ablate, ablation_variants, evaluate, holdout_split, spanning_sweep, train};
use tagg::Error;

use tagg::synth::{presets, FeatureEmitter};

use common::fixtures::{corpus, desk, small_config};

#[test]
fn desk_grammar_is_learnable() {
    let (tr, te) = holdout_split(desk(24, 4), 4);
    let mut cfg = small_config(Task::NextAction, 1);
    cfg.model.hidden = 32;
    cfg.optim.epochs = 25;
    let state = train(&cfg, &tr, &te).unwrap();
    let held = evaluate(&state.model, &cfg, &te).unwrap().headline();
    assert!(held >= 90.0, "held-out {held}");
    assert_eq!(state.curve.last().unwrap().heldout, Some(held));
    assert_eq!(state.curve.len(), 25);
}

#[test]
fn train_split_scores_at_least_heldout() {
    // Heavy feature noise and few sequences leave a generalization gap.
    let emitter = FeatureEmitter::overlapping(presets::DESK_ACTIONS, 16, 6, 1.0, 2.0, 8).unwrap();
    let (tr, te) = holdout_split(corpus(&presets::desk(), &emitter, 16, 1.0, 8), 4);
    let mut cfg = small_config(Task::NextAction, 4);
    cfg.optim.epochs = 15;
    let state = train(&cfg, &tr, &[]).unwrap();
    let on_train = evaluate(&state.model, &cfg, &tr).unwrap().headline();
    let held = evaluate(&state.model, &cfg, &te).unwrap().headline();
    assert!(on_train >= held, "train {on_train} < held-out {held}");
}

#[test]
fn ablation_rows_follow_the_requested_values() {
    let (tr, te) = holdout_split(desk(8, 5), 4);
    let cfg = small_config(Task::NextAction, 2);
    let one = ablate(&cfg, &tr, &te, "recent_starts", Some(&["10".to_string()])).unwrap();
    assert_eq!(one.len(), 1);
    assert_eq!(one[0].variant, "recent_starts=10");

    let pooling = ablation_variants(&cfg, "pooling_type", None).unwrap();
    let names: Vec<&str> = pooling.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, ["pooling_type=sample", "pooling_type=mean", "pooling_type=max"]);
    for (_, c) in &pooling {
        let mut same = c.clone();
        same.snippets.pooling = cfg.snippets.pooling;
        assert_eq!(same, cfg);
    }
    assert_eq!(ablation_variants(&cfg, "no_nlb", None).unwrap().len(), 2);

    match ablate(&cfg, &tr, &te, "depth", None) {
        Err(Error::Argument(_)) => {}
        other => panic!("expected an argument error, got {other:?}"),
    }
}

#[test]
fn sweep_at_zero_matches_default_evaluate() {
    let (tr, te) = holdout_split(desk(8, 6), 4);
    let cfg = small_config(Task::NextAction, 3);
    let sweep = spanning_sweep(&cfg, &tr, &te, &[0.0]).unwrap();
    let state = train(&cfg, &tr, &[]).unwrap();
    assert_eq!(sweep, vec![(0.0, evaluate(&state.model, &cfg, &te).unwrap())]);
    assert_eq!(spanning_sweep(&cfg, &tr, &te, &[0.0, 0.5, 0.9]).unwrap().len(), 3);
}

fn tagg(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_tagg"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) {
    let out = tagg(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn fails_with(args: &[&str], needle: &str) {
    let out = tagg(args);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(!out.status.success(), "{args:?} succeeded");
    assert!(err.contains(needle), "{args:?}: expected {needle:?} in {err}");
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn cli_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    let out = dir.path().join("run");
    ok(&["generate", "--preset", "desk", "--sequences", "8", "--fps", "1", "--dim", "16", "--seed", "3", "--out", s(&corpus)]);
    assert_eq!(io::read_corpus(&corpus).unwrap().len(), 8);

    let common = ["--seed", "1", "--task", "next_action", "--corpus", s(&corpus), "--out", s(&out)];
    let small = ["--epochs", "2", "--hidden", "8"];
    ok(&[&["train"][..], &common, &small].concat());
    for f in ["checkpoint.bin", "curve.csv", "checkpoint.sha256"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let curve = std::fs::read_to_string(out.join("curve.csv")).unwrap();
    assert!(curve.starts_with("epoch,lr,loss,heldout\n"));
    assert_eq!(curve.lines().count(), 3);

    ok(&[&["evaluate"][..], &common].concat());
    let report = io::read_report(&out.join("report.txt")).unwrap();
    assert_eq!(report.task, "next_action");

    fails_with(
        &["evaluate", "--seed", "1", "--task", "dense", "--corpus", s(&corpus), "--out", s(&out)],
        "configuration error",
    );
    fails_with(&[&["ablate"][..], &common, &small, &["--axis", "depth"]].concat(), "unknown ablation axis");

    ok(&[&["ablate"][..], &common, &small, &["--axis", "recent_starts", "--value", "10"]].concat());
    let table = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert_eq!(table.lines().count(), 2, "{table}");

    ok(&[&["sweep"][..], &common, &small, &["--fractions", "0,0.5"]].concat());
    let sweep = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert!(sweep.starts_with("fraction,"));
    assert_eq!(sweep.lines().count(), 3);

    // Flip the label flag of one file so ingestion fails at byte 20.
    let victim = corpus.join("seq_0002.tagg");
    let mut bytes = std::fs::read(&victim).unwrap();
    bytes[20] = 9;
    std::fs::write(&victim, bytes).unwrap();
    fails_with(&[&["train"][..], &common, &small].concat(), "corrupt data at byte 20");
}
