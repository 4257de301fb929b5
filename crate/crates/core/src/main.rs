use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use tagg::baselines::{next_action_accuracy, LookupTable, RnnBaseline, RnnConfig, SegmentSequence, TransitionMatrix};
use tagg::config::{InputMode, RunConfig, Task};
use tagg::io;
use tagg::metrics::EvalReport;
use tagg::snippets::{FrameSequence, Pooling};
use tagg::synth::{generate_corpus, presets, ActivityGrammar, FeatureEmitter};
use tagg::train;

#[derive(Parser)]
#[command(name = "tagg", version, about = "Temporal aggregate models for action anticipation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus of feature files and sidecars.
    Generate(GenerateArgs),
    /// Train a model and write its checkpoint and loss curve.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a corpus.
    Evaluate(EvaluateArgs),
    /// Train and evaluate every variant along one ablation axis.
    Ablate(AblateArgs),
    /// Accuracy as a function of where the spanning range starts.
    Sweep(SweepArgs),
    /// Transition-matrix, lookup-table and LSTM next-action baselines.
    Baselines(BaselineArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    Markov,
    Order3,
    ThreeStep,
    Segmentation,
}

impl Preset {
    fn grammars(self) -> (Vec<ActivityGrammar>, usize) {
        match self {
            Preset::Desk => (presets::desk(), presets::DESK_ACTIONS),
            Preset::Markov => (presets::markov(), presets::DESK_ACTIONS),
            Preset::Order3 => (presets::order3(), presets::ORDER3_ACTIONS),
            Preset::ThreeStep => (presets::three_step(), 3),
            Preset::Segmentation => (presets::segmentation(), 4),
        }
    }
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
    #[arg(long, default_value_t = 60)]
    sequences: usize,
    #[arg(long, default_value_t = 5.0)]
    fps: f64,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    /// Gaussian noise on every feature.
    #[arg(long, default_value_t = 0.5)]
    sigma: f64,
    /// Active dimensions per prototype; 0 gives orthogonal prototypes.
    #[arg(long, default_value_t = 0)]
    overlap: usize,
    #[arg(long, default_value_t = 2.0)]
    scale: f64,
    #[arg(long, default_value_t = 0)]
    distractors: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// Flags shared by every subcommand that trains.
#[derive(Args)]
struct RunArgs {
    /// TOML run configuration; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    task: Task,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Evaluation corpus; without it every `holdout_every`-th sequence is held out.
    #[arg(long)]
    test_corpus: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    pooling: Option<Pooling>,
    /// Feed one-hot ground-truth labels instead of features.
    #[arg(long)]
    frame_gt: bool,
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                RunConfig::from_toml(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        cfg.seed = self.seed;
        cfg.task = self.task;
        if let Some(v) = self.epochs {
            cfg.optim.epochs = v;
        }
        if let Some(v) = self.lr {
            cfg.optim.lr = v;
        }
        if let Some(v) = self.batch {
            cfg.optim.batch = v;
        }
        if let Some(v) = self.hidden {
            cfg.model.hidden = v;
        }
        if let Some(v) = self.pooling {
            cfg.snippets.pooling = v;
        }
        if self.frame_gt {
            cfg.input = InputMode::FrameGt;
        }
        cfg.paths.corpus = Some(self.corpus.clone());
        cfg.paths.out = Some(self.out.clone());
        cfg.validate()?;
        Ok(cfg)
    }

    /// Training and evaluation sequences.
    fn split(&self, cfg: &RunConfig) -> Result<(Vec<FrameSequence>, Vec<FrameSequence>)> {
        let corpus = io::read_corpus(&self.corpus)?;
        match &self.test_corpus {
            Some(p) => Ok((corpus, io::read_corpus(p)?)),
            None => {
                let every = if cfg.holdout_every == 0 { 5 } else { cfg.holdout_every };
                let (tr, te) = train::holdout_split(corpus, every);
                if te.is_empty() {
                    bail!("corpus too small to hold out every {every}th sequence; pass --test-corpus");
                }
                Ok((tr, te))
            }
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    task: Task,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Defaults to `<out>/checkpoint.bin`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    axis: String,
    /// One variant per occurrence, e.g. `--value 10,20 --value 10,20,30`.
    #[arg(long = "value")]
    values: Vec<String>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, value_delimiter = ',', default_value = "0,0.3,0.6,0.9")]
    fractions: Vec<f64>,
}

#[derive(Args)]
struct BaselineArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    test_corpus: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    holdout_every: usize,
    #[arg(long)]
    n_actions: Option<usize>,
    #[arg(long, default_value_t = 4)]
    n_max: usize,
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,
    #[arg(long, default_value_t = 512)]
    rnn_hidden: usize,
    #[arg(long, default_value_t = 25)]
    rnn_epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    rnn_lr: f64,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
        Command::Sweep(a) => sweep_cmd(a),
        Command::Baselines(a) => baselines_cmd(a),
    }
}

fn generate(a: GenerateArgs) -> Result<()> {
    let (grammars, n_actions) = a.preset.grammars();
    let emitter = if a.overlap == 0 {
        FeatureEmitter::orthogonal(n_actions, a.dim, a.scale, a.sigma)?
    } else {
        FeatureEmitter::overlapping(n_actions, a.dim, a.overlap, a.scale, a.sigma, a.seed)?
    };
    let emitter = FeatureEmitter {
        distractors: a.distractors,
        ..emitter
    };
    let corpus = generate_corpus(&grammars, &emitter, a.sequences, a.fps, a.seed)?;
    let seqs: Vec<FrameSequence> = corpus.into_iter().map(|s| s.sequence).collect();
    let paths = io::write_corpus(&a.out, &seqs)?;
    println!("wrote {} sequences to {}", paths.len(), a.out.display());
    Ok(())
}

fn write_report_files(dir: &Path, report: &EvalReport) -> Result<()> {
    io::write_report(&dir.join("report.txt"), report)?;
    if !report.dense.is_empty() {
        io::write_table(&dir.join("dense.csv"), &["obs", "pred", "class_mean"], &io::dense_table_rows(report))?;
    }
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let cfg = a.run.config()?;
    let seqs = io::read_corpus(&a.run.corpus)?;
    let (train_seqs, heldout) = train::holdout_split(seqs, cfg.holdout_every);
    let state = train::train(&cfg, &train_seqs, &heldout)?;
    let hash = io::save_checkpoint(&a.run.out.join("checkpoint.bin"), &state)?;
    io::write_table(
        &a.run.out.join("curve.csv"),
        &["epoch", "lr", "loss", "heldout"],
        &io::curve_rows(&state.curve),
    )?;
    fs::write(a.run.out.join("checkpoint.sha256"), format!("{hash}\n"))?;
    println!("checkpoint sha256 {hash}");
    Ok(())
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<()> {
    let path = a.checkpoint.unwrap_or_else(|| a.out.join("checkpoint.bin"));
    let state = io::load_checkpoint(&path)?;
    if state.config.task != a.task {
        return Err(tagg::Error::Config(format!(
            "checkpoint was trained for {} but --task is {}",
            state.config.task, a.task
        ))
        .into());
    }
    if state.config.seed != a.seed {
        log::warn!("--seed {} differs from the checkpoint seed {}", a.seed, state.config.seed);
    }
    let seqs = io::read_corpus(&a.corpus)?;
    let report = train::evaluate(&state.model, &state.config, &seqs)?;
    write_report_files(&a.out, &report)?;
    print!("{}", io::report_text(&report));
    Ok(())
}

fn summary_row(name: &str, r: &EvalReport) -> Vec<String> {
    let o = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| x.to_string());
    vec![
        name.to_string(),
        r.headline().to_string(),
        o(r.top1),
        o(r.top5),
        o(r.class_mean),
        o(r.seg.map(|s| s.f1[2])),
        o(r.seg.map(|s| s.edit)),
    ]
}

const SUMMARY_HEADER: [&str; 7] = ["variant", "headline", "top1", "top5", "class_mean", "f1_50", "edit"];

fn ablate_cmd(a: AblateArgs) -> Result<()> {
    let cfg = a.run.config()?;
    let (tr, te) = a.run.split(&cfg)?;
    let values = (!a.values.is_empty()).then_some(a.values.as_slice());
    let rows = train::ablate(&cfg, &tr, &te, &a.axis, values)?;
    let table: Vec<Vec<String>> = rows.iter().map(|r| summary_row(&r.variant, &r.report)).collect();
    io::write_table(&a.run.out.join("ablation.csv"), &SUMMARY_HEADER, &table)?;
    for row in &table {
        println!("{}", row.join("\t"));
    }
    Ok(())
}

fn sweep_cmd(a: SweepArgs) -> Result<()> {
    let cfg = a.run.config()?;
    let (tr, te) = a.run.split(&cfg)?;
    let points = train::spanning_sweep(&cfg, &tr, &te, &a.fractions)?;
    let table: Vec<Vec<String>> = points
        .iter()
        .map(|(f, r)| summary_row(&f.to_string(), r))
        .collect();
    let mut header = SUMMARY_HEADER;
    header[0] = "fraction";
    io::write_table(&a.run.out.join("sweep.csv"), &header, &table)?;
    for row in &table {
        println!("{}", row.join("\t"));
    }
    Ok(())
}

fn baselines_cmd(a: BaselineArgs) -> Result<()> {
    let corpus = io::read_corpus(&a.corpus)?;
    let (tr, te) = match &a.test_corpus {
        Some(p) => (corpus, io::read_corpus(p)?),
        None => train::holdout_split(corpus, a.holdout_every),
    };
    if te.is_empty() {
        bail!("no evaluation sequences");
    }
    let to_segments = |s: &[FrameSequence]| -> Result<Vec<SegmentSequence>> {
        s.iter()
            .map(|q| Ok(SegmentSequence::from_labels(q.labels()?, q.activity)))
            .collect()
    };
    let (tr, te) = (to_segments(&tr)?, to_segments(&te)?);
    let n_actions = match a.n_actions {
        Some(n) => n,
        None => tr.iter().chain(&te).flat_map(|s| s.actions.iter().copied()).max().unwrap_or(0) + 1,
    };
    let tm = TransitionMatrix::fit(&tr, n_actions, a.alpha)?;
    let lut = LookupTable::fit(&tr, n_actions, a.n_max, a.alpha)?;
    let rnn_cfg = RnnConfig {
        hidden: a.rnn_hidden,
        epochs: a.rnn_epochs,
        lr: a.rnn_lr,
        ..Default::default()
    };
    let (rnn, _) = RnnBaseline::fit(&tr, n_actions, &rnn_cfg, a.seed)?;
    let rows = vec![
        ("tm", next_action_accuracy(&te, |c, z| Ok(tm.predict(*c.last().unwrap(), z)))?),
        ("lut", next_action_accuracy(&te, |c, _| Ok(lut.predict(c)))?),
        ("rnn", next_action_accuracy(&te, |c, _| rnn.predict(c))?),
    ];
    let table: Vec<Vec<String>> = rows.iter().map(|(n, v)| vec![n.to_string(), v.to_string()]).collect();
    io::write_table(&a.out.join("baselines.csv"), &["method", "accuracy"], &table)?;
    for (n, v) in rows {
        println!("{n}\t{v:.2}");
    }
    Ok(())
}
