//! Run configuration, read from TOML and overridable from the command line.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::{DenseConfig, ModelConfig};
use crate::snippets::SnippetConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    #[default]
    NextAction,
    Dense,
    Recognition,
    Segmentation,
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "next_action" => Ok(Task::NextAction),
            "dense" => Ok(Task::Dense),
            "recognition" => Ok(Task::Recognition),
            "segmentation" => Ok(Task::Segmentation),
            _ => Err(Error::arg(format!("unknown task {s:?}"))),
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::NextAction => "next_action",
            Task::Dense => "dense",
            Task::Recognition => "recognition",
            Task::Segmentation => "segmentation",
        })
    }
}

/// What the model sees per frame.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    #[default]
    Features,
    /// One-hot ground-truth frame labels instead of features.
    FrameGt,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    /// The learning rate is multiplied by `decay_factor` after every `decay_every` epochs.
    pub decay_every: usize,
    pub decay_factor: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-4,
            batch: 10,
            epochs: 25,
            decay_every: 10,
            decay_factor: 0.1,
        }
    }
}

impl OptimConfig {
    /// Learning rate of 1-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let steps = (epoch.max(1) - 1) / self.decay_every.max(1);
        self.lr * self.decay_factor.powi(steps as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnticipationConfig {
    /// Seconds between the observation cut and the start of the target action.
    pub tau_alpha: f64,
}

impl Default for AnticipationConfig {
    fn default() -> Self {
        AnticipationConfig { tau_alpha: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenseTaskConfig {
    pub head: DenseConfig,
    /// Observed fractions at which training sequences are cut.
    pub train_obs: Vec<f64>,
    pub eval_obs: Vec<f64>,
    pub eval_pred: Vec<f64>,
}

impl Default for DenseTaskConfig {
    fn default() -> Self {
        DenseTaskConfig {
            head: DenseConfig::default(),
            train_obs: vec![0.1, 0.2, 0.3, 0.5],
            eval_obs: vec![0.2, 0.3],
            eval_pred: vec![0.1, 0.2, 0.3, 0.5],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentationConfig {
    pub window: f64,
    pub stride: f64,
    /// Stride between training windows.
    pub train_stride: f64,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        SegmentationConfig {
            window: 2.0,
            stride: 0.4,
            train_stride: 0.4,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    pub seed: u64,
    #[serde(default)]
    pub input: InputMode,
    /// Action vocabulary size; taken from the corpus when absent.
    #[serde(default)]
    pub n_actions: Option<usize>,
    /// Complex-activity count; taken from the corpus when absent.
    #[serde(default)]
    pub n_activities: Option<usize>,
    /// Every `holdout_every`-th training sequence is held out for per-epoch accuracy (0 disables).
    #[serde(default)]
    pub holdout_every: usize,
    #[serde(default)]
    pub snippets: SnippetConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub anticipation: AnticipationConfig,
    #[serde(default)]
    pub dense: DenseTaskConfig,
    #[serde(default)]
    pub segmentation: SegmentationConfig,
    #[serde(default)]
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: Task::NextAction,
            seed: 0,
            input: InputMode::Features,
            n_actions: None,
            n_activities: None,
            holdout_every: 0,
            snippets: SnippetConfig::default(),
            model: ModelConfig::default(),
            optim: OptimConfig::default(),
            anticipation: AnticipationConfig::default(),
            dense: DenseTaskConfig::default(),
            segmentation: SegmentationConfig::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    /// The configuration without machine-specific paths, as stored in checkpoints.
    pub fn snapshot(&self) -> RunConfig {
        RunConfig {
            paths: Paths::default(),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.snippets.validate()?;
        let o = &self.optim;
        if !(o.lr >= 0.0) || o.batch == 0 || o.decay_every == 0 || !(o.decay_factor > 0.0) {
            return Err(Error::config("lr must be >= 0, batch and decay_every >= 1, decay_factor > 0"));
        }
        if !(self.anticipation.tau_alpha > 0.0) {
            return Err(Error::config("tau_alpha must be positive"));
        }
        if !(0.0..1.0).contains(&self.model.dropout) {
            return Err(Error::config("dropout must lie in [0, 1)"));
        }
        match self.task {
            Task::Dense => {
                self.dense.head.validate()?;
                let fracs = self.dense.train_obs.iter().chain(&self.dense.eval_obs).chain(&self.dense.eval_pred);
                if self.dense.train_obs.is_empty() || fracs.clone().any(|&f| !(f > 0.0 && f <= 1.0)) {
                    return Err(Error::config("dense fractions must lie in (0, 1]"));
                }
            }
            Task::Segmentation => {
                let s = &self.segmentation;
                if !(s.window > 0.0 && s.stride > 0.0 && s.train_stride > 0.0) {
                    return Err(Error::config("segmentation window and strides must be positive"));
                }
            }
            _ => {}
        }
        Ok(())
    }
}
