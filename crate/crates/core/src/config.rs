//! Experiment configuration and its flat TOML file form.
//!
//! A config file is a single table of scalar keys (plus the optional
//! `aggregators` and `lambda_schedule` arrays):
//!
//! ```toml
//! name = "bigram_em"
//! seed = 42
//! output_dir = "runs/bigram_em"
//!
//! task = "bigram_shift"
//! vocab_size = 64
//! min_len = 4
//! max_len = 16
//! classes = 2
//! train_size = 10000
//! valid_size = 1000
//! test_size = 1000
//!
//! layers = 2
//! width = 32
//! heads = 4
//! ffn_width = 64
//! aggregator = "em"          # or aggregators = ["em", "linear"]
//! output_caps = 8
//! iterations = 3
//! positional = "learned"     # or "sinusoidal", "none"
//!
//! learning_rate = 0.001
//! batch_size = 64
//! epochs = 20
//! ```
//!
//! Every other key has a default; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::Aggregator;
use crate::error::{Error, Result};
use crate::model::{EncoderConfig, ModelDims, Positional};
use crate::optim::OptimizerConfig;
use crate::routing::{RoutingConfig, RoutingKind, VoteDensity, DEFAULT_DENOM_EPS, DEFAULT_VAR_FLOOR};
use crate::tasks::{TaskKind, TaskSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub task: TaskSpec,
    pub model: EncoderConfig,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Seed for parameter initialisation and batch shuffling.
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Stop once validation accuracy reaches this value.
    pub target_valid_accuracy: Option<f64>,
}

impl ExperimentConfig {
    /// Desk-scale defaults: `d=32, H=4, L=2, N=8, T=3`, batch 64, Adam
    /// `lr=1e-3`, clip norm 1, 20 epochs.
    pub fn desk(name: &str, kind: TaskKind, aggregator: Aggregator, seed: u64) -> Self {
        let (width, heads) = (32, 4);
        ExperimentConfig {
            name: name.to_owned(),
            task: TaskSpec::desk(kind, seed),
            model: EncoderConfig {
                layers: 2,
                width,
                heads,
                ffn_width: 64,
                aggregators: vec![aggregator; 2],
                routing: RoutingConfig::new(RoutingKind::Em, heads, 8, 3, width).expect("valid desk routing"),
                positional: Positional::default(),
            },
            optimizer: OptimizerConfig::default(),
            batch_size: 64,
            epochs: 20,
            seed,
            output_dir: PathBuf::from("runs").join(name),
            target_valid_accuracy: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.model.validate()?;
        self.optimizer.validate()?;
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        if let Some(t) = self.target_valid_accuracy {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Config(format!("target_valid_accuracy {t} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims { vocab_size: self.task.vocab_size, max_len: self.task.max_len, classes: self.task.classes }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let flat: FlatConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        let cfg = flat.into_config()?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; a relative `output_dir` stays relative to the
    /// working directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(&FlatConfig::from_config(self)).expect("flat config serialises")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serialises")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Config(format!("bad embedded config: {e}")))
    }
}

fn default_seed() -> u64 {
    42
}
fn default_vocab() -> usize {
    64
}
fn default_min_len() -> usize {
    4
}
fn default_max_len() -> usize {
    16
}
fn default_train() -> usize {
    10_000
}
fn default_eval() -> usize {
    1_000
}
fn default_layers() -> usize {
    2
}
fn default_width() -> usize {
    32
}
fn default_heads() -> usize {
    4
}
fn default_ffn() -> usize {
    64
}
fn default_caps() -> usize {
    8
}
fn default_iterations() -> usize {
    3
}
fn default_var_floor() -> f64 {
    DEFAULT_VAR_FLOOR
}
fn default_denom_eps() -> f64 {
    DEFAULT_DENOM_EPS
}
fn default_batch() -> usize {
    64
}
fn default_epochs() -> usize {
    20
}

/// On-disk shape of [`ExperimentConfig`].
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FlatConfig {
    name: String,
    #[serde(default = "default_seed")]
    seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    output_dir: Option<PathBuf>,

    task: TaskKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    data_seed: Option<u64>,
    #[serde(default = "default_vocab")]
    vocab_size: usize,
    #[serde(default = "default_min_len")]
    min_len: usize,
    #[serde(default = "default_max_len")]
    max_len: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    classes: Option<usize>,
    #[serde(default = "default_train")]
    train_size: usize,
    #[serde(default = "default_eval")]
    valid_size: usize,
    #[serde(default = "default_eval")]
    test_size: usize,

    #[serde(default = "default_layers")]
    layers: usize,
    #[serde(default = "default_width")]
    width: usize,
    #[serde(default = "default_heads")]
    heads: usize,
    #[serde(default = "default_ffn")]
    ffn_width: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    aggregator: Option<Aggregator>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    aggregators: Option<Vec<Aggregator>>,
    #[serde(default = "default_caps")]
    output_caps: usize,
    #[serde(default = "default_iterations")]
    iterations: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lambda_schedule: Option<Vec<f64>>,
    #[serde(default = "default_var_floor")]
    var_floor: f64,
    #[serde(default = "default_denom_eps")]
    denom_eps: f64,
    #[serde(default)]
    density: VoteDensity,
    #[serde(default)]
    positional: Positional,

    #[serde(default, skip_serializing_if = "Option::is_none")]
    learning_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    beta1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    beta2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    adam_eps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    clip_norm: Option<f64>,
    #[serde(default = "default_batch")]
    batch_size: usize,
    #[serde(default = "default_epochs")]
    epochs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    target_valid_accuracy: Option<f64>,
}

impl FlatConfig {
    fn into_config(self) -> Result<ExperimentConfig> {
        let aggregators = match (self.aggregator, self.aggregators) {
            (Some(_), Some(_)) => {
                return Err(Error::Config("give either `aggregator` or `aggregators`, not both".into()));
            }
            (Some(a), None) => vec![a; self.layers],
            (None, Some(v)) => v,
            (None, None) => vec![Aggregator::Linear; self.layers],
        };
        let defaults = TaskSpec::desk(self.task, 0);
        let task = TaskSpec {
            kind: self.task,
            vocab_size: self.vocab_size,
            min_len: self.min_len,
            max_len: self.max_len,
            classes: self.classes.unwrap_or(defaults.classes),
            train_size: self.train_size,
            valid_size: self.valid_size,
            test_size: self.test_size,
            seed: self.data_seed.unwrap_or(self.seed),
        };
        let routing = RoutingConfig {
            kind: RoutingKind::Em,
            input_caps: self.heads,
            output_caps: self.output_caps,
            iterations: self.iterations,
            width: self.width,
            var_floor: self.var_floor,
            lambda_schedule: self
                .lambda_schedule
                .unwrap_or_else(|| (1..=self.iterations).map(|t| t as f64).collect()),
            denom_eps: self.denom_eps,
            density: self.density,
        };
        let d = OptimizerConfig::default();
        Ok(ExperimentConfig {
            output_dir: self.output_dir.unwrap_or_else(|| PathBuf::from("runs").join(&self.name)),
            name: self.name,
            task,
            model: EncoderConfig {
                layers: self.layers,
                width: self.width,
                heads: self.heads,
                ffn_width: self.ffn_width,
                aggregators,
                routing,
                positional: self.positional,
            },
            optimizer: OptimizerConfig {
                learning_rate: self.learning_rate.unwrap_or(d.learning_rate),
                beta1: self.beta1.unwrap_or(d.beta1),
                beta2: self.beta2.unwrap_or(d.beta2),
                eps: self.adam_eps.unwrap_or(d.eps),
                clip_norm: self.clip_norm.unwrap_or(d.clip_norm),
            },
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.seed,
            target_valid_accuracy: self.target_valid_accuracy,
        })
    }

    fn from_config(c: &ExperimentConfig) -> Self {
        let r = &c.model.routing;
        FlatConfig {
            name: c.name.clone(),
            seed: c.seed,
            output_dir: Some(c.output_dir.clone()),
            task: c.task.kind,
            data_seed: Some(c.task.seed),
            vocab_size: c.task.vocab_size,
            min_len: c.task.min_len,
            max_len: c.task.max_len,
            classes: Some(c.task.classes),
            train_size: c.task.train_size,
            valid_size: c.task.valid_size,
            test_size: c.task.test_size,
            layers: c.model.layers,
            width: c.model.width,
            heads: c.model.heads,
            ffn_width: c.model.ffn_width,
            aggregator: None,
            aggregators: Some(c.model.aggregators.clone()),
            output_caps: r.output_caps,
            iterations: r.iterations,
            lambda_schedule: Some(r.lambda_schedule.clone()),
            var_floor: r.var_floor,
            denom_eps: r.denom_eps,
            density: r.density,
            positional: c.model.positional,
            learning_rate: Some(c.optimizer.learning_rate),
            beta1: Some(c.optimizer.beta1),
            beta2: Some(c.optimizer.beta2),
            adam_eps: Some(c.optimizer.eps),
            clip_norm: Some(c.optimizer.clip_norm),
            batch_size: c.batch_size,
            epochs: c.epochs,
            target_valid_accuracy: c.target_valid_accuracy,
        }
    }
}

/// Reads a task-only file (the `task`, `seed` and dataset keys of an
/// experiment file). `seed` seeds the generator.
pub fn task_spec_from_toml_str(s: &str) -> Result<TaskSpec> {
    let flat: FlatTask = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
    let defaults = TaskSpec::desk(flat.task, flat.seed);
    let spec = TaskSpec {
        vocab_size: flat.vocab_size,
        min_len: flat.min_len,
        max_len: flat.max_len,
        classes: flat.classes.unwrap_or(defaults.classes),
        train_size: flat.train_size,
        valid_size: flat.valid_size,
        test_size: flat.test_size,
        ..defaults
    };
    spec.validate()?;
    Ok(spec)
}

pub fn load_task_spec(path: &Path) -> Result<TaskSpec> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    task_spec_from_toml_str(&text)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FlatTask {
    task: TaskKind,
    #[serde(default = "default_seed")]
    seed: u64,
    #[serde(default = "default_vocab")]
    vocab_size: usize,
    #[serde(default = "default_min_len")]
    min_len: usize,
    #[serde(default = "default_max_len")]
    max_len: usize,
    #[serde(default)]
    classes: Option<usize>,
    #[serde(default = "default_train")]
    train_size: usize,
    #[serde(default = "default_eval")]
    valid_size: usize,
    #[serde(default = "default_eval")]
    test_size: usize,
}
