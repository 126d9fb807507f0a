//! Experiment configuration.
//!
//! A config is a TOML document (or the equivalent JSON object). Unknown keys
//! are rejected everywhere and [`ExperimentConfig::validate`] checks every
//! field before a run touches the filesystem.
//!
//! ```toml
//! seed = 7
//!
//! [dataset]
//! kind = "blobs"            # or "csv" with `train`, `test`, `feature_scale`, `classes`
//! classes = 4
//! dim = 16
//! train_size = 1024
//! test_size = 512
//!
//! [model]
//! hidden = [64, 64]
//!
//! [optimizer]
//! name = "agent"            # sgd | svrg | agent | adam | mvr | agent+mvr
//! lr = 0.1
//! agent = { gamma = 0.1, alpha = 0.5 }
//!
//! [sparsity]
//! target_sparsity = 0.9
//! rule = "set"              # set | rigl
//!
//! [objective]
//! kind = "standard"         # standard | at | trades
//!
//! [training]
//! epochs = 60
//! batch_size = 128
//! lr_schedule = { breakpoints = [50, 100], factors = [0.1, 0.1] }
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adversarial::AttackConfig;
use crate::error::{Error, Result};
use crate::nn::{load_csv, BlobsSpec, Dataset, ModelSpec};
use crate::optim::OptimizerConfig;
use crate::sparsity::SparsitySchedule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetConfig {
    Blobs(BlobsSpec),
    Csv {
        train: PathBuf,
        test: PathBuf,
        #[serde(default = "default_feature_scale")]
        feature_scale: f64,
        #[serde(default)]
        classes: Option<usize>,
    },
}

fn default_feature_scale() -> f64 {
    1.0
}

impl DatasetConfig {
    fn validate(&self) -> Result<()> {
        match self {
            DatasetConfig::Blobs(b) => b.validate(),
            DatasetConfig::Csv { train, test, feature_scale, classes } => {
                for (field, p) in [("dataset.train", train), ("dataset.test", test)] {
                    if !p.is_file() {
                        return Err(Error::config(field, format!("{} is not a readable file", p.display())));
                    }
                }
                if !(*feature_scale > 0.0) || !feature_scale.is_finite() {
                    return Err(Error::config("dataset.feature_scale", "must be positive and finite"));
                }
                if matches!(classes, Some(c) if *c < 2) {
                    return Err(Error::config("dataset.classes", "need at least 2"));
                }
                Ok(())
            }
        }
    }

    /// Materialise `(train, test)`. CSV test labels must fit the train class count.
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match self {
            DatasetConfig::Blobs(b) => b.generate(),
            DatasetConfig::Csv { train, test, feature_scale, classes } => {
                let tr = load_csv(train, *feature_scale, *classes)?;
                let te = load_csv(test, *feature_scale, Some(tr.classes()))?;
                if te.dim() != tr.dim() {
                    return Err(Error::Dataset(format!("train has {} features but test has {}", tr.dim(), te.dim())));
                }
                Ok((tr, te))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden layer widths (ReLU); empty for a linear classifier.
    #[serde(default)]
    pub hidden: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    #[default]
    Standard,
    At,
    Trades,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveConfig {
    #[serde(default)]
    pub kind: Objective,
    /// TRADES trade-off weight.
    #[serde(default = "default_beta")]
    pub beta: f64,
}

fn default_beta() -> f64 {
    6.0
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig { kind: Objective::Standard, beta: default_beta() }
    }
}

/// Piecewise-constant learning-rate multipliers: from epoch `breakpoints[i]`
/// on, the rate is multiplied by `factors[i]` (cumulatively).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub breakpoints: Vec<usize>,
    pub factors: Vec<f64>,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule { breakpoints: vec![50, 100], factors: vec![0.1, 0.1] }
    }
}

impl LrSchedule {
    pub fn constant() -> Self {
        LrSchedule { breakpoints: Vec::new(), factors: Vec::new() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.breakpoints.len() != self.factors.len() {
            return Err(Error::config("training.lr_schedule", "breakpoints and factors differ in length"));
        }
        if self.breakpoints.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("training.lr_schedule.breakpoints", "must be strictly increasing"));
        }
        if self.factors.iter().any(|f| !(*f > 0.0) || !f.is_finite()) {
            return Err(Error::config("training.lr_schedule.factors", "must be positive and finite"));
        }
        Ok(())
    }

    /// Rate for (0-based) `epoch`.
    pub fn lr_at(&self, base: f64, epoch: usize) -> f64 {
        self.breakpoints.iter().zip(&self.factors).filter(|(&b, _)| epoch >= b).fold(base, |lr, (_, &f)| lr * f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    /// Record the gradient correlation between consecutive anchors at every
    /// snapshot (AGENT only; costs two extra probe-set gradients per epoch).
    #[serde(default)]
    pub trace_correlation: bool,
}

fn default_epochs() -> usize {
    60
}
fn default_batch_size() -> usize {
    128
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            lr_schedule: LrSchedule::default(),
            trace_correlation: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    /// Report robust test accuracy; defaults to on for adversarial objectives.
    #[serde(default)]
    pub robust: Option<bool>,
    /// Attack used for robust accuracy; defaults to the training attack.
    #[serde(default)]
    pub attack: Option<AttackConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub dataset: DatasetConfig,
    #[serde(default = "default_model")]
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    /// Omitted means dense training.
    #[serde(default)]
    pub sparsity: Option<SparsitySchedule>,
    #[serde(default)]
    pub objective: ObjectiveConfig,
    /// Training-time attack (AT / TRADES).
    #[serde(default)]
    pub attack: AttackConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    #[serde(default)]
    pub training: TrainingConfig,
}

fn default_model() -> ModelConfig {
    ModelConfig { hidden: vec![64] }
}

fn parse_error(format: &str, e: impl std::fmt::Display) -> Error {
    Error::config("<document>", format!("{format} parse error: {e}"))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| parse_error("TOML", e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| parse_error("JSON", e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// `.json` files are read as JSON, everything else as TOML.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
            Self::from_json(&text)
        } else {
            Self::from_toml(&text)
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serialises")
    }

    /// SHA-256 of the canonical JSON form, hex.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.to_json().as_bytes()))
    }

    pub fn is_adversarial(&self) -> bool {
        self.objective.kind != Objective::Standard
    }

    pub fn robust_eval(&self) -> bool {
        self.evaluation.robust.unwrap_or(self.is_adversarial())
    }

    pub fn eval_attack(&self) -> &AttackConfig {
        self.evaluation.attack.as_ref().unwrap_or(&self.attack)
    }

    /// Model spec for a dataset of the given shape.
    pub fn model_spec(&self, input_dim: usize, classes: usize) -> Result<ModelSpec> {
        ModelSpec::mlp(input_dim, &self.model.hidden, classes)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        if let Some(i) = self.model.hidden.iter().position(|&w| w == 0) {
            return Err(Error::config(format!("model.hidden[{i}]"), "width must be positive"));
        }
        self.optimizer.validate()?;
        if let Some(s) = &self.sparsity {
            s.validate()?;
        }
        if !(self.objective.beta > 0.0) || !self.objective.beta.is_finite() {
            return Err(Error::config("objective.beta", "must be positive and finite"));
        }
        self.attack.validate()?;
        if let Some(a) = &self.evaluation.attack {
            a.validate().map_err(|e| match e {
                Error::Config { field, reason } => Error::config(format!("evaluation.{field}"), reason),
                other => other,
            })?;
        }
        if self.training.batch_size == 0 {
            return Err(Error::config("training.batch_size", "must be positive"));
        }
        self.training.lr_schedule.validate()
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
