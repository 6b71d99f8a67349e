//! Experiment driver: configuration, the training loop, evaluation and
//! reporting.

mod eval;
mod report;
mod train;

pub use eval::{Accuracy, InsertionCounter, PassRates, pass_rates, template_free_accuracy};
pub use report::{
    CrossRunRow, CrossRunTable, FinalAccuracy, MetricsRecord, epoch_csv, final_record, median,
    median_by_epoch, read_metrics, read_templates,
};
pub use train::{
    EpochMetrics, GepaEventRecord, RunOutput, TemplateRecord, build_reflector, pretrain, run_p2o,
};

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::distill::DistillMode;
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::gepa::{GepaConfig, Transport};
use crate::grpo::{GroupConfig, MiningConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    P2o,
    /// Plain group-relative training; prompt search never runs.
    GrpoOnly,
    /// Templates are used, but gradients are taken in the augmented context.
    NoDistill,
    /// One assigned template repeated for all rollouts of a group.
    SameTemplateInGroup,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::P2o, Mode::GrpoOnly, Mode::NoDistill, Mode::SameTemplateInGroup];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::P2o => "p2o",
            Mode::GrpoOnly => "grpo_only",
            Mode::NoDistill => "no_distill",
            Mode::SameTemplateInGroup => "same_template_in_group",
        }
    }

    pub fn uses_templates(self) -> bool {
        self != Mode::GrpoOnly
    }

    pub fn distill_mode(self) -> DistillMode {
        match self {
            Mode::NoDistill => DistillMode::Dependency,
            _ => DistillMode::Distill,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ReflectorConfig {
    FeedbackGuided,
    Random,
    External {
        transport: Transport,
        #[serde(default = "default_timeout_ms")]
        timeout_ms: u64,
    },
}

fn default_timeout_ms() -> u64 {
    10_000
}

impl ReflectorConfig {
    pub fn timeout(&self) -> Option<Duration> {
        match self {
            ReflectorConfig::External { timeout_ms, .. } => Some(Duration::from_millis(*timeout_ms)),
            _ => None,
        }
    }
}

impl FromStr for ReflectorConfig {
    type Err = Error;

    /// Accepts the two built-in operators by name; external reflectors need
    /// a transport and are configured through the config file.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "feedback_guided" => Ok(ReflectorConfig::FeedbackGuided),
            "random" => Ok(ReflectorConfig::Random),
            "external" => Err(Error::Config(
                "the external reflector needs a transport; set it in the config file".into(),
            )),
            other => Err(Error::Config(format!("unknown reflector {other:?}"))),
        }
    }
}

/// Supervised warm start on an easy-only corpus before the first epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub corpus_size: usize,
    /// Passes over the corpus; 0 keeps the zero initialization.
    pub epochs: usize,
    pub lr: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            corpus_size: 512,
            epochs: 5,
            lr: 0.1,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs > 0 && (self.corpus_size == 0 || !(self.lr.is_finite() && self.lr > 0.0)) {
            return Err(Error::Config(
                "pretraining needs a non-empty corpus and a positive finite lr".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub env: EnvConfig,
    pub group: GroupConfig,
    pub mining: MiningConfig,
    pub gepa: GepaConfig,
    pub n_epochs: usize,
    pub mode: Mode,
    pub reflector: ReflectorConfig,
    pub seed: u64,
    pub pretrain: PretrainConfig,
    /// Defaults to `<mode>-s<seed>`.
    pub run_id: Option<String>,
    /// Wall time makes metrics files differ between runs, so it is opt-in.
    pub record_wall_time: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            env: EnvConfig::default(),
            group: GroupConfig::default(),
            mining: MiningConfig::default(),
            gepa: GepaConfig::default(),
            n_epochs: 5,
            mode: Mode::P2o,
            reflector: ReflectorConfig::FeedbackGuided,
            seed: 0,
            pretrain: PretrainConfig::default(),
            run_id: None,
            record_wall_time: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.group.validate()?;
        self.mining.validate()?;
        self.gepa.validate()?;
        self.pretrain.validate()?;
        if self.n_epochs == 0 {
            return Err(Error::Config("n_epochs must be >= 1".into()));
        }
        Ok(())
    }

    pub fn run_id(&self) -> String {
        self.run_id
            .clone()
            .unwrap_or_else(|| format!("{}-s{}", self.mode, self.seed))
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?, path)
    }
}
