//! Budgeted evolutionary template search.
//!
//! A pool of scored templates starts from ε. Each sweep selects a Pareto
//! front of the pool, mutates every front member with a reflection operator
//! fed by its failures on a fresh training mini-batch, and keeps a child only
//! if it strictly improves on that mini-batch. The final pool is reduced by
//! greedy set cover and each hard sample receives `K` templates.

mod assign;
mod pareto;
mod reflect;
mod run;

pub use assign::{AssignmentMap, CoverStep, greedy_cover, greedy_prompt_assignment};
pub use pareto::{dominates, nondominated, select_pareto_front};
pub use reflect::{
    ExternalReflector, Failure, FeedbackBundle, FeedbackGuided, RandomMutation,
    ReflectionOperator, Transport, WireRequest, WireResponse, WireTemplate,
};
pub use run::{
    Acceptance, GepaOutcome, LedgerEvent, LedgerKind, evaluate_template, gepa_run, split_hard,
};

use serde::{Deserialize, Serialize};

use crate::env::Template;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GepaConfig {
    /// Total evaluation budget, in per-sample template evaluations.
    pub budget: u64,
    pub minibatch_size: usize,
    pub beam_width: usize,
    /// Fixed dev size; when absent, `min(|hard| / 2, max_dev_size)`.
    pub dev_size: Option<usize>,
    pub max_dev_size: usize,
    /// Rollouts per sample when scoring a template.
    pub n_eval: usize,
    pub eval_temperature: f64,
}

impl Default for GepaConfig {
    fn default() -> Self {
        Self {
            budget: 2000,
            minibatch_size: 4,
            beam_width: 16,
            dev_size: None,
            max_dev_size: 64,
            n_eval: 4,
            eval_temperature: 0.6,
        }
    }
}

impl GepaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.budget == 0 || self.minibatch_size == 0 || self.beam_width == 0 {
            return Err(Error::Config(
                "budget, minibatch_size and beam_width must be >= 1".into(),
            ));
        }
        if self.n_eval == 0 || self.max_dev_size == 0 || self.dev_size == Some(0) {
            return Err(Error::Config("n_eval and dev sizes must be >= 1".into()));
        }
        crate::policy::Sampling::from_temperature(self.eval_temperature)?;
        Ok(())
    }

    /// Dev-split size for a hard set of `n >= 2` samples, at least 1 and
    /// leaving at least one training sample.
    pub fn dev_size_for(&self, n: usize) -> usize {
        let wanted = self.dev_size.unwrap_or((n / 2).min(self.max_dev_size));
        wanted.clamp(1, n.saturating_sub(1).max(1))
    }
}

/// A template with its binary scores on the dev split.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredTemplate {
    pub template: Template,
    pub dev_scores: Vec<u8>,
    pub mean_score: f64,
}

impl ScoredTemplate {
    pub fn new(template: Template, dev_scores: Vec<u8>) -> Self {
        let mean_score = if dev_scores.is_empty() {
            0.0
        } else {
            dev_scores.iter().map(|&s| f64::from(s)).sum::<f64>() / dev_scores.len() as f64
        };
        Self {
            template,
            dev_scores,
            mean_score,
        }
    }

    /// Dev indices this template solves.
    pub fn coverage(&self) -> impl Iterator<Item = usize> + '_ {
        self.dev_scores
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == 1)
            .map(|(n, _)| n)
    }
}
