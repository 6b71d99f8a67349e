use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    AssignmentMap, Failure, FeedbackBundle, GepaConfig, ReflectionOperator, ScoredTemplate,
    greedy_prompt_assignment, select_pareto_front,
};
use crate::env::{self, Sample, Template};
use crate::error::{Error, Result};
use crate::grpo::HardSet;
use crate::policy::{self, PolicyParams, Sampling};
use crate::rng::{self, Rng, tag};

/// Splits the hard set into (train, dev); both parts ascending by id.
pub fn split_hard(hard: &HardSet, cfg: &GepaConfig, rng: &mut Rng) -> Result<(Vec<usize>, Vec<usize>)> {
    let n = hard.len();
    if n < 2 {
        return Err(Error::SkipGepa(n));
    }
    let dev_size = cfg.dev_size_for(n);
    let mut is_dev = vec![false; n];
    for i in rand::seq::index::sample(rng, n, dev_size) {
        is_dev[i] = true;
    }
    let (dev, train): (Vec<_>, Vec<_>) = hard.ids().iter().zip(&is_dev).partition(|(_, d)| **d);
    Ok((
        train.into_iter().map(|(&id, _)| id).collect(),
        dev.into_iter().map(|(&id, _)| id).collect(),
    ))
}

struct Evaluated {
    scores: Vec<u8>,
    // last failing rollout per sample, for feedback
    predictions: Vec<Vec<usize>>,
}

fn evaluate_detailed(
    params: &PolicyParams,
    z: &Template,
    samples: &[&Sample],
    n_eval: usize,
    sampling: Sampling,
    rng: &mut Rng,
) -> Result<Evaluated> {
    let mut scores = Vec::with_capacity(samples.len());
    let mut predictions = Vec::with_capacity(samples.len());
    for x in samples {
        let input = env::insert_template(x, z);
        let mut solved = 0u8;
        let mut last = Vec::new();
        for _ in 0..n_eval {
            let y = policy::sample_trajectory(params, &input.features, sampling, rng)?;
            if env::reward(x, &y.tokens, params.vocab_size())? == 1 {
                solved = 1;
                break;
            }
            last = y.tokens;
        }
        scores.push(solved);
        predictions.push(last);
    }
    Ok(Evaluated { scores, predictions })
}

/// Binary score per sample: 1 iff any of `n_eval` rollouts under `T(x, z)`
/// succeeds. Costs `samples.len()` budget units to the caller.
pub fn evaluate_template(
    params: &PolicyParams,
    z: &Template,
    samples: &[&Sample],
    cfg: &GepaConfig,
    rng: &mut Rng,
) -> Result<Vec<u8>> {
    let sampling = Sampling::from_temperature(cfg.eval_temperature)?;
    Ok(evaluate_detailed(params, z, samples, cfg.n_eval, sampling, rng)?.scores)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LedgerKind {
    /// Scoring ε on dev before the budget starts; uncharged.
    InitDevEval,
    ParentEval,
    ChildEval,
    /// Dev scoring of an accepted child.
    DevEval,
    ReflectionFailed,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEvent {
    pub event: LedgerKind,
    pub cost: u64,
    /// Samples evaluated by this event.
    pub samples: usize,
    pub template_id: Option<usize>,
    pub parent_id: Option<usize>,
    pub sweep: usize,
    pub detail: Option<String>,
}

/// Why a non-ε pool member was admitted.
#[derive(Debug, Clone, PartialEq)]
pub struct Acceptance {
    pub template_id: usize,
    pub parent_id: usize,
    pub parent_minibatch_mean: f64,
    pub child_minibatch_mean: f64,
    pub sweep: usize,
}

#[derive(Debug, Clone)]
pub struct GepaOutcome {
    pub pool: Vec<ScoredTemplate>,
    pub train_ids: Vec<usize>,
    pub dev_ids: Vec<usize>,
    pub assignment: AssignmentMap,
    pub ledger: Vec<LedgerEvent>,
    pub budget_used: u64,
    pub acceptances: Vec<Acceptance>,
    pub sweeps: usize,
}

struct Candidate {
    parent_id: usize,
    minibatch: usize,
    parent_mean: f64,
    child: std::result::Result<(Template, f64), String>,
}

fn mean(scores: &[u8]) -> f64 {
    scores.iter().map(|&s| f64::from(s)).sum::<f64>() / scores.len().max(1) as f64
}

#[allow(clippy::too_many_arguments)]
fn run_candidate(
    params: &PolicyParams,
    reflector: &dyn ReflectionOperator,
    parent_id: usize,
    parent: &Template,
    train: &[&Sample],
    cfg: &GepaConfig,
    sampling: Sampling,
    rng: &mut Rng,
) -> Result<Candidate> {
    let b = cfg.minibatch_size.min(train.len());
    let batch: Vec<&Sample> = rand::seq::index::sample(rng, train.len(), b)
        .into_iter()
        .map(|i| train[i])
        .collect();
    let old = evaluate_detailed(params, parent, &batch, cfg.n_eval, sampling, rng)?;
    let feedback = FeedbackBundle {
        failures: batch
            .iter()
            .zip(&old.scores)
            .zip(old.predictions)
            .filter(|((_, s), _)| **s == 0)
            .map(|((x, _), prediction)| Failure {
                features: x.features.clone(),
                prediction,
                target: x.target.clone(),
            })
            .collect(),
    };
    let child = match reflector.propose(parent, &feedback, rng) {
        Ok(z) => {
            let new = evaluate_detailed(params, &z, &batch, cfg.n_eval, sampling, rng)?;
            Ok((z, mean(&new.scores)))
        }
        Err(e) => Err(e.to_string()),
    };
    Ok(Candidate {
        parent_id,
        minibatch: b,
        parent_mean: mean(&old.scores),
        child,
    })
}

/// Budgeted search over templates for the given hard set, ending in a
/// greedy-cover assignment of `k` templates per hard sample.
///
/// The budget counts per-sample evaluations: each candidate costs twice its
/// mini-batch, plus the dev size if accepted. A candidate is only started
/// while budget remains, so the overshoot is at most one candidate.
pub fn gepa_run(
    hard: &HardSet,
    dataset: &[Sample],
    params: &PolicyParams,
    reflector: &dyn ReflectionOperator,
    cfg: &GepaConfig,
    k: usize,
    rng: &mut Rng,
) -> Result<GepaOutcome> {
    cfg.validate()?;
    let seed = rng::fork(rng);
    let (train_ids, dev_ids) = split_hard(hard, cfg, &mut rng::stream(seed, &[tag::GEPA_SPLIT]))?;
    let by_id: HashMap<usize, &Sample> = dataset.iter().map(|s| (s.id, s)).collect();
    let lookup = |ids: &[usize]| -> Result<Vec<&Sample>> {
        ids.iter()
            .map(|id| {
                by_id
                    .get(id)
                    .copied()
                    .ok_or_else(|| Error::Data(format!("hard sample {id} not in dataset")))
            })
            .collect()
    };
    let train = lookup(&train_ids)?;
    let dev = lookup(&dev_ids)?;
    let sampling = Sampling::from_temperature(cfg.eval_temperature)?;
    let epsilon = Template::empty(params.feat_dim());

    let eps_scores = evaluate_template(params, &epsilon, &dev, cfg, &mut rng::stream(seed, &[tag::GEPA_INIT]))?;
    let mut pool = vec![ScoredTemplate::new(epsilon, eps_scores)];
    let mut ledger = vec![LedgerEvent {
        event: LedgerKind::InitDevEval,
        cost: 0,
        samples: dev.len(),
        template_id: Some(0),
        parent_id: None,
        sweep: 0,
        detail: None,
    }];
    let mut acceptances = Vec::new();
    let budget = i64::try_from(cfg.budget).map_err(|_| Error::Config("budget too large".into()))?;
    let mut left = budget;
    let mut sweep = 0usize;

    while left > 0 {
        let front = select_pareto_front(&pool, cfg.beam_width, &mut rng::stream(seed, &[tag::GEPA_FRONT, sweep as u64]))?;
        let candidates: Vec<Result<Candidate>> = front
            .par_iter()
            .enumerate()
            .map(|(slot, &pid)| {
                let mut crng = rng::stream(seed, &[tag::GEPA_CANDIDATE, sweep as u64, slot as u64]);
                run_candidate(params, reflector, pid, &pool[pid].template, &train, cfg, sampling, &mut crng)
            })
            .collect();

        for (slot, cand) in candidates.into_iter().enumerate() {
            if left <= 0 {
                break;
            }
            let cand = cand?;
            let event = |kind, samples: usize, template_id, detail| LedgerEvent {
                event: kind,
                cost: match kind {
                    LedgerKind::ParentEval | LedgerKind::ChildEval | LedgerKind::DevEval => samples as u64,
                    _ => 0,
                },
                samples,
                template_id,
                parent_id: Some(cand.parent_id),
                sweep,
                detail,
            };
            ledger.push(event(LedgerKind::ParentEval, cand.minibatch, Some(cand.parent_id), None));
            left -= cand.minibatch as i64;
            let (child, child_mean) = match cand.child {
                Ok(c) => c,
                Err(msg) => {
                    log::warn!("reflection failed for parent {}: {msg}", cand.parent_id);
                    ledger.push(event(LedgerKind::ReflectionFailed, 0, None, Some(msg)));
                    continue;
                }
            };
            ledger.push(event(LedgerKind::ChildEval, cand.minibatch, None, None));
            left -= cand.minibatch as i64;
            if child_mean > cand.parent_mean {
                let id = pool.len();
                let mut drng = rng::stream(seed, &[tag::GEPA_DEV, sweep as u64, slot as u64]);
                let scores = evaluate_template(params, &child, &dev, cfg, &mut drng)?;
                ledger.push(event(LedgerKind::DevEval, dev.len(), Some(id), None));
                left -= dev.len() as i64;
                acceptances.push(Acceptance {
                    template_id: id,
                    parent_id: cand.parent_id,
                    parent_minibatch_mean: cand.parent_mean,
                    child_minibatch_mean: child_mean,
                    sweep,
                });
                pool.push(ScoredTemplate::new(child, scores));
            } else {
                ledger.push(event(LedgerKind::Rejected, 0, None, None));
            }
        }
        sweep += 1;
    }

    let assignment = greedy_prompt_assignment(
        &pool,
        hard,
        &dev_ids,
        k,
        &mut rng::stream(seed, &[tag::GEPA_ASSIGN]),
    )?;
    Ok(GepaOutcome {
        pool,
        train_ids,
        dev_ids,
        assignment,
        budget_used: (budget - left) as u64,
        ledger,
        acceptances,
        sweeps: sweep,
    })
}
