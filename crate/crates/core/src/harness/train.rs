use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::eval::{InsertionCounter, pass_rates, template_free_accuracy};
use super::report::MetricsRecord;
use super::{Mode, PretrainConfig, ReflectorConfig, RunConfig};
use crate::distill::build_distill_batch;
use crate::env::{self, Environment, Sample, Template, TemplateSpace};
use crate::error::{Error, Result};
use crate::gepa::{
    AssignmentMap, ExternalReflector, FeedbackGuided, LedgerEvent, RandomMutation,
    ReflectionOperator, gepa_run,
};
use crate::grpo::{self, RolloutGroup};
use crate::policy::{self, PolicyParams, Sampling};
use crate::rng::{self, tag};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_train_reward: f64,
    pub hard_count: usize,
    pub val_accuracy: f64,
    pub hard_subset_accuracy: f64,
    /// Hard-dev pass rates on raw inputs; null when no prompt search ran.
    pub pass_at_1: Option<f64>,
    pub pass_at_k: Option<f64>,
    /// Hard-dev pass rates under the assigned templates.
    pub pass_at_1_with_templates: Option<f64>,
    pub pass_at_k_with_templates: Option<f64>,
    pub gepa_budget_used: u64,
    /// Seconds; null unless `record_wall_time` is set.
    pub wall_time: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GepaEventRecord {
    pub epoch: usize,
    #[serde(flatten)]
    pub event: LedgerEvent,
}

/// One retained template after an epoch's prompt search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateRecord {
    pub epoch: usize,
    pub template_id: usize,
    pub genome: Option<Vec<usize>>,
    pub dev_ids: Vec<usize>,
    pub dev_scores: Vec<u8>,
    pub mean_score: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub metrics: Vec<EpochMetrics>,
    pub params: PolicyParams,
    pub assignment: AssignmentMap,
    pub gepa_events: Vec<GepaEventRecord>,
    pub templates: Vec<TemplateRecord>,
    /// Non-ε insertions seen by template-free evaluation; always 0.
    pub eval_template_insertions: usize,
}

/// Supervised ascent on `log π(target | φ)` over the corpus, one sample at
/// a time, in a seeded order per pass.
pub fn pretrain(params: &mut PolicyParams, corpus: &[Sample], cfg: &PretrainConfig, seed: u64) -> Result<()> {
    cfg.validate()?;
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut grad = PolicyParams::zeros_like(params);
    for pass in 0..cfg.epochs {
        order.shuffle(&mut rng::stream(seed, &[tag::PRETRAIN_ORDER, pass as u64]));
        for &i in &order {
            let x = &corpus[i];
            grad.weights_mut().fill(0.0);
            grad.bias_mut().fill(0.0);
            policy::accumulate_grad_log_prob(params, &x.features, &x.target, 1.0, &mut grad)?;
            params.add_scaled(&grad, cfg.lr);
        }
    }
    if !params.is_finite() {
        return Err(Error::numerical("pretraining diverged", None));
    }
    Ok(())
}

pub fn build_reflector(
    cfg: &ReflectorConfig,
    space: &TemplateSpace,
    params: &PolicyParams,
) -> Box<dyn ReflectionOperator> {
    match cfg {
        ReflectorConfig::FeedbackGuided => Box::new(FeedbackGuided::new(space.clone(), params.clone())),
        ReflectorConfig::Random => Box::new(RandomMutation::new(space.clone())),
        ReflectorConfig::External { transport, .. } => Box::new(ExternalReflector::new(
            space.clone(),
            transport.clone(),
            cfg.timeout().expect("external reflector has a timeout"),
        )),
    }
}

/// Templates for the `K` rollouts of sample `id`, if it has an assignment.
fn assigned(assignment: &AssignmentMap, id: usize, mode: Mode, k: usize) -> Option<Vec<(usize, &Template)>> {
    let ids = assignment.templates_for(id)?;
    let picks: Vec<usize> = match mode {
        Mode::SameTemplateInGroup => vec![ids[0]; k],
        _ => ids.to_vec(),
    };
    Some(
        picks
            .into_iter()
            .map(|t| (t, &assignment.retained[&t].template))
            .collect(),
    )
}

struct Sinks {
    dir: PathBuf,
    metrics: BufWriter<File>,
    events: BufWriter<File>,
    templates: BufWriter<File>,
}

impl Sinks {
    fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let open = |name: &str| -> Result<BufWriter<File>> { Ok(BufWriter::new(File::create(dir.join(name))?)) };
        Ok(Self {
            dir: dir.to_path_buf(),
            metrics: open("metrics.jsonl")?,
            events: open("gepa_events.jsonl")?,
            templates: open("templates.jsonl")?,
        })
    }

    fn line<T: Serialize>(w: &mut BufWriter<File>, value: &T) -> Result<()> {
        serde_json::to_writer(&mut *w, value)?;
        w.write_all(b"\n")?;
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        self.metrics.flush()?;
        self.events.flush()?;
        self.templates.flush()?;
        Ok(())
    }
}

/// Runs the full training loop. With `out_dir`, also writes the datasets,
/// `metrics.jsonl`, `gepa_events.jsonl`, `templates.jsonl` and a checkpoint
/// `epoch_<t>.ckpt` after every epoch.
pub fn run_p2o(cfg: &RunConfig, out_dir: Option<&Path>) -> Result<RunOutput> {
    cfg.validate()?;
    let environment = Environment::new(cfg.env.clone())?;
    let train = environment.training_set();
    let heldout = environment.heldout_set();
    let (v, l, d) = (cfg.env.vocab_size, cfg.env.seq_len, cfg.env.feat_dim);
    let run_id = cfg.run_id();
    let k = cfg.group.k;
    let eval_sampling = Sampling::from_temperature(cfg.gepa.eval_temperature)?;

    let mut sinks = match out_dir {
        Some(dir) => {
            let s = Sinks::create(dir)?;
            env::save_dataset(&dir.join("train.jsonl"), &train)?;
            env::save_dataset(&dir.join("heldout.jsonl"), &heldout)?;
            Some(s)
        }
        None => None,
    };

    let mut params = PolicyParams::zeros(v, l, d);
    if cfg.pretrain.epochs > 0 {
        let corpus = environment.pretrain_corpus(cfg.pretrain.corpus_size);
        pretrain(&mut params, &corpus, &cfg.pretrain, cfg.seed)?;
    }
    let reference = (cfg.group.kl_coeff > 0.0).then(|| params.clone());

    let counter = InsertionCounter::default();
    let mut assignment = AssignmentMap::default();
    let mut metrics = Vec::with_capacity(cfg.n_epochs);
    let mut gepa_events = Vec::new();
    let mut templates = Vec::new();

    for epoch in 0..cfg.n_epochs {
        let started = Instant::now();
        let e = epoch as u64;

        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng::stream(cfg.seed, &[tag::BATCH_ORDER, e]));
        let mut groups: Vec<RolloutGroup> = Vec::with_capacity(train.len());
        for chunk in order.chunks(cfg.group.batch_size) {
            let batch_groups: Vec<RolloutGroup> = chunk
                .par_iter()
                .map(|&i| {
                    let x = &train[i];
                    let z = assigned(&assignment, x.id, cfg.mode, k);
                    let mut r = rng::stream(cfg.seed, &[tag::ROLLOUT, e, x.id as u64]);
                    grpo::rollout_group(&params, x, z.as_deref(), &cfg.group, &mut r)
                })
                .collect::<Result<_>>()
                .map_err(|err| err.at_epoch(epoch, "rollout"))?;
            let batch = build_distill_batch(&batch_groups, &train, cfg.mode.distill_mode())
                .map_err(|err| err.at_epoch(epoch, "batch"))?;
            grpo::policy_update(&mut params, &batch, &cfg.group, reference.as_ref())
                .map_err(|err| err.at_epoch(epoch, "update"))?;
            groups.extend(batch_groups);
        }
        let rewards: Vec<f64> = groups.iter().flat_map(|g| g.rewards.iter().map(|&r| f64::from(r))).collect();
        let mean_train_reward = rewards.iter().sum::<f64>() / rewards.len().max(1) as f64;

        let hard = grpo::mine_hard(&groups, &cfg.mining, epoch);
        let outcome = if cfg.mode.uses_templates() && hard.len() >= 2 {
            let reflector = build_reflector(&cfg.reflector, environment.templates(), &params);
            let mut r = rng::stream(cfg.seed, &[tag::GEPA, e]);
            Some(
                gepa_run(&hard, &train, &params, reflector.as_ref(), &cfg.gepa, k, &mut r)
                    .map_err(|err| err.at_epoch(epoch, "prompt search"))?,
            )
        } else {
            None
        };
        assignment = outcome.as_ref().map(|o| o.assignment.clone()).unwrap_or_default();

        let acc = template_free_accuracy(&params, &heldout, k, eval_sampling, cfg.seed, epoch, &counter)
            .map_err(|err| err.at_epoch(epoch, "evaluation"))?;
        let (plain, templated) = match &outcome {
            Some(o) => {
                let epsilon = environment.templates().empty();
                let dev: Vec<&Sample> = o.dev_ids.iter().map(|&id| &train[id]).collect();
                let plain_items: Vec<_> = dev.iter().map(|&x| (x, vec![&epsilon; k])).collect();
                let templated_items: Vec<_> = dev
                    .iter()
                    .map(|&x| {
                        let zs = assigned(&assignment, x.id, cfg.mode, k)
                            .map(|z| z.into_iter().map(|(_, t)| t).collect())
                            .unwrap_or_else(|| vec![&epsilon; k]);
                        (x, zs)
                    })
                    .collect();
                let p = pass_rates(&params, &plain_items, eval_sampling, cfg.seed, epoch)
                    .map_err(|err| err.at_epoch(epoch, "evaluation"))?;
                let t = pass_rates(&params, &templated_items, eval_sampling, cfg.seed, epoch)
                    .map_err(|err| err.at_epoch(epoch, "evaluation"))?;
                (Some(p), Some(t))
            }
            None => (None, None),
        };

        let record = EpochMetrics {
            epoch,
            mean_train_reward,
            hard_count: hard.len(),
            val_accuracy: acc.overall,
            hard_subset_accuracy: acc.hard_subset,
            pass_at_1: plain.map(|p| p.pass_at_1),
            pass_at_k: plain.map(|p| p.pass_at_k),
            pass_at_1_with_templates: templated.map(|p| p.pass_at_1),
            pass_at_k_with_templates: templated.map(|p| p.pass_at_k),
            gepa_budget_used: outcome.as_ref().map_or(0, |o| o.budget_used),
            wall_time: cfg.record_wall_time.then(|| started.elapsed().as_secs_f64()),
        };
        log::info!(
            "{run_id} epoch {epoch}: reward {:.3} hard {} val {:.3} hard-acc {:.3}",
            record.mean_train_reward,
            record.hard_count,
            record.val_accuracy,
            record.hard_subset_accuracy
        );

        let epoch_events: Vec<GepaEventRecord> = outcome
            .iter()
            .flat_map(|o| o.ledger.iter().cloned())
            .map(|event| GepaEventRecord { epoch, event })
            .collect();
        let epoch_templates: Vec<TemplateRecord> = match &outcome {
            Some(o) => o
                .assignment
                .retained
                .iter()
                .map(|(&id, t)| TemplateRecord {
                    epoch,
                    template_id: id,
                    genome: t.template.genome().map(<[usize]>::to_vec),
                    dev_ids: o.dev_ids.clone(),
                    dev_scores: t.dev_scores.clone(),
                    mean_score: t.mean_score,
                })
                .collect(),
            None => Vec::new(),
        };

        if let Some(s) = sinks.as_mut() {
            let line = MetricsRecord {
                run_id: run_id.clone(),
                mode: cfg.mode,
                seed: cfg.seed,
                metrics: record.clone(),
            };
            Sinks::line(&mut s.metrics, &line)?;
            for ev in &epoch_events {
                Sinks::line(&mut s.events, ev)?;
            }
            for t in &epoch_templates {
                Sinks::line(&mut s.templates, t)?;
            }
            s.flush()?;
            policy::save_checkpoint(&s.dir.join(format!("epoch_{epoch}.ckpt")), &params)?;
        }
        metrics.push(record);
        gepa_events.extend(epoch_events);
        templates.extend(epoch_templates);
    }

    Ok(RunOutput {
        metrics,
        params,
        assignment,
        gepa_events,
        templates,
        eval_template_insertions: counter.non_empty(),
    })
}
