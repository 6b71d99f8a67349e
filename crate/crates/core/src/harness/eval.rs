use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;

use crate::env::{self, AugmentedInput, Sample, Template};
use crate::error::Result;
use crate::policy::{self, PolicyParams, Sampling};
use crate::rng::{self, tag};

/// Routes template insertion and counts insertions of non-ε templates.
#[derive(Debug, Default)]
pub struct InsertionCounter {
    non_empty: AtomicUsize,
}

impl InsertionCounter {
    pub fn insert(&self, x: &Sample, z: &Template) -> AugmentedInput {
        if !z.is_empty() {
            self.non_empty.fetch_add(1, Ordering::Relaxed);
        }
        env::insert_template(x, z)
    }

    pub fn non_empty(&self) -> usize {
        self.non_empty.load(Ordering::Relaxed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Accuracy {
    /// Mean per-rollout success over all samples.
    pub overall: f64,
    /// The same over planted-hard samples; 0 when there are none.
    pub hard_subset: f64,
}

fn success_fraction(
    params: &PolicyParams,
    x: &Sample,
    inputs: &[Vec<f64>],
    sampling: Sampling,
    rng: &mut rng::Rng,
) -> Result<(usize, usize)> {
    let mut hits = 0;
    for phi in inputs {
        let y = policy::sample_trajectory(params, phi, sampling, rng)?;
        hits += usize::from(env::reward(x, &y.tokens, params.vocab_size())?);
    }
    Ok((hits, inputs.len()))
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 { 0.0 } else { sum / n as f64 }
}

/// Accuracy from `k` rollouts per sample on raw inputs. Every input passes
/// through `counter` with ε, so a non-zero count after the call would mean
/// a template leaked into evaluation.
pub fn template_free_accuracy(
    params: &PolicyParams,
    samples: &[Sample],
    k: usize,
    sampling: Sampling,
    seed: u64,
    epoch: usize,
    counter: &InsertionCounter,
) -> Result<Accuracy> {
    let epsilon = Template::empty(params.feat_dim());
    let per_sample: Vec<f64> = samples
        .par_iter()
        .map(|x| {
            let phi = counter.insert(x, &epsilon).features;
            let inputs = vec![phi; k];
            let mut r = rng::stream(seed, &[tag::EVAL, epoch as u64, x.id as u64]);
            let (hits, n) = success_fraction(params, x, &inputs, sampling, &mut r)?;
            Ok(hits as f64 / n.max(1) as f64)
        })
        .collect::<Result<_>>()?;
    Ok(Accuracy {
        overall: mean(per_sample.iter().copied()),
        hard_subset: mean(
            samples
                .iter()
                .zip(&per_sample)
                .filter(|(x, _)| x.is_planted_hard)
                .map(|(_, a)| *a),
        ),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PassRates {
    pub pass_at_1: f64,
    pub pass_at_k: f64,
}

/// Pass@1 and pass@k over samples, each rolled out once per listed
/// template. Streams depend only on `(seed, epoch, sample id)`, so two
/// calls that differ only in templates share their random numbers.
pub fn pass_rates(
    params: &PolicyParams,
    items: &[(&Sample, Vec<&Template>)],
    sampling: Sampling,
    seed: u64,
    epoch: usize,
) -> Result<PassRates> {
    let per_sample: Vec<(f64, f64)> = items
        .par_iter()
        .map(|(x, templates)| {
            let inputs: Vec<Vec<f64>> = templates
                .iter()
                .map(|z| env::insert_template(x, z).features)
                .collect();
            let mut r = rng::stream(seed, &[tag::PASS_EVAL, epoch as u64, x.id as u64]);
            let (hits, n) = success_fraction(params, x, &inputs, sampling, &mut r)?;
            Ok((hits as f64 / n.max(1) as f64, f64::from(u8::from(hits > 0))))
        })
        .collect::<Result<_>>()?;
    Ok(PassRates {
        pass_at_1: mean(per_sample.iter().map(|p| p.0)),
        pass_at_k: mean(per_sample.iter().map(|p| p.1)),
    })
}
