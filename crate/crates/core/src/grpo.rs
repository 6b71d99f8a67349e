//! Group rollouts, group-relative advantages, the policy-gradient step and
//! hard-sample mining.

use serde::{Deserialize, Serialize};

use crate::env::{self, Sample, Template};
use crate::error::{Error, Result};
use crate::policy::{self, PolicyParams, Sampling, Trajectory};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GroupConfig {
    /// Rollouts per sample.
    pub k: usize,
    pub temperature: f64,
    pub lr: f64,
    /// PPO-style clip on the importance ratio; off when absent.
    pub clip_ratio: Option<f64>,
    /// KL penalty toward the reference snapshot.
    pub kl_coeff: f64,
    /// Samples per policy update.
    pub batch_size: usize,
    /// When set, advantages divide by `σ + eps` instead of zeroing `σ = 0` groups.
    pub std_epsilon: Option<f64>,
}

impl Default for GroupConfig {
    fn default() -> Self {
        Self {
            k: 6,
            temperature: 0.6,
            lr: 0.02,
            clip_ratio: None,
            kl_coeff: 0.0,
            batch_size: 16,
            std_epsilon: None,
        }
    }
}

impl GroupConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Config(format!("K must be >= 2, got {}", self.k)));
        }
        Sampling::from_temperature(self.temperature)?;
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if let Some(c) = self.clip_ratio {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::Config(format!("clip_ratio must be positive, got {c}")));
            }
        }
        if !(self.kl_coeff.is_finite() && self.kl_coeff >= 0.0) {
            return Err(Error::Config("kl_coeff must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if let Some(eps) = self.std_epsilon {
            if !(eps.is_finite() && eps > 0.0) {
                return Err(Error::Config("std_epsilon must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MiningConfig {
    /// A sample is hard when its mean group reward is strictly below `tau`.
    pub tau: f64,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self { tau: 0.01 }
    }
}

impl MiningConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau.is_finite() && (0.0..1.0).contains(&self.tau)) {
            return Err(Error::Config(format!("tau must be in [0, 1), got {}", self.tau)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub sample_id: usize,
    pub trajectories: Vec<Trajectory>,
    pub rewards: Vec<u8>,
    pub mean: f64,
    pub std: f64,
    pub advantages: Vec<f64>,
    /// Pool id of the template used by each rollout, `None` for raw input.
    pub template_ids: Vec<Option<usize>>,
}

impl RolloutGroup {
    pub fn is_degenerate(&self) -> bool {
        self.advantages.iter().all(|&a| a == 0.0)
    }
}

/// Hard samples mined at the end of an epoch.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct HardSet {
    pub epoch: usize,
    ids: Vec<usize>,
}

impl HardSet {
    pub fn new(epoch: usize, mut ids: Vec<usize>) -> Self {
        ids.sort_unstable();
        ids.dedup();
        Self { epoch, ids }
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, id: usize) -> bool {
        self.ids.binary_search(&id).is_ok()
    }
}

fn mean_and_population_std(rewards: &[f64]) -> (f64, f64) {
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `A_i = (r_i − μ) / σ` with the population σ; all zeros when `σ = 0`.
pub fn compute_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    compute_advantages_with(rewards, None)
}

/// As [`compute_advantages`], optionally replacing the zero guard with a
/// `σ + eps` denominator.
pub fn compute_advantages_with(rewards: &[f64], std_epsilon: Option<f64>) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::Config(format!(
            "group statistics need K >= 2 rewards, got {}",
            rewards.len()
        )));
    }
    let (mean, std) = mean_and_population_std(rewards);
    Ok(match std_epsilon {
        Some(eps) => rewards.iter().map(|r| (r - mean) / (std + eps)).collect(),
        None if std == 0.0 => vec![0.0; rewards.len()],
        None => rewards.iter().map(|r| (r - mean) / std).collect(),
    })
}

/// Samples `K` rollouts for `x`. Rollout `k` runs under `T(x, z_k)` when
/// templates are assigned and under the raw features otherwise.
pub fn rollout_group(
    params: &PolicyParams,
    x: &Sample,
    assigned: Option<&[(usize, &Template)]>,
    cfg: &GroupConfig,
    rng: &mut Rng,
) -> Result<RolloutGroup> {
    if let Some(t) = assigned {
        if t.len() != cfg.k {
            return Err(Error::Contract(format!(
                "{} templates assigned for K = {}",
                t.len(),
                cfg.k
            )));
        }
    }
    let sampling = Sampling::from_temperature(cfg.temperature)?;
    rollout_group_with(params, x, assigned, cfg, sampling, rng)
}

pub(crate) fn rollout_group_with(
    params: &PolicyParams,
    x: &Sample,
    assigned: Option<&[(usize, &Template)]>,
    cfg: &GroupConfig,
    sampling: Sampling,
    rng: &mut Rng,
) -> Result<RolloutGroup> {
    let mut trajectories = Vec::with_capacity(cfg.k);
    let mut rewards = Vec::with_capacity(cfg.k);
    let mut template_ids = Vec::with_capacity(cfg.k);
    for k in 0..cfg.k {
        let (features, id) = match assigned {
            Some(t) => {
                let (id, z) = t[k];
                (env::insert_template(x, z).features, (!z.is_empty()).then_some(id))
            }
            None => (x.features.clone(), None),
        };
        let y = policy::sample_trajectory(params, &features, sampling, rng)?;
        rewards.push(env::reward(x, &y.tokens, params.vocab_size())?);
        trajectories.push(y);
        template_ids.push(id);
    }
    let as_f64: Vec<f64> = rewards.iter().map(|&r| f64::from(r)).collect();
    let (mean, std) = mean_and_population_std(&as_f64);
    let advantages = compute_advantages_with(&as_f64, cfg.std_epsilon)?;
    Ok(RolloutGroup {
        sample_id: x.id,
        trajectories,
        rewards,
        mean,
        std,
        advantages,
        template_ids,
    })
}

/// Ids of samples whose mean reward is strictly below `tau`, ascending.
pub fn mine_hard(groups: &[RolloutGroup], cfg: &MiningConfig, epoch: usize) -> HardSet {
    HardSet::new(
        epoch,
        groups
            .iter()
            .filter(|g| g.mean < cfg.tau)
            .map(|g| g.sample_id)
            .collect(),
    )
}

/// One entry of an update batch.
pub trait GradientItem {
    fn sample_id(&self) -> usize;
    /// Context the log-probability gradient is taken under.
    fn gradient_features(&self) -> &[f64];
    fn trajectory(&self) -> &Trajectory;
    fn advantage(&self) -> f64;
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateItem {
    pub sample_id: usize,
    pub features: Vec<f64>,
    pub trajectory: Trajectory,
    pub advantage: f64,
}

impl GradientItem for UpdateItem {
    fn sample_id(&self) -> usize {
        self.sample_id
    }
    fn gradient_features(&self) -> &[f64] {
        &self.features
    }
    fn trajectory(&self) -> &Trajectory {
        &self.trajectory
    }
    fn advantage(&self) -> f64 {
        self.advantage
    }
}

/// Importance weight for the clipped surrogate: the ratio itself, or 0
/// where the clipped branch is active (its gradient vanishes).
fn clipped_weight(ratio: f64, advantage: f64, clip: f64) -> f64 {
    let clipped = (advantage > 0.0 && ratio > 1.0 + clip) || (advantage < 0.0 && ratio < 1.0 - clip);
    if clipped { 0.0 } else { ratio }
}

/// Ascent step `θ ← θ + lr · Σ A · ∇ log π_θ(y | gradient context)`, summed
/// in batch order. Items with zero advantage contribute nothing, so a batch
/// of degenerate groups leaves the parameters bit-identical.
pub fn policy_update<I: GradientItem>(
    params: &mut PolicyParams,
    batch: &[I],
    cfg: &GroupConfig,
    reference: Option<&PolicyParams>,
) -> Result<()> {
    let mut grad = PolicyParams::zeros_like(params);
    let mut touched = false;
    for item in batch {
        let features = item.gradient_features();
        let y = item.trajectory();
        let adv = item.advantage();
        if !adv.is_finite() || features.iter().any(|x| !x.is_finite()) {
            return Err(Error::numerical("non-finite update input", Some(item.sample_id())));
        }
        if adv != 0.0 {
            let weight = match cfg.clip_ratio {
                None => adv,
                Some(clip) => {
                    let lp = policy::log_prob(params, features, &y.tokens)?;
                    adv * clipped_weight((lp - y.gen_log_prob).exp(), adv, clip)
                }
            };
            if weight != 0.0 {
                policy::accumulate_grad_log_prob(params, features, &y.tokens, weight, &mut grad)?;
                touched = true;
            }
        }
        if cfg.kl_coeff > 0.0 {
            let reference = reference.ok_or_else(|| {
                Error::Config("kl_coeff > 0 requires a reference snapshot".into())
            })?;
            policy::accumulate_grad_kl(params, reference, features, -cfg.kl_coeff, &mut grad)?;
            touched = true;
        }
        if touched && !grad.is_finite() {
            return Err(Error::numerical("non-finite gradient", Some(item.sample_id())));
        }
    }
    if touched {
        params.add_scaled(&grad, cfg.lr);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{EnvConfig, Environment};
    use crate::rng;

    #[test]
    fn degenerate_group_has_zero_advantages() {
        assert_eq!(compute_advantages(&[0.0; 6]).unwrap(), vec![0.0; 6]);
        assert_eq!(compute_advantages(&[1.0; 6]).unwrap(), vec![0.0; 6]);
        assert!(matches!(compute_advantages(&[1.0]), Err(Error::Config(_))));
    }

    #[test]
    fn single_success_closed_form() {
        let a = compute_advantages(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert!((a[0] - 5f64.sqrt()).abs() < 1e-12);
        for x in &a[1..] {
            assert!((x + 1.0 / 5f64.sqrt()).abs() < 1e-12);
        }
        let half = compute_advantages(&[1.0, 1.0, 1.0, 0.0, 0.0, 0.0]).unwrap();
        for (i, x) in half.iter().enumerate() {
            let want = if i < 3 { 1.0 } else { -1.0 };
            assert!((x - want).abs() < 1e-12);
        }
    }

    #[test]
    fn epsilon_denominator_is_ablatable() {
        let a = compute_advantages_with(&[0.0; 4], Some(1e-6)).unwrap();
        assert_eq!(a, vec![0.0; 4]);
        let b = compute_advantages_with(&[1.0, 0.0], Some(1.0)).unwrap();
        assert!((b[0] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn mining_uses_strict_threshold() {
        let group = |id, mean| RolloutGroup {
            sample_id: id,
            trajectories: vec![],
            rewards: vec![],
            mean,
            std: 0.0,
            advantages: vec![],
            template_ids: vec![],
        };
        let groups = vec![group(3, 0.0), group(1, 1.0 / 6.0), group(0, 0.0), group(2, 0.01)];
        let hard = mine_hard(&groups, &MiningConfig { tau: 0.01 }, 1);
        assert_eq!(hard.ids(), &[0, 3]);
        assert!(mine_hard(&groups, &MiningConfig { tau: 0.0 }, 1).is_empty());
        assert!(MiningConfig { tau: 1.0 }.validate().is_err());
    }

    #[test]
    fn zero_advantage_batch_is_bit_exact_noop() {
        let mut p = PolicyParams::zeros(8, 4, 16);
        p.bias_mut()[3] = -0.0;
        p.weights_mut()[7] = 0.25;
        let before = p.clone();
        let item = UpdateItem {
            sample_id: 0,
            features: vec![1.0; 16],
            trajectory: Trajectory {
                tokens: vec![0, 1, 2, 3],
                gen_features: vec![1.0; 16],
                gen_log_prob: 0.0,
            },
            advantage: 0.0,
        };
        policy_update(&mut p, &[item.clone(), item], &GroupConfig::default(), None).unwrap();
        for (a, b) in p.iter().zip(before.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn unit_advantage_step_equals_gradient() {
        let mut r = rng::stream(9, &[]);
        let mut p = PolicyParams::zeros(4, 3, 5);
        for x in p.weights_mut() {
            *x = rand::Rng::random_range(&mut r, -1.0..1.0);
        }
        let phi = vec![0.3, -0.2, 0.9, 0.1, -1.2];
        let tokens = vec![1, 0, 3];
        let g = policy::grad_log_prob(&p, &phi, &tokens).unwrap();
        let mut expected = p.clone();
        for (e, d) in expected.weights_mut().iter_mut().zip(g.weights()) {
            *e += d;
        }
        for (e, d) in expected.bias_mut().iter_mut().zip(g.bias()) {
            *e += d;
        }
        let cfg = GroupConfig { lr: 1.0, ..GroupConfig::default() };
        let item = UpdateItem {
            sample_id: 0,
            features: phi.clone(),
            trajectory: Trajectory { tokens, gen_features: phi, gen_log_prob: 0.0 },
            advantage: 1.0,
        };
        policy_update(&mut p, &[item], &cfg, None).unwrap();
        assert_eq!(p, expected);
    }

    #[test]
    fn non_finite_advantage_names_sample() {
        let mut p = PolicyParams::zeros(2, 1, 4);
        let item = UpdateItem {
            sample_id: 17,
            features: vec![0.0; 4],
            trajectory: Trajectory { tokens: vec![0], gen_features: vec![0.0; 4], gen_log_prob: 0.0 },
            advantage: f64::NAN,
        };
        match policy_update(&mut p, &[item], &GroupConfig::default(), None) {
            Err(Error::Numerical { sample_id: Some(17), .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn kl_requires_reference() {
        let mut p = PolicyParams::zeros(2, 1, 4);
        let cfg = GroupConfig { kl_coeff: 0.1, ..GroupConfig::default() };
        let item = UpdateItem {
            sample_id: 0,
            features: vec![1.0; 4],
            trajectory: Trajectory { tokens: vec![0], gen_features: vec![1.0; 4], gen_log_prob: 0.0 },
            advantage: 1.0,
        };
        assert!(policy_update(&mut p, std::slice::from_ref(&item), &cfg, None).is_err());
        let reference = p.clone();
        policy_update(&mut p, &[item], &cfg, Some(&reference)).unwrap();
        assert!(p.iter().any(|&x| x != 0.0));
    }

    #[test]
    fn clipping_zeroes_far_off_policy_items() {
        let mut p = PolicyParams::zeros(2, 1, 4);
        let cfg = GroupConfig { clip_ratio: Some(0.2), ..GroupConfig::default() };
        // ratio = exp(log 0.5 - log 0.01) = 50, clipped for a positive advantage
        let item = UpdateItem {
            sample_id: 0,
            features: vec![1.0; 4],
            trajectory: Trajectory {
                tokens: vec![0],
                gen_features: vec![1.0; 4],
                gen_log_prob: 0.01f64.ln(),
            },
            advantage: 1.0,
        };
        policy_update(&mut p, &[item], &cfg, None).unwrap();
        assert!(p.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn rollout_rejects_wrong_template_count() {
        let env = Environment::new(EnvConfig { n_easy: 1, n_hard: 0, ..EnvConfig::default() }).unwrap();
        let x = &env.training_set()[0];
        let eps = env.templates().empty();
        let assigned = vec![(0, &eps); 3];
        let p = PolicyParams::zeros(8, 4, 16);
        let err = rollout_group(&p, x, Some(&assigned), &GroupConfig::default(), &mut rng::stream(0, &[]));
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn empty_templates_match_raw_rollouts() {
        let env = Environment::new(EnvConfig { n_easy: 4, n_hard: 4, n_hard_clusters: 2, ..EnvConfig::default() }).unwrap();
        let mut p = PolicyParams::zeros(8, 4, 16);
        for (i, x) in p.weights_mut().iter_mut().enumerate() {
            *x = ((i % 7) as f64 - 3.0) * 0.1;
        }
        let eps = env.templates().empty();
        let assigned = vec![(0, &eps); 6];
        let cfg = GroupConfig::default();
        for x in env.training_set() {
            let a = rollout_group(&p, &x, None, &cfg, &mut rng::stream(4, &[x.id as u64])).unwrap();
            let b = rollout_group(&p, &x, Some(&assigned), &cfg, &mut rng::stream(4, &[x.id as u64])).unwrap();
            assert_eq!(a, b);
        }
    }
}
