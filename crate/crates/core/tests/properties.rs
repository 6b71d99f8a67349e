//! Randomized properties of the group statistics, mining, distillation and
//! checkpoint code.

use proptest::prelude::*;

use p2o::distill::{DistillMode, build_distill_batch};
use p2o::env::{EnvConfig, Environment, Template};
use p2o::grpo::{self, GroupConfig, MiningConfig, RolloutGroup};
use p2o::policy::{self, PolicyParams};
use p2o::rng;

fn params_strategy() -> impl Strategy<Value = PolicyParams> {
    (2usize..6, 1usize..4, 1usize..6).prop_flat_map(|(v, l, d)| {
        (
            proptest::collection::vec(-3.0f64..3.0, v * l * d),
            proptest::collection::vec(-3.0f64..3.0, v * l),
        )
            .prop_map(move |(w, b)| PolicyParams::from_parts(v, l, d, w, b).unwrap())
    })
}

fn group(sample_id: usize, rewards: &[u8]) -> RolloutGroup {
    let r: Vec<f64> = rewards.iter().map(|&x| f64::from(x)).collect();
    let mean = r.iter().sum::<f64>() / r.len() as f64;
    RolloutGroup {
        sample_id,
        trajectories: Vec::new(),
        rewards: rewards.to_vec(),
        mean,
        std: 0.0,
        advantages: grpo::compute_advantages(&r).unwrap(),
        template_ids: vec![None; rewards.len()],
    }
}

proptest! {
    #[test]
    fn advantages_are_standardized(rewards in proptest::collection::vec(0u8..=1, 2..16)) {
        let r: Vec<f64> = rewards.iter().map(|&x| f64::from(x)).collect();
        let a = grpo::compute_advantages(&r).unwrap();
        let n = a.len() as f64;
        let mean = a.iter().sum::<f64>() / n;
        let var = a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        prop_assert!(mean.abs() < 1e-12);
        if r.iter().all(|&x| x == r[0]) {
            prop_assert!(a.iter().all(|&x| x == 0.0));
        } else {
            prop_assert!((var - 1.0).abs() < 1e-12, "variance {var}");
        }
    }

    #[test]
    fn raising_tau_never_shrinks_the_hard_set(
        outcomes in proptest::collection::vec(proptest::collection::vec(0u8..=1, 6), 1..40),
        t1 in 0.0f64..1.0,
        t2 in 0.0f64..1.0,
    ) {
        let groups: Vec<RolloutGroup> = outcomes.iter().enumerate().map(|(i, r)| group(i, r)).collect();
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let small = grpo::mine_hard(&groups, &MiningConfig { tau: lo }, 0);
        let large = grpo::mine_hard(&groups, &MiningConfig { tau: hi }, 0);
        prop_assert!(small.ids().iter().all(|&id| large.contains(id)));
    }

    #[test]
    fn checkpoints_round_trip_bit_exactly(p in params_strategy()) {
        let mut bytes = Vec::new();
        policy::write_binary(&mut bytes, &p).unwrap();
        let back = policy::read_checkpoint(&bytes).unwrap();
        prop_assert!(p.iter().zip(back.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        prop_assert!(p.same_shape(&back));
    }

    #[test]
    fn distill_update_ignores_templates(seed in any::<u64>(), genome in proptest::collection::vec(0usize..32, 4)) {
        let env = Environment::new(EnvConfig { n_easy: 8, n_hard: 8, seed, ..EnvConfig::default() }).unwrap();
        let data = env.training_set();
        let params = PolicyParams::zeros(8, 4, 16);
        let z: Template = env.templates().template(genome).unwrap();
        let x = &data[0];
        let cfg = GroupConfig { temperature: 1.5, ..GroupConfig::default() };
        let assigned = vec![(1, &z); cfg.k];
        let mut r = rng::stream(seed, &[0]);
        let g = grpo::rollout_group(&params, x, Some(&assigned), &cfg, &mut r).unwrap();
        let mut plain = g.clone();
        for t in &mut plain.trajectories {
            t.gen_features = x.features.clone();
        }
        let mut a = params.clone();
        let mut b = params.clone();
        grpo::policy_update(&mut a, &build_distill_batch(&[g], &data, DistillMode::Distill).unwrap(), &cfg, None).unwrap();
        grpo::policy_update(&mut b, &build_distill_batch(&[plain], &data, DistillMode::Distill).unwrap(), &cfg, None).unwrap();
        prop_assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
