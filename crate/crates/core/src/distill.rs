//! Re-contexting of rollouts for the policy update.
//!
//! Rollouts may be generated under augmented inputs `T(x, z)`. In distill
//! mode the log-probability gradient is taken under the sample's original
//! features, so the update teaches `π(y | x)` rather than `π(y | T(x, z))`.
//! Dependency mode keeps the generation context and exists as an ablation.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::env::Sample;
use crate::error::{Error, Result};
use crate::grpo::{GradientItem, RolloutGroup};
use crate::policy::Trajectory;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillMode {
    Distill,
    Dependency,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillBatchItem {
    pub sample_id: usize,
    pub gradient_features: Vec<f64>,
    pub trajectory: Trajectory,
    pub advantage: f64,
    pub used_template_id: Option<usize>,
}

impl GradientItem for DistillBatchItem {
    fn sample_id(&self) -> usize {
        self.sample_id
    }
    fn gradient_features(&self) -> &[f64] {
        &self.gradient_features
    }
    fn trajectory(&self) -> &Trajectory {
        &self.trajectory
    }
    fn advantage(&self) -> f64 {
        self.advantage
    }
}

/// Flattens groups into update items, group order then rollout order.
/// Advantages are taken as computed within each group.
pub fn build_distill_batch(
    groups: &[RolloutGroup],
    dataset: &[Sample],
    mode: DistillMode,
) -> Result<Vec<DistillBatchItem>> {
    let by_id: HashMap<usize, &Sample> = dataset.iter().map(|s| (s.id, s)).collect();
    let mut items = Vec::with_capacity(groups.iter().map(|g| g.trajectories.len()).sum());
    for group in groups {
        let sample = by_id
            .get(&group.sample_id)
            .ok_or_else(|| Error::Data(format!("unknown sample id {}", group.sample_id)))?;
        for (k, y) in group.trajectories.iter().enumerate() {
            let gradient_features = match mode {
                DistillMode::Distill => sample.features.clone(),
                DistillMode::Dependency => y.gen_features.clone(),
            };
            items.push(DistillBatchItem {
                sample_id: group.sample_id,
                gradient_features,
                trajectory: y.clone(),
                advantage: group.advantages[k],
                used_template_id: group.template_ids.get(k).copied().flatten(),
            });
        }
    }
    Ok(items)
}
