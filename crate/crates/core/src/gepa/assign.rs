use std::collections::BTreeMap;

use rand::Rng as _;

use super::ScoredTemplate;
use crate::error::{Error, Result};
use crate::grpo::HardSet;
use crate::rng::Rng;

/// One pick of the greedy cover and the number of dev samples it added.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CoverStep {
    pub template_id: usize,
    pub gain: usize,
}

/// Greedy set cover over dev coverage sets: repeatedly take the template
/// covering the most not-yet-covered dev samples (lowest index on ties)
/// until no template adds anything.
pub fn greedy_cover(pool: &[ScoredTemplate]) -> Vec<CoverStep> {
    let n = pool.first().map_or(0, |t| t.dev_scores.len());
    let mut covered = vec![false; n];
    let mut taken = vec![false; pool.len()];
    let mut steps = Vec::new();
    loop {
        let mut best: Option<CoverStep> = None;
        for (id, t) in pool.iter().enumerate() {
            if taken[id] {
                continue;
            }
            let gain = t.coverage().filter(|&j| !covered[j]).count();
            if best.is_none_or(|b| gain > b.gain) {
                best = Some(CoverStep { template_id: id, gain });
            }
        }
        match best {
            Some(step) if step.gain > 0 => {
                taken[step.template_id] = true;
                for j in pool[step.template_id].coverage() {
                    covered[j] = true;
                }
                steps.push(step);
            }
            _ => break,
        }
    }
    steps
}

/// Per-sample template assignments for the next epoch.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AssignmentMap {
    /// Hard sample id → `K` pool ids.
    pub per_sample: BTreeMap<usize, Vec<usize>>,
    /// Greedy cover picks, in order.
    pub cover: Vec<CoverStep>,
    /// Templates the assignments may reference: the cover, or ε alone when
    /// nothing covers any dev sample.
    pub retained: BTreeMap<usize, ScoredTemplate>,
}

impl AssignmentMap {
    pub fn covered_ids(&self) -> Vec<usize> {
        self.cover.iter().map(|s| s.template_id).collect()
    }

    pub fn templates_for(&self, sample_id: usize) -> Option<&[usize]> {
        self.per_sample.get(&sample_id).map(Vec::as_slice)
    }

    pub fn is_empty(&self) -> bool {
        self.per_sample.is_empty()
    }
}

fn weighted_pick(candidates: &[usize], pool: &[ScoredTemplate], rng: &mut Rng) -> usize {
    let total: f64 = candidates.iter().map(|&i| pool[i].mean_score).sum();
    if total <= 0.0 {
        return candidates[rng.random_range(0..candidates.len())];
    }
    let mut u = rng.random::<f64>() * total;
    for &i in candidates {
        let w = pool[i].mean_score;
        if w > 0.0 && u < w {
            return i;
        }
        u -= w;
    }
    *candidates
        .iter()
        .rev()
        .find(|&&i| pool[i].mean_score > 0.0)
        .expect("positive total")
}

/// Greedy cover, then `K` weighted draws (with replacement) per hard sample.
///
/// `dev_ids[n]` is the sample id behind dev score index `n`. A covered dev
/// sample draws only from the covering templates that solve it; every other
/// hard sample draws from the whole cover. Pool index 0 must be ε, which is
/// assigned `K` times when the cover is empty.
pub fn greedy_prompt_assignment(
    pool: &[ScoredTemplate],
    hard: &HardSet,
    dev_ids: &[usize],
    k: usize,
    rng: &mut Rng,
) -> Result<AssignmentMap> {
    if pool.is_empty() {
        return Err(Error::Contract("assignment needs a non-empty pool".into()));
    }
    if pool.iter().any(|t| t.dev_scores.len() != dev_ids.len()) {
        return Err(Error::Contract("score vectors do not match the dev split".into()));
    }
    let cover = greedy_cover(pool);
    let covered: Vec<usize> = cover.iter().map(|s| s.template_id).collect();

    let mut per_sample = BTreeMap::new();
    if covered.is_empty() {
        for &id in hard.ids() {
            per_sample.insert(id, vec![0; k]);
        }
        return Ok(AssignmentMap {
            per_sample,
            cover,
            retained: BTreeMap::from([(0, pool[0].clone())]),
        });
    }

    let dev_index: BTreeMap<usize, usize> =
        dev_ids.iter().enumerate().map(|(n, &id)| (id, n)).collect();
    for &id in hard.ids() {
        let solvers: Vec<usize> = dev_index
            .get(&id)
            .map(|&n| {
                covered
                    .iter()
                    .copied()
                    .filter(|&t| pool[t].dev_scores[n] == 1)
                    .collect()
            })
            .unwrap_or_default();
        let candidates = if solvers.is_empty() { &covered } else { &solvers };
        let draws = (0..k).map(|_| weighted_pick(candidates, pool, rng)).collect();
        per_sample.insert(id, draws);
    }
    let retained = covered.iter().map(|&t| (t, pool[t].clone())).collect();
    Ok(AssignmentMap {
        per_sample,
        cover,
        retained,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::Template;
    use crate::rng;

    fn scored(scores: &[u8]) -> ScoredTemplate {
        ScoredTemplate::new(Template::empty(4), scores.to_vec())
    }

    // dev samples a, b, c have ids 10, 11, 12; pool[0] stands in for ε
    fn worked_pool() -> Vec<ScoredTemplate> {
        vec![
            scored(&[0, 0, 0]),
            scored(&[1, 1, 0]),
            scored(&[0, 1, 1]),
            scored(&[0, 0, 1]),
        ]
    }

    #[test]
    fn worked_example_cover() {
        let steps = greedy_cover(&worked_pool());
        assert_eq!(
            steps,
            vec![
                CoverStep { template_id: 1, gain: 2 },
                CoverStep { template_id: 2, gain: 1 }
            ]
        );
    }

    #[test]
    fn singleton_solver_gets_every_slot() {
        let hard = HardSet::new(0, vec![10, 11, 12, 20]);
        let map = greedy_prompt_assignment(&worked_pool(), &hard, &[10, 11, 12], 6, &mut rng::stream(0, &[])).unwrap();
        assert_eq!(map.templates_for(10).unwrap(), &[1; 6]);
        assert_eq!(map.per_sample.len(), 4);
        for ids in map.per_sample.values() {
            assert_eq!(ids.len(), 6);
            assert!(ids.iter().all(|t| map.retained.contains_key(t)));
        }
        assert!(!map.retained.contains_key(&3));
    }

    #[test]
    fn empty_cover_falls_back_to_epsilon() {
        let pool = vec![scored(&[0, 0]), scored(&[0, 0])];
        let hard = HardSet::new(0, vec![1, 2, 3]);
        let map = greedy_prompt_assignment(&pool, &hard, &[1, 2], 4, &mut rng::stream(0, &[])).unwrap();
        assert!(map.cover.is_empty());
        for ids in map.per_sample.values() {
            assert_eq!(ids, &vec![0; 4]);
        }
        assert_eq!(map.retained.keys().copied().collect::<Vec<_>>(), vec![0]);
    }

    #[test]
    fn mismatched_dev_split_rejected() {
        let hard = HardSet::new(0, vec![1]);
        assert!(greedy_prompt_assignment(&worked_pool(), &hard, &[1, 2], 2, &mut rng::stream(0, &[])).is_err());
        assert!(greedy_prompt_assignment(&[], &hard, &[], 2, &mut rng::stream(0, &[])).is_err());
    }
}
