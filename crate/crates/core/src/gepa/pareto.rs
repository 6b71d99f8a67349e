use rand::Rng as _;

use super::ScoredTemplate;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Strict Pareto dominance on binary score vectors: `a` is nowhere worse
/// than `b` and strictly better somewhere.
pub fn dominates(a: &ScoredTemplate, b: &ScoredTemplate) -> Result<bool> {
    if a.dev_scores.len() != b.dev_scores.len() {
        return Err(Error::Contract(format!(
            "score vectors of length {} and {}",
            a.dev_scores.len(),
            b.dev_scores.len()
        )));
    }
    let mut strictly = false;
    for (x, y) in a.dev_scores.iter().zip(&b.dev_scores) {
        if x < y {
            return Ok(false);
        }
        strictly |= x > y;
    }
    Ok(strictly)
}

fn pack(scores: &[u8]) -> Vec<u64> {
    let mut words = vec![0u64; scores.len().div_ceil(64)];
    for (n, &s) in scores.iter().enumerate() {
        if s != 0 {
            words[n / 64] |= 1 << (n % 64);
        }
    }
    words
}

/// Indices of pool members not dominated by any other member, ascending.
pub fn nondominated(pool: &[ScoredTemplate]) -> Result<Vec<usize>> {
    let Some(first) = pool.first() else {
        return Ok(Vec::new());
    };
    let n = first.dev_scores.len();
    if pool.iter().any(|t| t.dev_scores.len() != n) {
        return Err(Error::Contract("pool has score vectors of unequal length".into()));
    }
    let packed: Vec<Vec<u64>> = pool.iter().map(|t| pack(&t.dev_scores)).collect();
    // a dominates b iff b ⊆ a as bitsets and a ≠ b
    let covers = |a: &[u64], b: &[u64]| a.iter().zip(b).all(|(x, y)| y & !x == 0);
    Ok((0..pool.len())
        .filter(|&i| {
            !packed
                .iter()
                .enumerate()
                .any(|(j, other)| j != i && other != &packed[i] && covers(other, &packed[i]))
        })
        .collect())
}

/// Nondominated pool indices, thinned to at most `width` by sampling
/// without replacement in proportion to mean dev score. Members with zero
/// weight are drawn uniformly once the positive-weight ones are exhausted.
/// The result is in ascending pool order.
pub fn select_pareto_front(
    pool: &[ScoredTemplate],
    width: usize,
    rng: &mut Rng,
) -> Result<Vec<usize>> {
    if pool.is_empty() {
        return Err(Error::Contract("cannot select a front from an empty pool".into()));
    }
    let mut front = nondominated(pool)?;
    if front.len() <= width {
        return Ok(front);
    }
    let mut chosen = Vec::with_capacity(width);
    while chosen.len() < width {
        let total: f64 = front.iter().map(|&i| pool[i].mean_score).sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = front.len() - 1;
            for (slot, &i) in front.iter().enumerate() {
                let w = pool[i].mean_score;
                if w > 0.0 && u < w {
                    pick = slot;
                    break;
                }
                u -= w;
            }
            // guard against rounding landing on a zero-weight tail
            if pool[front[pick]].mean_score <= 0.0 {
                pick = front
                    .iter()
                    .rposition(|&i| pool[i].mean_score > 0.0)
                    .expect("positive total");
            }
            pick
        } else {
            rng.random_range(0..front.len())
        };
        chosen.push(front.remove(pick));
    }
    chosen.sort_unstable();
    Ok(chosen)
}
