//! Brute-force references for tests.
//!
//! Nothing here calls into the code paths it audits: softmax, log-probs,
//! dominance and cover selection are re-derived from scratch, and the
//! ledger is replayed from its serialized JSON form.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::policy::PolicyParams;

/// Size guards; oracles refuse larger inputs rather than degrade.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EnumerationLimit {
    pub max_trajectories: usize,
    pub max_pool: usize,
}

impl Default for EnumerationLimit {
    fn default() -> Self {
        Self {
            max_trajectories: 4096,
            max_pool: 64,
        }
    }
}

/// Exhaustive O(M²·N) nondominated filter over a binary score matrix.
pub fn pareto_front_bruteforce(scores: &[Vec<u8>], limit: EnumerationLimit) -> Result<BTreeSet<usize>> {
    if scores.len() > limit.max_pool {
        return Err(Error::OracleLimit(format!(
            "pool of {} exceeds {}",
            scores.len(),
            limit.max_pool
        )));
    }
    let mut front = BTreeSet::new();
    for i in 0..scores.len() {
        let mut dominated = false;
        for j in 0..scores.len() {
            if i == j {
                continue;
            }
            let mut geq_everywhere = true;
            let mut greater_somewhere = false;
            for (a, b) in scores[j].iter().zip(&scores[i]) {
                if a < b {
                    geq_everywhere = false;
                }
                if a > b {
                    greater_somewhere = true;
                }
            }
            if geq_everywhere && greater_somewhere {
                dominated = true;
                break;
            }
        }
        if !dominated {
            front.insert(i);
        }
    }
    Ok(front)
}

/// Reference greedy cover: returns picks in order. Ties go to the lowest index.
pub fn greedy_cover_replay(sets: &[BTreeSet<usize>]) -> Vec<usize> {
    let mut covered = BTreeSet::new();
    let mut picks = Vec::new();
    loop {
        let mut best_gain = 0;
        let mut best = None;
        for (i, s) in sets.iter().enumerate() {
            if picks.contains(&i) {
                continue;
            }
            let gain = s.difference(&covered).count();
            if gain > best_gain {
                best_gain = gain;
                best = Some(i);
            }
        }
        match best {
            Some(i) => {
                covered.extend(sets[i].iter().copied());
                picks.push(i);
            }
            None => return picks,
        }
    }
}

/// Checks a sequence of cover picks: each pick has maximal marginal gain
/// among the unpicked sets, and the final cover is the union of all sets.
pub fn audit_cover(sets: &[BTreeSet<usize>], picks: &[usize]) -> Result<()> {
    let mut covered: BTreeSet<usize> = BTreeSet::new();
    for (step, &p) in picks.iter().enumerate() {
        let gain = |i: usize| sets[i].difference(&covered).count();
        let best = (0..sets.len())
            .filter(|i| !picks[..step].contains(i))
            .map(gain)
            .max()
            .unwrap_or(0);
        if gain(p) != best || best == 0 {
            return Err(Error::Audit(format!(
                "step {step} picked {p} with gain {} but best is {best}",
                gain(p)
            )));
        }
        covered.extend(sets[p].iter().copied());
    }
    let union: BTreeSet<usize> = sets.iter().flatten().copied().collect();
    if covered != union {
        return Err(Error::Audit("cover stops before covering the union".into()));
    }
    Ok(())
}

fn position_probs(params: &PolicyParams, features: &[f64], pos: usize) -> Vec<f64> {
    let v_count = params.vocab_size();
    let mut logits = vec![0.0; v_count];
    for (v, logit) in logits.iter_mut().enumerate() {
        let mut acc = params.bias()[pos * v_count + v];
        for (i, x) in features.iter().enumerate() {
            acc += params.weight_row(pos, v)[i] * x;
        }
        *logit = acc;
    }
    let top = logits.iter().cloned().fold(f64::MIN, f64::max);
    let z: f64 = logits.iter().map(|l| (l - top).exp()).sum();
    logits.iter().map(|l| (l - top).exp() / z).collect()
}

fn oracle_log_prob(params: &PolicyParams, features: &[f64], tokens: &[usize]) -> f64 {
    let mut total = 0.0;
    for (pos, &t) in tokens.iter().enumerate() {
        total += position_probs(params, features, pos)[t].ln();
    }
    total
}

/// Exact probability of every trajectory, in lexicographic token order.
pub fn enumerate_policy(
    params: &PolicyParams,
    features: &[f64],
    limit: EnumerationLimit,
) -> Result<Vec<(Vec<usize>, f64)>> {
    let v = params.vocab_size();
    let l = params.seq_len();
    let count = (v as f64).powi(l as i32);
    if count > limit.max_trajectories as f64 {
        return Err(Error::OracleLimit(format!(
            "{count} trajectories exceed {}",
            limit.max_trajectories
        )));
    }
    let per_pos: Vec<Vec<f64>> = (0..l).map(|pos| position_probs(params, features, pos)).collect();
    let mut out = Vec::with_capacity(count as usize);
    for code in 0..count as usize {
        let mut rest = code;
        let mut tokens = vec![0; l];
        for pos in (0..l).rev() {
            tokens[pos] = rest % v;
            rest /= v;
        }
        let p = tokens.iter().enumerate().map(|(pos, &t)| per_pos[pos][t]).product();
        out.push((tokens, p));
    }
    Ok(out)
}

/// Central finite differences of `log π(y | φ)` in every parameter.
pub fn finite_diff_grad(params: &PolicyParams, features: &[f64], tokens: &[usize], h: f64) -> Result<PolicyParams> {
    if h.is_nan() || h <= 0.0 {
        return Err(Error::Contract(format!("step must be positive, got {h}")));
    }
    let mut grad = PolicyParams::zeros_like(params);
    let mut probe = params.clone();
    for i in 0..params.weights().len() {
        let orig = probe.weights()[i];
        probe.weights_mut()[i] = orig + h;
        let up = oracle_log_prob(&probe, features, tokens);
        probe.weights_mut()[i] = orig - h;
        let down = oracle_log_prob(&probe, features, tokens);
        probe.weights_mut()[i] = orig;
        grad.weights_mut()[i] = (up - down) / (2.0 * h);
    }
    for i in 0..params.bias().len() {
        let orig = probe.bias()[i];
        probe.bias_mut()[i] = orig + h;
        let up = oracle_log_prob(&probe, features, tokens);
        probe.bias_mut()[i] = orig - h;
        let down = oracle_log_prob(&probe, features, tokens);
        probe.bias_mut()[i] = orig;
        grad.bias_mut()[i] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}

/// Closed-form group advantages for `m` successes out of `k` binary rewards:
/// `(√((k−m)/m), −√(m/(k−m)))`.
pub fn binary_advantages(k: usize, m: usize) -> Option<(f64, f64)> {
    if m == 0 || m >= k {
        return None;
    }
    let (k, m) = (k as f64, m as f64);
    Some((((k - m) / m).sqrt(), -(m / (k - m)).sqrt()))
}

/// Recomputes the charged units of a serialized prompt-search ledger.
///
/// Each line is one JSON event with at least `event`, `cost` and `samples`.
/// Evaluations of parents, children and accepted children charge their
/// sample count; everything else charges nothing. The recorded `cost`
/// must agree, child evaluations must follow a parent evaluation, and dev
/// evaluations must follow a child evaluation.
pub fn ledger_replay<S: AsRef<str>>(lines: &[S]) -> Result<u64> {
    let mut total = 0u64;
    let mut previous: Option<String> = None;
    for (i, line) in lines.iter().enumerate() {
        let line = line.as_ref();
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(line)
            .map_err(|e| Error::Audit(format!("line {}: {e}", i + 1)))?;
        let field = |k: &str| {
            value
                .get(k)
                .ok_or_else(|| Error::Audit(format!("line {}: missing {k}", i + 1)))
        };
        let kind = field("event")?
            .as_str()
            .ok_or_else(|| Error::Audit(format!("line {}: event is not a string", i + 1)))?
            .to_string();
        let samples = field("samples")?
            .as_u64()
            .ok_or_else(|| Error::Audit(format!("line {}: bad samples", i + 1)))?;
        let cost = field("cost")?
            .as_u64()
            .ok_or_else(|| Error::Audit(format!("line {}: bad cost", i + 1)))?;
        let expected = match kind.as_str() {
            "parent_eval" => samples,
            "child_eval" => {
                if previous.as_deref() != Some("parent_eval") {
                    return Err(Error::Audit(format!("line {}: child eval without parent eval", i + 1)));
                }
                samples
            }
            "dev_eval" => {
                if previous.as_deref() != Some("child_eval") {
                    return Err(Error::Audit(format!("line {}: dev eval without child eval", i + 1)));
                }
                samples
            }
            "init_dev_eval" | "reflection_failed" | "rejected" => 0,
            other => return Err(Error::Audit(format!("line {}: unknown event {other}", i + 1))),
        };
        if cost != expected {
            return Err(Error::Audit(format!(
                "line {}: recorded cost {cost} but {kind} of {samples} samples charges {expected}",
                i + 1
            )));
        }
        total += expected;
        previous = Some(kind);
    }
    Ok(total)
}
