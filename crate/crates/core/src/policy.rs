//! Factorized per-position softmax policy.
//!
//! Position `l` draws its token from `softmax(Θ_l·φ + b_l)`, independently of
//! the other positions, so trajectory log-probabilities and their gradients
//! are exact sums over positions.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    vocab_size: usize,
    seq_len: usize,
    feat_dim: usize,
    // weights[(pos * vocab + v) * feat_dim + i]
    weights: Vec<f64>,
    // bias[pos * vocab + v]
    bias: Vec<f64>,
}

/// Gradients share the parameter layout.
pub type Gradient = PolicyParams;

impl PolicyParams {
    pub fn zeros(vocab_size: usize, seq_len: usize, feat_dim: usize) -> Self {
        Self {
            vocab_size,
            seq_len,
            feat_dim,
            weights: vec![0.0; seq_len * vocab_size * feat_dim],
            bias: vec![0.0; seq_len * vocab_size],
        }
    }

    pub fn zeros_like(other: &Self) -> Self {
        Self::zeros(other.vocab_size, other.seq_len, other.feat_dim)
    }

    pub fn from_parts(
        vocab_size: usize,
        seq_len: usize,
        feat_dim: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        if weights.len() != seq_len * vocab_size * feat_dim || bias.len() != seq_len * vocab_size {
            return Err(Error::Contract(format!(
                "parameter buffers do not match shape V={vocab_size} L={seq_len} d={feat_dim}"
            )));
        }
        Ok(Self {
            vocab_size,
            seq_len,
            feat_dim,
            weights,
            bias,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn feat_dim(&self) -> usize {
        self.feat_dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    pub fn weight_row(&self, pos: usize, token: usize) -> &[f64] {
        let start = (pos * self.vocab_size + token) * self.feat_dim;
        &self.weights[start..start + self.feat_dim]
    }

    fn weight_row_mut(&mut self, pos: usize, token: usize) -> &mut [f64] {
        let start = (pos * self.vocab_size + token) * self.feat_dim;
        &mut self.weights[start..start + self.feat_dim]
    }

    /// Every parameter, weights first.
    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.weights.iter().chain(&self.bias)
    }

    pub fn len(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|x| x.is_finite())
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.vocab_size == other.vocab_size
            && self.seq_len == other.seq_len
            && self.feat_dim == other.feat_dim
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Self, scale: f64) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += scale * b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += scale * b;
        }
    }

    /// Raw logits `Θ_l·φ + b_l` at one position.
    pub fn logits(&self, pos: usize, features: &[f64]) -> Vec<f64> {
        (0..self.vocab_size)
            .map(|v| {
                let row = self.weight_row(pos, v);
                row.iter().zip(features).map(|(w, x)| w * x).sum::<f64>()
                    + self.bias[pos * self.vocab_size + v]
            })
            .collect()
    }

    fn check_features(&self, features: &[f64]) -> Result<()> {
        if features.len() != self.feat_dim {
            return Err(Error::Contract(format!(
                "feature length {} != {}",
                features.len(),
                self.feat_dim
            )));
        }
        Ok(())
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.len() != self.seq_len || tokens.iter().any(|&t| t >= self.vocab_size) {
            return Err(Error::Contract(format!(
                "trajectory {tokens:?} does not fit V={} L={}",
                self.vocab_size, self.seq_len
            )));
        }
        Ok(())
    }
}

/// Numerically stable softmax of `logits / temperature`.
pub fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits
        .iter()
        .map(|&z| ((z - max) / temperature).exp())
        .collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn log_softmax_at(logits: &[f64], index: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    logits[index] - lse
}

/// How tokens are drawn.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sampling {
    /// Softmax of logits scaled by `1/T`.
    Temperature(f64),
    /// The `T → 0` limit: argmax per position, ties to the lowest token.
    Greedy,
}

impl Sampling {
    pub fn from_temperature(t: f64) -> Result<Self> {
        if t.is_finite() && t > 0.0 {
            Ok(Sampling::Temperature(t))
        } else {
            Err(Error::Config(format!("temperature must be positive, got {t}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub tokens: Vec<usize>,
    /// Features the trajectory was sampled under (raw or augmented).
    pub gen_features: Vec<f64>,
    /// `log π_θ(y | gen_features)` at sampling time, for importance ratios.
    pub gen_log_prob: f64,
}

pub fn sample_trajectory(
    params: &PolicyParams,
    features: &[f64],
    sampling: Sampling,
    rng: &mut Rng,
) -> Result<Trajectory> {
    params.check_features(features)?;
    let mut tokens = Vec::with_capacity(params.seq_len);
    for pos in 0..params.seq_len {
        let logits = params.logits(pos, features);
        if logits.iter().any(|z| !z.is_finite()) {
            return Err(Error::numerical(
                format!("non-finite logits at position {pos}"),
                None,
            ));
        }
        let token = match sampling {
            Sampling::Greedy => argmax(&logits),
            Sampling::Temperature(t) => {
                if !(t.is_finite() && t > 0.0) {
                    return Err(Error::Config(format!("temperature must be positive, got {t}")));
                }
                let probs = softmax(&logits, t);
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut chosen = probs.len() - 1;
                for (v, p) in probs.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        chosen = v;
                        break;
                    }
                }
                chosen
            }
        };
        tokens.push(token);
    }
    let gen_log_prob = log_prob(params, features, &tokens)?;
    Ok(Trajectory {
        tokens,
        gen_features: features.to_vec(),
        gen_log_prob,
    })
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// `log π_θ(y | φ)`: sum of per-position log-softmax at the chosen tokens.
pub fn log_prob(params: &PolicyParams, features: &[f64], tokens: &[usize]) -> Result<f64> {
    params.check_features(features)?;
    params.check_tokens(tokens)?;
    Ok(tokens
        .iter()
        .enumerate()
        .map(|(pos, &t)| log_softmax_at(&params.logits(pos, features), t))
        .sum())
}

/// Exact `∇_θ log π_θ(y | φ)`: `(onehot(y_l) − p_l) ⊗ φ` for weights and
/// `onehot(y_l) − p_l` for biases.
pub fn grad_log_prob(params: &PolicyParams, features: &[f64], tokens: &[usize]) -> Result<Gradient> {
    let mut grad = PolicyParams::zeros_like(params);
    accumulate_grad_log_prob(params, features, tokens, 1.0, &mut grad)?;
    Ok(grad)
}

/// `grad += scale · ∇_θ log π_θ(y | φ)` without allocating a gradient.
pub fn accumulate_grad_log_prob(
    params: &PolicyParams,
    features: &[f64],
    tokens: &[usize],
    scale: f64,
    grad: &mut Gradient,
) -> Result<()> {
    params.check_features(features)?;
    params.check_tokens(tokens)?;
    let v_count = params.vocab_size;
    for (pos, &token) in tokens.iter().enumerate() {
        let probs = softmax(&params.logits(pos, features), 1.0);
        for (v, p) in probs.iter().enumerate() {
            let coeff = scale * (f64::from(u8::from(v == token)) - p);
            grad.bias[pos * v_count + v] += coeff;
            for (g, x) in grad.weight_row_mut(pos, v).iter_mut().zip(features) {
                *g += coeff * x;
            }
        }
    }
    Ok(())
}

/// `grad += scale · ∇_θ KL(π_θ(·|φ) ‖ π_ref(·|φ))`, summed over positions.
pub fn accumulate_grad_kl(
    params: &PolicyParams,
    reference: &PolicyParams,
    features: &[f64],
    scale: f64,
    grad: &mut Gradient,
) -> Result<()> {
    params.check_features(features)?;
    if !params.same_shape(reference) {
        return Err(Error::Contract("reference policy shape mismatch".into()));
    }
    let v_count = params.vocab_size;
    for pos in 0..params.seq_len {
        let p = softmax(&params.logits(pos, features), 1.0);
        let q = softmax(&reference.logits(pos, features), 1.0);
        let log_ratio: Vec<f64> = p.iter().zip(&q).map(|(a, b)| a.ln() - b.ln()).collect();
        let kl: f64 = p.iter().zip(&log_ratio).map(|(a, r)| a * r).sum();
        for v in 0..v_count {
            let coeff = scale * p[v] * (log_ratio[v] - kl);
            grad.bias[pos * v_count + v] += coeff;
            for (g, x) in grad.weight_row_mut(pos, v).iter_mut().zip(features) {
                *g += coeff * x;
            }
        }
    }
    Ok(())
}

/// `KL(π_θ(·|φ) ‖ π_ref(·|φ))` for the factorized policy.
pub fn kl_divergence(params: &PolicyParams, reference: &PolicyParams, features: &[f64]) -> f64 {
    (0..params.seq_len)
        .map(|pos| {
            let p = softmax(&params.logits(pos, features), 1.0);
            let q = softmax(&reference.logits(pos, features), 1.0);
            p.iter().zip(&q).map(|(a, b)| a * (a.ln() - b.ln())).sum::<f64>()
        })
        .sum()
}

const BINARY_MAGIC: &[u8; 8] = b"P2OPOL01";
const TEXT_MAGIC: &str = "p2o-policy v1";

/// Little-endian binary checkpoint: magic, three u64 dims, weights, biases.
pub fn write_binary<W: Write>(mut w: W, params: &PolicyParams) -> Result<()> {
    w.write_all(BINARY_MAGIC)?;
    for dim in [params.vocab_size, params.seq_len, params.feat_dim] {
        w.write_all(&(dim as u64).to_le_bytes())?;
    }
    for x in params.iter() {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

/// Decimal checkpoint with 17 significant digits per value.
pub fn write_text<W: Write>(mut w: W, params: &PolicyParams) -> Result<()> {
    writeln!(w, "{TEXT_MAGIC}")?;
    writeln!(
        w,
        "vocab_size {} seq_len {} feat_dim {}",
        params.vocab_size, params.seq_len, params.feat_dim
    )?;
    writeln!(w, "weights {}", params.weights.len())?;
    for x in &params.weights {
        writeln!(w, "{x:.16e}")?;
    }
    writeln!(w, "bias {}", params.bias.len())?;
    for x in &params.bias {
        writeln!(w, "{x:.16e}")?;
    }
    Ok(())
}

pub fn save_checkpoint(path: &Path, params: &PolicyParams) -> Result<()> {
    let mut buf = Vec::new();
    write_binary(&mut buf, params)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn save_checkpoint_text(path: &Path, params: &PolicyParams) -> Result<()> {
    let mut buf = Vec::new();
    write_text(&mut buf, params)?;
    std::fs::write(path, buf)?;
    Ok(())
}

/// Loads either checkpoint format, detected from the leading bytes.
pub fn load_checkpoint(path: &Path) -> Result<PolicyParams> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    read_checkpoint(&bytes)
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<PolicyParams> {
    if bytes.starts_with(BINARY_MAGIC) {
        read_binary(&bytes[BINARY_MAGIC.len()..])
    } else if bytes.starts_with(TEXT_MAGIC.as_bytes()) {
        let text = std::str::from_utf8(bytes)
            .map_err(|e| Error::Checkpoint(format!("text checkpoint is not UTF-8: {e}")))?;
        read_text(text)
    } else {
        Err(Error::Checkpoint("unrecognized checkpoint header".into()))
    }
}

fn read_binary(mut rest: &[u8]) -> Result<PolicyParams> {
    let mut take8 = |what: &str| -> Result<[u8; 8]> {
        if rest.len() < 8 {
            return Err(Error::Checkpoint(format!("truncated checkpoint reading {what}")));
        }
        let (head, tail) = rest.split_at(8);
        rest = tail;
        Ok(head.try_into().expect("8 bytes"))
    };
    let v = u64::from_le_bytes(take8("vocab_size")?) as usize;
    let l = u64::from_le_bytes(take8("seq_len")?) as usize;
    let d = u64::from_le_bytes(take8("feat_dim")?) as usize;
    let n_w = l * v * d;
    let n_b = l * v;
    let mut values = Vec::with_capacity(n_w + n_b);
    for _ in 0..n_w + n_b {
        values.push(f64::from_le_bytes(take8("values")?));
    }
    if !rest.is_empty() {
        return Err(Error::Checkpoint("trailing bytes in checkpoint".into()));
    }
    let bias = values.split_off(n_w);
    PolicyParams::from_parts(v, l, d, values, bias)
}

fn read_text(text: &str) -> Result<PolicyParams> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    let mut lines = text.lines();
    lines.next();
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| bad("missing shape header"))?
        .split_whitespace()
        .collect();
    let dim = |key: &str| -> Result<usize> {
        header
            .iter()
            .position(|&t| t == key)
            .and_then(|i| header.get(i + 1))
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad(&format!("missing {key} in header")))
    };
    let (v, l, d) = (dim("vocab_size")?, dim("seq_len")?, dim("feat_dim")?);
    let mut section = |name: &str, expected: usize| -> Result<Vec<f64>> {
        let head = lines.next().ok_or_else(|| bad(&format!("missing {name} section")))?;
        let count: usize = head
            .strip_prefix(name)
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| bad(&format!("malformed {name} section header")))?;
        if count != expected {
            return Err(bad(&format!("{name} count {count} != {expected}")));
        }
        (0..count)
            .map(|_| {
                lines
                    .next()
                    .and_then(|s| s.trim().parse::<f64>().ok())
                    .ok_or_else(|| bad(&format!("malformed value in {name}")))
            })
            .collect()
    };
    let weights = section("weights", l * v * d)?;
    let bias = section("bias", l * v)?;
    PolicyParams::from_parts(v, l, d, weights, bias)
}
