//! Synthetic verifiable tasks.
//!
//! A sample carries an observable feature vector and a hidden target
//! sequence of `seq_len` tokens over `vocab_size` symbols. The reward is 1
//! only for an exact match. Two populations are generated:
//!
//! * easy samples, `φ = M·enc(t) + noise`, which a linear softmax policy can
//!   decode once it has learned `M`;
//! * planted hard samples, `φ = M'·enc(t) + o_c`, where `M'` is a perturbed
//!   copy of `M` and `o_c` is a large offset shared by every sample of
//!   cluster `c`. Offsets of different clusters share a common direction
//!   to a degree set by `cluster_spread`. A policy fitted on easy samples is pushed to the same
//!   wrong answer for the whole cluster; a template whose embedding cancels
//!   the offset recovers the latent decoding.
//!
//! Templates act additively: `T(x, z) = φ + embed(z)`, where `embed` sums a
//! seeded per-(position, symbol) vector table over the genome.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng as _;
use rand::seq::SliceRandom;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng, tag};

/// Relative noise magnitude on easy features (fraction of the signal norm).
pub const EASY_NOISE_FRACTION: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub feat_dim: usize,
    pub n_easy: usize,
    pub n_hard: usize,
    pub n_hard_clusters: usize,
    pub seed: u64,
    /// Genome length `m` of non-empty templates.
    pub template_len: usize,
    /// Genome alphabet size `G`.
    pub template_alphabet: usize,
    /// Norm of each per-position signal vector.
    pub signal_scale: f64,
    /// Norm of each hard-cluster offset, in units of `signal_scale`.
    pub hard_offset_scale: f64,
    /// 0 gives every cluster the same offset direction, 1 independent ones.
    pub cluster_spread: f64,
    /// Per-column perturbation of the hard map, in units of `signal_scale`.
    pub hard_map_shift: f64,
    /// Expected norm of one template table vector, in units of `signal_scale`.
    pub template_scale: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            vocab_size: 8,
            seq_len: 4,
            feat_dim: 16,
            n_easy: 192,
            n_hard: 64,
            n_hard_clusters: 4,
            seed: 0,
            template_len: 4,
            template_alphabet: 32,
            signal_scale: 1.0,
            hard_offset_scale: 3.0,
            cluster_spread: 0.2,
            hard_map_shift: 0.25,
            template_scale: 0.75,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.vocab_size < 2 {
            return fail(format!("vocab_size must be >= 2, got {}", self.vocab_size));
        }
        if self.seq_len < 1 {
            return fail("seq_len must be >= 1".into());
        }
        if self.feat_dim < 4 {
            return fail(format!("feat_dim must be >= 4, got {}", self.feat_dim));
        }
        if self.n_hard > 0 && (self.n_hard_clusters == 0 || self.n_hard_clusters > self.n_hard) {
            return fail(format!(
                "n_hard_clusters must be in 1..={} when n_hard > 0, got {}",
                self.n_hard, self.n_hard_clusters
            ));
        }
        if self.template_len == 0 || self.template_alphabet < 2 {
            return fail("template_len must be >= 1 and template_alphabet >= 2".into());
        }
        for (name, v) in [
            ("signal_scale", self.signal_scale),
            ("hard_offset_scale", self.hard_offset_scale),
            ("hard_map_shift", self.hard_map_shift),
            ("template_scale", self.template_scale),
        ] {
            if !v.is_finite() || v < 0.0 {
                return fail(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.cluster_spread) {
            return fail(format!("cluster_spread must be in [0, 1], got {}", self.cluster_spread));
        }
        if self.signal_scale == 0.0 {
            return fail("signal_scale must be positive".into());
        }
        Ok(())
    }

    /// `V_a^L`, the number of distinct trajectories.
    pub fn trajectory_count(&self) -> f64 {
        (self.vocab_size as f64).powi(self.seq_len as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: usize,
    pub features: Vec<f64>,
    pub target: Vec<usize>,
    /// Diagnostic only. Training code never reads it.
    pub is_planted_hard: bool,
}

/// A discrete latent template. `genome == None` is the empty template ε.
#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    genome: Option<Vec<usize>>,
    embedding: Vec<f64>,
}

impl Template {
    pub fn empty(feat_dim: usize) -> Self {
        Self {
            genome: None,
            embedding: vec![0.0; feat_dim],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.genome.is_none()
    }

    pub fn genome(&self) -> Option<&[usize]> {
        self.genome.as_deref()
    }

    pub fn embedding(&self) -> &[f64] {
        &self.embedding
    }
}

/// Seeded per-(position, symbol) vector table defining template embeddings.
#[derive(Debug, Clone)]
pub struct TemplateSpace {
    len: usize,
    alphabet: usize,
    dim: usize,
    // table[pos * alphabet + symbol] is a `dim`-vector
    table: Vec<Vec<f64>>,
}

impl TemplateSpace {
    pub fn new(cfg: &EnvConfig) -> Self {
        let mut rng = rng::stream(cfg.seed, &[tag::TEMPLATE_TABLE]);
        let sd = cfg.template_scale * cfg.signal_scale / (cfg.feat_dim as f64).sqrt();
        let table = (0..cfg.template_len * cfg.template_alphabet)
            .map(|_| gaussian_vec(&mut rng, cfg.feat_dim, sd))
            .collect();
        Self {
            len: cfg.template_len,
            alphabet: cfg.template_alphabet,
            dim: cfg.feat_dim,
            table,
        }
    }

    pub fn genome_len(&self) -> usize {
        self.len
    }

    pub fn alphabet(&self) -> usize {
        self.alphabet
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn empty(&self) -> Template {
        Template::empty(self.dim)
    }

    /// Table vector contributed by `symbol` at `pos`.
    pub fn vector(&self, pos: usize, symbol: usize) -> &[f64] {
        &self.table[pos * self.alphabet + symbol]
    }

    pub fn template(&self, genome: Vec<usize>) -> Result<Template> {
        if genome.len() != self.len {
            return Err(Error::Contract(format!(
                "genome length {} != {}",
                genome.len(),
                self.len
            )));
        }
        if let Some(&bad) = genome.iter().find(|&&g| g >= self.alphabet) {
            return Err(Error::Contract(format!(
                "genome symbol {bad} outside alphabet of size {}",
                self.alphabet
            )));
        }
        let mut embedding = vec![0.0; self.dim];
        for (pos, &g) in genome.iter().enumerate() {
            for (e, v) in embedding.iter_mut().zip(self.vector(pos, g)) {
                *e += v;
            }
        }
        Ok(Template {
            genome: Some(genome),
            embedding,
        })
    }

    /// Rebuilds a template from an optional genome (`None` is ε).
    pub fn from_genome(&self, genome: Option<Vec<usize>>) -> Result<Template> {
        match genome {
            None => Ok(self.empty()),
            Some(g) => self.template(g),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedInput {
    pub base_sample_id: usize,
    pub features: Vec<f64>,
}

/// `T(x, z)`: adds the template embedding to the sample features.
pub fn insert_template(x: &Sample, z: &Template) -> AugmentedInput {
    let features = if z.is_empty() {
        x.features.clone()
    } else {
        x.features
            .iter()
            .zip(&z.embedding)
            .map(|(a, b)| a + b)
            .collect()
    };
    AugmentedInput {
        base_sample_id: x.id,
        features,
    }
}

/// Strict binary reward: 1 iff `tokens` reproduces the target exactly.
pub fn reward(x: &Sample, tokens: &[usize], vocab_size: usize) -> Result<u8> {
    if tokens.len() != x.target.len() {
        return Err(Error::Contract(format!(
            "trajectory length {} != target length {}",
            tokens.len(),
            x.target.len()
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab_size) {
        return Err(Error::Contract(format!(
            "token {bad} outside vocabulary of size {vocab_size}"
        )));
    }
    Ok(u8::from(tokens == x.target.as_slice()))
}

/// The seeded maps behind one environment plus its template space.
#[derive(Debug, Clone)]
pub struct Environment {
    cfg: EnvConfig,
    // column (pos * vocab + symbol) of M, a feat_dim vector
    easy_map: Vec<Vec<f64>>,
    hard_map: Vec<Vec<f64>>,
    offsets: Vec<Vec<f64>>,
    templates: TemplateSpace,
}

impl Environment {
    pub fn new(cfg: EnvConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.feat_dim;
        let (v, l) = (cfg.vocab_size, cfg.seq_len);
        let s = cfg.signal_scale;
        let mut rng = rng::stream(cfg.seed, &[tag::ENV_MAPS]);

        let rotation = random_orthogonal(&mut rng, d);
        let block = (d / l).max(1);
        let mut easy_map: Vec<Vec<f64>> = Vec::with_capacity(l * v);
        for pos in 0..l {
            for sym in 0..v {
                let local = symbol_direction(&mut rng, block, sym);
                let mut raw = vec![0.0; d];
                let start = (pos * block) % d;
                for (i, x) in local.iter().enumerate() {
                    raw[(start + i) % d] += x;
                }
                easy_map.push(mat_vec(&rotation, &raw).into_iter().map(|x| s * x).collect());
            }
        }

        let hard_map = easy_map
            .iter()
            .map(|col| {
                let dir = unit_vec(&mut rng, d);
                col.iter()
                    .zip(dir)
                    .map(|(c, u)| c + cfg.hard_map_shift * s * u)
                    .collect()
            })
            .collect();

        let common = unit_vec(&mut rng, d);
        let offsets = (0..cfg.n_hard_clusters)
            .map(|_| {
                let own = unit_vec(&mut rng, d);
                let mixed: Vec<f64> = common
                    .iter()
                    .zip(&own)
                    .map(|(a, b)| (1.0 - cfg.cluster_spread) * a + cfg.cluster_spread * b)
                    .collect();
                let n = norm(&mixed).max(f64::MIN_POSITIVE);
                mixed
                    .into_iter()
                    .map(|u| cfg.hard_offset_scale * s * u / n)
                    .collect()
            })
            .collect();

        let templates = TemplateSpace::new(&cfg);
        Ok(Self {
            cfg,
            easy_map,
            hard_map,
            offsets,
            templates,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn templates(&self) -> &TemplateSpace {
        &self.templates
    }

    pub fn cluster_offset(&self, cluster: usize) -> &[f64] {
        &self.offsets[cluster]
    }

    /// `M·enc(t)` (easy) or `M'·enc(t)` (hard), without offset or noise.
    pub fn encode(&self, target: &[usize], hard: bool) -> Vec<f64> {
        let map = if hard { &self.hard_map } else { &self.easy_map };
        let mut phi = vec![0.0; self.cfg.feat_dim];
        for (pos, &sym) in target.iter().enumerate() {
            for (p, c) in phi.iter_mut().zip(&map[pos * self.cfg.vocab_size + sym]) {
                *p += c;
            }
        }
        phi
    }

    /// Generates `n_easy + n_hard` samples from the stream `(seed, stream_tag)`.
    /// Sample ids are `0..n` and kinds are interleaved by a seeded shuffle.
    pub fn generate(&self, stream_tag: u64, n_easy: usize, n_hard: usize) -> Vec<Sample> {
        let mut rng = rng::stream(self.cfg.seed, &[stream_tag]);
        // Some(cluster) for hard, None for easy
        let mut kinds: Vec<Option<usize>> = (0..n_easy)
            .map(|_| None)
            .chain((0..n_hard).map(|j| Some(j % self.cfg.n_hard_clusters.max(1))))
            .collect();
        kinds.shuffle(&mut rng);

        kinds
            .into_iter()
            .enumerate()
            .map(|(id, kind)| {
                let target: Vec<usize> = (0..self.cfg.seq_len)
                    .map(|_| rng.random_range(0..self.cfg.vocab_size))
                    .collect();
                let features = match kind {
                    None => {
                        let mut phi = self.encode(&target, false);
                        let sd = EASY_NOISE_FRACTION * norm(&phi)
                            / (self.cfg.feat_dim as f64).sqrt();
                        for p in phi.iter_mut() {
                            *p += sd * rng.sample::<f64, _>(StandardNormal);
                        }
                        phi
                    }
                    Some(c) => {
                        let mut phi = self.encode(&target, true);
                        for (p, o) in phi.iter_mut().zip(&self.offsets[c]) {
                            *p += o;
                        }
                        phi
                    }
                };
                Sample {
                    id,
                    features,
                    target,
                    is_planted_hard: kind.is_some(),
                }
            })
            .collect()
    }

    pub fn training_set(&self) -> Vec<Sample> {
        self.generate(tag::ENV_TRAIN, self.cfg.n_easy, self.cfg.n_hard)
    }

    /// Held-out split with the same composition, from a disjoint stream.
    pub fn heldout_set(&self) -> Vec<Sample> {
        self.generate(tag::ENV_HELDOUT, self.cfg.n_easy, self.cfg.n_hard)
    }

    /// Easy-only corpus used to warm-start the policy.
    pub fn pretrain_corpus(&self, n: usize) -> Vec<Sample> {
        self.generate(tag::ENV_PRETRAIN, n, 0)
    }
}

/// Builds the training dataset for `cfg`.
pub fn make_dataset(cfg: &EnvConfig) -> Result<Vec<Sample>> {
    Ok(Environment::new(cfg.clone())?.training_set())
}

pub fn write_dataset<W: Write>(mut w: W, samples: &[Sample]) -> Result<()> {
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_dataset(path: &Path, samples: &[Sample]) -> Result<()> {
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_dataset(file, samples)
}

pub fn load_dataset(path: &Path) -> Result<Vec<Sample>> {
    let reader = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: Sample = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if sample.features.iter().any(|x| !x.is_finite()) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: "non-finite feature".into(),
            });
        }
        out.push(sample);
    }
    Ok(out)
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn gaussian_vec(rng: &mut Rng, n: usize, sd: f64) -> Vec<f64> {
    (0..n).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    loop {
        let v = gaussian_vec(rng, n, 1.0);
        let len = norm(&v);
        if len > 1e-12 {
            return v.into_iter().map(|x| x / len).collect();
        }
    }
}

/// Unit vector for `sym` inside a block of size `block`: the signed basis
/// vectors first (margin 1 under argmax decoding), random unit vectors once
/// those run out.
fn symbol_direction(rng: &mut Rng, block: usize, sym: usize) -> Vec<f64> {
    if sym < 2 * block {
        let mut v = vec![0.0; block];
        v[sym / 2] = if sym.is_multiple_of(2) { 1.0 } else { -1.0 };
        v
    } else {
        unit_vec(rng, block)
    }
}

/// Random orthogonal matrix (rows) by Gram-Schmidt on Gaussian rows.
fn random_orthogonal(rng: &mut Rng, n: usize) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    while rows.len() < n {
        let mut v = gaussian_vec(rng, n, 1.0);
        for r in &rows {
            let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            for (x, y) in v.iter_mut().zip(r) {
                *x -= dot * y;
            }
        }
        let len = norm(&v);
        if len > 1e-8 {
            rows.push(v.into_iter().map(|x| x / len).collect());
        }
    }
    rows
}

fn mat_vec(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter()
        .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}
