//! Reflection operators: propose a mutated template from failure feedback.

use std::io::{BufRead, BufReader, Write};
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::sync::mpsc;
use std::time::Duration;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::env::{Template, TemplateSpace};
use crate::error::{Error, Result};
use crate::policy::PolicyParams;
use crate::rng::Rng;

/// One failed mini-batch sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    /// Raw sample features.
    pub features: Vec<f64>,
    pub prediction: Vec<usize>,
    pub target: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeedbackBundle {
    pub failures: Vec<Failure>,
}

impl FeedbackBundle {
    pub fn is_empty(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Stand-in for the reflection model's "propose improvement" step.
pub trait ReflectionOperator: Send + Sync {
    fn name(&self) -> &'static str;

    /// Returns a valid non-empty template, or ε unchanged when `feedback`
    /// is empty and `z` is ε.
    fn propose(&self, z: &Template, feedback: &FeedbackBundle, rng: &mut Rng) -> Result<Template>;
}

/// Single-token hill climb on the summed target-token logit margin over the
/// failures, scored with a frozen policy snapshot. From ε it builds a genome
/// greedily, one position at a time.
#[derive(Debug, Clone)]
pub struct FeedbackGuided {
    space: TemplateSpace,
    params: PolicyParams,
    // shift[(pos * alphabet + sym)][l * vocab + v] = Θ_l[v] · table[pos][sym]
    shifts: Vec<Vec<f64>>,
}

impl FeedbackGuided {
    pub fn new(space: TemplateSpace, params: PolicyParams) -> Self {
        let (l_count, v_count) = (params.seq_len(), params.vocab_size());
        let mut shifts = Vec::with_capacity(space.genome_len() * space.alphabet());
        for pos in 0..space.genome_len() {
            for sym in 0..space.alphabet() {
                let vec = space.vector(pos, sym);
                let mut s = Vec::with_capacity(l_count * v_count);
                for l in 0..l_count {
                    for v in 0..v_count {
                        s.push(params.weight_row(l, v).iter().zip(vec).map(|(w, x)| w * x).sum());
                    }
                }
                shifts.push(s);
            }
        }
        Self {
            space,
            params,
            shifts,
        }
    }

    fn shift(&self, pos: usize, sym: usize) -> &[f64] {
        &self.shifts[pos * self.space.alphabet() + sym]
    }

    /// Summed margin `logit(t_l) − max_{v≠t_l} logit(v)` with an additive
    /// logit shift applied to every failure.
    fn score(&self, base: &[Vec<f64>], targets: &[&[usize]], shift: &[f64]) -> f64 {
        let v_count = self.params.vocab_size();
        let mut total = 0.0;
        for (logits, target) in base.iter().zip(targets) {
            for (l, &t) in target.iter().enumerate() {
                let row = &logits[l * v_count..(l + 1) * v_count];
                let srow = &shift[l * v_count..(l + 1) * v_count];
                let mut best_other = f64::NEG_INFINITY;
                for v in 0..v_count {
                    if v != t {
                        best_other = best_other.max(row[v] + srow[v]);
                    }
                }
                total += row[t] + srow[t] - best_other;
            }
        }
        total
    }
}

fn add_into(acc: &mut [f64], other: &[f64], sign: f64) {
    for (a, b) in acc.iter_mut().zip(other) {
        *a += sign * b;
    }
}

impl ReflectionOperator for FeedbackGuided {
    fn name(&self) -> &'static str {
        "feedback_guided"
    }

    fn propose(&self, z: &Template, feedback: &FeedbackBundle, _rng: &mut Rng) -> Result<Template> {
        if feedback.is_empty() {
            return Ok(z.clone());
        }
        let (l_count, v_count) = (self.params.seq_len(), self.params.vocab_size());
        let base: Vec<Vec<f64>> = feedback
            .failures
            .iter()
            .map(|f| (0..l_count).flat_map(|l| self.params.logits(l, &f.features)).collect())
            .collect();
        let targets: Vec<&[usize]> = feedback.failures.iter().map(|f| f.target.as_slice()).collect();
        let (m, g_count) = (self.space.genome_len(), self.space.alphabet());

        let genome = match z.genome() {
            None => {
                let mut shift = vec![0.0; l_count * v_count];
                let mut genome = Vec::with_capacity(m);
                for pos in 0..m {
                    let mut best = (f64::NEG_INFINITY, 0);
                    for sym in 0..g_count {
                        let mut trial = shift.clone();
                        add_into(&mut trial, self.shift(pos, sym), 1.0);
                        let s = self.score(&base, &targets, &trial);
                        if s > best.0 {
                            best = (s, sym);
                        }
                    }
                    add_into(&mut shift, self.shift(pos, best.1), 1.0);
                    genome.push(best.1);
                }
                genome
            }
            Some(current) => {
                let mut shift = vec![0.0; l_count * v_count];
                for (pos, &sym) in current.iter().enumerate() {
                    add_into(&mut shift, self.shift(pos, sym), 1.0);
                }
                let mut best = (f64::NEG_INFINITY, 0, current[0]);
                for (pos, &old) in current.iter().enumerate() {
                    for sym in (0..g_count).filter(|&s| s != old) {
                        let mut trial = shift.clone();
                        add_into(&mut trial, self.shift(pos, old), -1.0);
                        add_into(&mut trial, self.shift(pos, sym), 1.0);
                        let s = self.score(&base, &targets, &trial);
                        if s > best.0 {
                            best = (s, pos, sym);
                        }
                    }
                }
                let mut genome = current.to_vec();
                genome[best.1] = best.2;
                genome
            }
        };
        self.space.template(genome)
    }
}

/// Null operator: one uniformly random token change (a random genome from ε).
#[derive(Debug, Clone)]
pub struct RandomMutation {
    space: TemplateSpace,
}

impl RandomMutation {
    pub fn new(space: TemplateSpace) -> Self {
        Self { space }
    }
}

impl ReflectionOperator for RandomMutation {
    fn name(&self) -> &'static str {
        "random"
    }

    fn propose(&self, z: &Template, feedback: &FeedbackBundle, rng: &mut Rng) -> Result<Template> {
        let g = self.space.alphabet();
        let genome = match z.genome() {
            None if feedback.is_empty() => return Ok(z.clone()),
            None => (0..self.space.genome_len()).map(|_| rng.random_range(0..g)).collect(),
            Some(current) => {
                let mut genome = current.to_vec();
                let pos = rng.random_range(0..genome.len());
                let offset = rng.random_range(1..g);
                genome[pos] = (genome[pos] + offset) % g;
                genome
            }
        };
        self.space.template(genome)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EmptyMarker {
    #[serde(rename = "empty")]
    Empty,
}

/// Template on the wire: a genome as an integer list, or `"empty"`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WireTemplate {
    Genome(Vec<usize>),
    Empty(EmptyMarker),
}

impl WireTemplate {
    pub fn from_template(z: &Template) -> Self {
        match z.genome() {
            Some(g) => WireTemplate::Genome(g.to_vec()),
            None => WireTemplate::Empty(EmptyMarker::Empty),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireRequest {
    pub template: WireTemplate,
    pub feedback: Vec<Failure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireResponse {
    pub template: WireTemplate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Transport {
    /// Spawns `program args...` per request; one JSON line in on stdin, one out on stdout.
    Subprocess { program: PathBuf, args: Vec<String> },
    /// POSTs the request to `{base_url}/reflect`.
    Http { base_url: String },
}

/// Forwards proposals to an external process or HTTP service.
#[derive(Debug, Clone)]
pub struct ExternalReflector {
    space: TemplateSpace,
    transport: Transport,
    timeout: Duration,
}

impl ExternalReflector {
    pub fn new(space: TemplateSpace, transport: Transport, timeout: Duration) -> Self {
        Self {
            space,
            transport,
            timeout,
        }
    }

    fn exchange(&self, line: &str) -> Result<String> {
        match &self.transport {
            Transport::Subprocess { program, args } => self.exchange_subprocess(program, args, line),
            Transport::Http { base_url } => {
                let url = format!("{}/reflect", base_url.trim_end_matches('/'));
                let agent: ureq::Agent = ureq::Agent::config_builder()
                    .timeout_global(Some(self.timeout))
                    .build()
                    .into();
                let mut response = agent
                    .post(&url)
                    .header("content-type", "application/json")
                    .send(line)
                    .map_err(|e| Error::Reflection(format!("POST {url}: {e}")))?;
                response
                    .body_mut()
                    .read_to_string()
                    .map_err(|e| Error::Reflection(format!("reading response from {url}: {e}")))
            }
        }
    }

    fn exchange_subprocess(&self, program: &PathBuf, args: &[String], line: &str) -> Result<String> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| Error::Reflection(format!("spawning {}: {e}", program.display())))?;
        {
            let mut stdin = child.stdin.take().expect("piped stdin");
            stdin
                .write_all(line.as_bytes())
                .and_then(|_| stdin.write_all(b"\n"))
                .map_err(|e| Error::Reflection(format!("writing request: {e}")))?;
        }
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            let mut reply = String::new();
            let res = BufReader::new(stdout).read_line(&mut reply).map(|_| reply);
            let _ = tx.send(res);
        });
        let outcome = rx.recv_timeout(self.timeout);
        let _ = child.kill();
        let _ = child.wait();
        match outcome {
            Ok(Ok(reply)) if !reply.trim().is_empty() => Ok(reply),
            Ok(Ok(_)) => Err(Error::Reflection("empty response".into())),
            Ok(Err(e)) => Err(Error::Reflection(format!("reading response: {e}"))),
            Err(_) => Err(Error::Reflection(format!("timed out after {:?}", self.timeout))),
        }
    }
}

impl ReflectionOperator for ExternalReflector {
    fn name(&self) -> &'static str {
        "external"
    }

    fn propose(&self, z: &Template, feedback: &FeedbackBundle, _rng: &mut Rng) -> Result<Template> {
        let request = WireRequest {
            template: WireTemplate::from_template(z),
            feedback: feedback.failures.clone(),
        };
        let reply = self.exchange(&serde_json::to_string(&request)?)?;
        let response: WireResponse = serde_json::from_str(reply.trim())
            .map_err(|e| Error::Reflection(format!("malformed response: {e}")))?;
        match response.template {
            WireTemplate::Genome(g) => self
                .space
                .template(g)
                .map_err(|e| Error::Reflection(format!("invalid genome: {e}"))),
            WireTemplate::Empty(_) if feedback.is_empty() && z.is_empty() => Ok(z.clone()),
            WireTemplate::Empty(_) => Err(Error::Reflection("reflector returned the empty template".into())),
        }
    }
}
