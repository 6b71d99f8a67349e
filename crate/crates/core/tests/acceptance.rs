//! Acceptance criteria, one test each. Every test writes a single
//! `criterion N: PASS|FAIL ...` line to stderr (uncaptured) before asserting.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::sync::OnceLock;
use std::time::Instant;

use rand::Rng as _;
use rayon::prelude::*;

use p2o::distill::{DistillMode, build_distill_batch};
use p2o::env::{self, EnvConfig, Environment, Sample, TemplateSpace};
use p2o::gepa::{
    FeedbackGuided, GepaConfig, RandomMutation, ReflectionOperator, ScoredTemplate,
    gepa_run, greedy_cover, greedy_prompt_assignment, nondominated, select_pareto_front,
};
use p2o::grpo::{self, GroupConfig, HardSet, RolloutGroup};
use p2o::harness::{self, EpochMetrics, Mode, RunConfig, median, median_by_epoch};
use p2o::oracle::{self, EnumerationLimit};
use p2o::policy::{self, PolicyParams, Trajectory};
use p2o::rng;

fn verdict(n: u32, ok: bool, detail: &str, started: Instant) {
    let line = format!(
        "criterion {n}: {} ({detail}; {:.2}s)\n",
        if ok { "PASS" } else { "FAIL" },
        started.elapsed().as_secs_f64()
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(ok, "criterion {n} failed: {detail}");
}

fn random_params(r: &mut rng::Rng, v: usize, l: usize, d: usize, scale: f64) -> PolicyParams {
    let mut p = PolicyParams::zeros(v, l, d);
    for w in p.weights_mut() {
        *w = r.random_range(-scale..scale);
    }
    for b in p.bias_mut() {
        *b = r.random_range(-scale..scale);
    }
    p
}

fn random_vec(r: &mut rng::Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-scale..scale)).collect()
}

#[test]
fn criterion_01_vanishing_gradient() {
    let started = Instant::now();
    let env = Environment::new(EnvConfig {
        n_easy: 0,
        n_hard: 1024,
        ..EnvConfig::default()
    })
    .unwrap();
    let samples = env.training_set();
    let cfg = GroupConfig::default();
    let zero = PolicyParams::zeros(8, 4, 16);
    let mut degenerate_and_still = 0usize;
    for x in &samples {
        let g = grpo::rollout_group(&zero, x, None, &cfg, &mut rng::stream(1, &[x.id as u64])).unwrap();
        if !g.advantages.iter().all(|&a| a.to_bits() == 0) {
            continue;
        }
        let batch = build_distill_batch(std::slice::from_ref(&g), &samples, DistillMode::Distill).unwrap();
        let mut after = zero.clone();
        grpo::policy_update(&mut after, &batch, &cfg, None).unwrap();
        if after.iter().zip(zero.iter()).all(|(a, b)| a.to_bits() == b.to_bits()) {
            degenerate_and_still += 1;
        }
    }
    let frac = degenerate_and_still as f64 / samples.len() as f64;
    verdict(
        1,
        frac >= 0.99 && started.elapsed().as_secs_f64() < 10.0,
        &format!("{degenerate_and_still}/{} groups all-zero with bit-zero delta", samples.len()),
        started,
    );
}

#[test]
fn criterion_02_advantage_closed_form() {
    let started = Instant::now();
    let mut worst = 0.0f64;
    for k in 2..=12usize {
        for m in 1..k {
            let rewards: Vec<f64> = (0..k).map(|i| if i < m { 1.0 } else { 0.0 }).collect();
            let adv = grpo::compute_advantages(&rewards).unwrap();
            let (succ, fail) = oracle::binary_advantages(k, m).unwrap();
            for (i, a) in adv.iter().enumerate() {
                let want = if i < m { succ } else { fail };
                worst = worst.max((a - want).abs());
            }
        }
    }
    verdict(
        2,
        worst <= 1e-12 && started.elapsed().as_secs_f64() < 1.0,
        &format!("max deviation {worst:.2e}"),
        started,
    );
}

#[test]
fn criterion_03_gradient_correctness() {
    let started = Instant::now();
    let mut r = rng::stream(3, &[]);
    let mut worst_rel = 0.0f64;
    for _ in 0..100 {
        let (v, l, d) = (r.random_range(2..=6), r.random_range(1..=4), r.random_range(1..=6));
        let p = random_params(&mut r, v, l, d, 1.0);
        let phi = random_vec(&mut r, d, 1.5);
        let y: Vec<usize> = (0..l).map(|_| r.random_range(0..v)).collect();
        let g = policy::grad_log_prob(&p, &phi, &y).unwrap();
        let fd = oracle::finite_diff_grad(&p, &phi, &y, 1e-5).unwrap();
        let diff = g.iter().zip(fd.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let scale = fd.iter().map(|b| b.abs()).fold(0.0, f64::max).max(1e-12);
        worst_rel = worst_rel.max(diff / scale);
    }

    let mut worst_score = 0.0f64;
    for _ in 0..50 {
        let (v, l, d) = (r.random_range(2..=4), r.random_range(1..=3), r.random_range(1..=5));
        let p = random_params(&mut r, v, l, d, 1.0);
        let phi = random_vec(&mut r, d, 1.5);
        let dist = oracle::enumerate_policy(&p, &phi, EnumerationLimit::default()).unwrap();
        let mut expect = PolicyParams::zeros_like(&p);
        for (y, prob) in &dist {
            expect.add_scaled(&policy::grad_log_prob(&p, &phi, y).unwrap(), *prob);
        }
        worst_score = worst_score.max(expect.iter().map(|x| x.abs()).fold(0.0, f64::max));
    }
    verdict(
        3,
        worst_rel <= 1e-5 && worst_score <= 1e-8 && started.elapsed().as_secs_f64() < 10.0,
        &format!("max relative error {worst_rel:.2e}, max |E[grad log pi]| {worst_score:.2e}"),
        started,
    );
}

#[test]
fn criterion_04_pareto_oracle_equivalence() {
    let started = Instant::now();
    let mut r = rng::stream(4, &[]);
    let mut mismatches = 0;
    for _ in 0..200 {
        let m = r.random_range(1..=50);
        let n = r.random_range(1..=20);
        let density = r.random_range(0.05..0.95);
        let matrix: Vec<Vec<u8>> = (0..m)
            .map(|_| (0..n).map(|_| u8::from(r.random_bool(density))).collect())
            .collect();
        let pool: Vec<ScoredTemplate> = matrix
            .iter()
            .map(|s| ScoredTemplate::new(p2o::env::Template::empty(2), s.clone()))
            .collect();
        let want = oracle::pareto_front_bruteforce(&matrix, EnumerationLimit::default()).unwrap();
        let got: BTreeSet<usize> = select_pareto_front(&pool, usize::MAX, &mut r).unwrap().into_iter().collect();
        let direct: BTreeSet<usize> = nondominated(&pool).unwrap().into_iter().collect();
        if got != want || direct != want {
            mismatches += 1;
        }
    }
    verdict(
        4,
        mismatches == 0 && started.elapsed().as_secs_f64() < 5.0,
        &format!("{mismatches}/200 mismatching fronts"),
        started,
    );
}

#[test]
fn criterion_05_greedy_cover_audit() {
    let started = Instant::now();
    let mut r = rng::stream(5, &[]);
    let mut failures = Vec::new();
    for case in 0..200 {
        let m = r.random_range(1..=30);
        let n = r.random_range(1..=25);
        let density = r.random_range(0.02..0.6);
        let pool: Vec<ScoredTemplate> = (0..m)
            .map(|_| {
                let s = (0..n).map(|_| u8::from(r.random_bool(density))).collect();
                ScoredTemplate::new(p2o::env::Template::empty(2), s)
            })
            .collect();
        let sets: Vec<BTreeSet<usize>> = pool.iter().map(|t| t.coverage().collect()).collect();
        let picks: Vec<usize> = greedy_cover(&pool).iter().map(|s| s.template_id).collect();
        if let Err(e) = oracle::audit_cover(&sets, &picks) {
            failures.push(format!("case {case}: {e}"));
        }
        if picks != oracle::greedy_cover_replay(&sets) {
            failures.push(format!("case {case}: differs from replay"));
        }
    }

    // ε at index 0, then z1..z3 over dev samples a, b, c
    let worked: Vec<ScoredTemplate> = [[0, 0, 0], [1, 1, 0], [0, 1, 1], [0, 0, 1]]
        .iter()
        .map(|s| ScoredTemplate::new(p2o::env::Template::empty(2), s.to_vec()))
        .collect();
    let hard = HardSet::new(0, vec![10, 11, 12]);
    let map = greedy_prompt_assignment(&worked, &hard, &[10, 11, 12], 6, &mut r).unwrap();
    if map.covered_ids() != vec![1, 2] {
        failures.push(format!("worked example covered {:?}", map.covered_ids()));
    }
    verdict(
        5,
        failures.is_empty() && started.elapsed().as_secs_f64() < 5.0,
        &if failures.is_empty() {
            "200 random instances audited; worked example gives [z1, z2]".to_string()
        } else {
            failures.join("; ")
        },
        started,
    );
}

#[test]
fn criterion_06_budget_ledger() {
    let started = Instant::now();
    let failures: Vec<String> = (0..50u64)
        .into_par_iter()
        .filter_map(|case| {
            let mut r = rng::stream(6, &[case]);
            let env = Environment::new(EnvConfig {
                n_easy: 0,
                n_hard: r.random_range(2..=40),
                n_hard_clusters: 2,
                seed: case,
                ..EnvConfig::default()
            })
            .unwrap();
            let samples = env.training_set();
            let hard = HardSet::new(0, samples.iter().map(|s| s.id).collect());
            let cfg = GepaConfig {
                budget: r.random_range(1..=400),
                minibatch_size: r.random_range(1..=8),
                beam_width: r.random_range(1..=6),
                dev_size: r.random_bool(0.5).then(|| r.random_range(1..=20)),
                n_eval: r.random_range(1..=4),
                ..GepaConfig::default()
            };
            let params = if r.random_bool(0.5) {
                PolicyParams::zeros(8, 4, 16)
            } else {
                random_params(&mut r, 8, 4, 16, 0.5)
            };
            let reflector: Box<dyn ReflectionOperator> = if r.random_bool(0.5) {
                Box::new(FeedbackGuided::new(env.templates().clone(), params.clone()))
            } else {
                Box::new(RandomMutation::new(env.templates().clone()))
            };
            let out = gepa_run(&hard, &samples, &params, reflector.as_ref(), &cfg, 6, &mut r).unwrap();
            let lines: Vec<String> = out.ledger.iter().map(|e| serde_json::to_string(e).unwrap()).collect();
            let replayed = oracle::ledger_replay(&lines).unwrap();
            let b = cfg.minibatch_size.min(out.train_ids.len()) as u64;
            let bound = cfg.budget + 2 * b + out.dev_ids.len() as u64 - 1;
            (replayed != out.budget_used || out.budget_used > bound).then(|| {
                format!(
                    "case {case}: replay {replayed}, reported {}, bound {bound}",
                    out.budget_used
                )
            })
        })
        .collect();
    verdict(
        6,
        failures.is_empty() && started.elapsed().as_secs_f64() < 60.0,
        &if failures.is_empty() {
            "50 randomized runs replay exactly within the overshoot bound".to_string()
        } else {
            failures.join("; ")
        },
        started,
    );
}

fn group_under(
    params: &PolicyParams,
    x: &Sample,
    space: &TemplateSpace,
    genomes: &[Option<Vec<usize>>],
    tokens: &[Vec<usize>],
    advantages: &[f64],
) -> RolloutGroup {
    let mut trajectories = Vec::new();
    let mut template_ids = Vec::new();
    for (i, (g, y)) in genomes.iter().zip(tokens).enumerate() {
        let z = space.from_genome(g.clone()).unwrap();
        let phi = env::insert_template(x, &z).features;
        trajectories.push(Trajectory {
            tokens: y.clone(),
            gen_log_prob: policy::log_prob(params, &phi, y).unwrap(),
            gen_features: phi,
        });
        template_ids.push(g.as_ref().map(|_| i + 1));
    }
    RolloutGroup {
        sample_id: x.id,
        trajectories,
        rewards: vec![0; tokens.len()],
        mean: 0.0,
        std: 0.0,
        advantages: advantages.to_vec(),
        template_ids,
    }
}

fn updated(params: &PolicyParams, groups: &[RolloutGroup], data: &[Sample], mode: DistillMode) -> Vec<u64> {
    let mut p = params.clone();
    let batch = build_distill_batch(groups, data, mode).unwrap();
    grpo::policy_update(&mut p, &batch, &GroupConfig::default(), None).unwrap();
    p.iter().map(|x| x.to_bits()).collect()
}

#[test]
fn criterion_07_distillation_invariance() {
    let started = Instant::now();
    let env = Environment::new(EnvConfig::default()).unwrap();
    let data = env.training_set();
    let space = env.templates();
    let mut r = rng::stream(7, &[]);
    let mut failures = Vec::new();
    for case in 0..100 {
        let params = random_params(&mut r, 8, 4, 16, 0.3);
        let x = &data[r.random_range(0..data.len())];
        let k = 6;
        let tokens: Vec<Vec<usize>> = (0..k).map(|_| (0..4).map(|_| r.random_range(0..8)).collect()).collect();
        let rewards: Vec<f64> = (0..k).map(|i| f64::from(u8::from(i % 3 == 0))).collect();
        let adv = grpo::compute_advantages(&rewards).unwrap();
        let genome = |r: &mut rng::Rng| {
            Some((0..space.genome_len()).map(|_| r.random_range(0..space.alphabet())).collect::<Vec<_>>())
        };
        let plain = vec![None; k];
        let templated: Vec<Option<Vec<usize>>> = (0..k).map(|_| genome(&mut r)).collect();
        let other: Vec<Option<Vec<usize>>> = (0..k)
            .map(|i| if i % 2 == 0 { genome(&mut r) } else { None })
            .collect();
        let variants = [&plain, &templated, &other].map(|g| group_under(&params, x, space, g, &tokens, &adv));
        let distill: Vec<Vec<u64>> = variants
            .iter()
            .map(|g| updated(&params, std::slice::from_ref(g), &data, DistillMode::Distill))
            .collect();
        if distill.iter().any(|d| d != &distill[0]) {
            failures.push(format!("case {case}: distill updates differ"));
        }
        let dependency: Vec<Vec<u64>> = variants
            .iter()
            .map(|g| updated(&params, std::slice::from_ref(g), &data, DistillMode::Dependency))
            .collect();
        if dependency[1] == dependency[0] || dependency[2] == dependency[0] {
            failures.push(format!("case {case}: dependency update ignores the template"));
        }
        if dependency[0] != distill[0] {
            failures.push(format!("case {case}: template-free modes disagree"));
        }
    }
    verdict(
        7,
        failures.is_empty() && started.elapsed().as_secs_f64() < 5.0,
        &if failures.is_empty() {
            "100 constructed groups".to_string()
        } else {
            failures.join("; ")
        },
        started,
    );
}

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn desk_config(mode: Mode, seed: u64) -> RunConfig {
    let mut cfg = RunConfig {
        mode,
        seed,
        ..RunConfig::default()
    };
    cfg.env.seed = seed;
    cfg
}

struct DeskRuns {
    runs: BTreeMap<Mode, Vec<Vec<EpochMetrics>>>,
    seconds: f64,
}

fn desk_runs() -> &'static DeskRuns {
    static RUNS: OnceLock<DeskRuns> = OnceLock::new();
    RUNS.get_or_init(|| {
        let started = Instant::now();
        let jobs: Vec<(Mode, u64)> = Mode::ALL
            .iter()
            .flat_map(|&m| SEEDS.iter().map(move |&s| (m, s)))
            .collect();
        let results: Vec<(Mode, Vec<EpochMetrics>)> = jobs
            .par_iter()
            .map(|&(m, s)| (m, harness::run_p2o(&desk_config(m, s), None).unwrap().metrics))
            .collect();
        let mut runs: BTreeMap<Mode, Vec<Vec<EpochMetrics>>> = BTreeMap::new();
        for (m, metrics) in results {
            runs.entry(m).or_default().push(metrics);
        }
        DeskRuns {
            runs,
            seconds: started.elapsed().as_secs_f64(),
        }
    })
}

fn final_hard_median(runs: &[Vec<EpochMetrics>]) -> f64 {
    let finals: Vec<f64> = runs.iter().map(|r| r.last().unwrap().hard_subset_accuracy).collect();
    median(&finals).unwrap()
}

#[test]
fn criterion_08_directional_modes() {
    let started = Instant::now();
    let desk = desk_runs();
    let p2o = final_hard_median(&desk.runs[&Mode::P2o]);
    let grpo = final_hard_median(&desk.runs[&Mode::GrpoOnly]);
    let no_distill = final_hard_median(&desk.runs[&Mode::NoDistill]);
    let same = final_hard_median(&desk.runs[&Mode::SameTemplateInGroup]);
    let ok = p2o - grpo >= 0.20 && no_distill < p2o && same <= p2o && desk.seconds < 900.0;
    verdict(
        8,
        ok,
        &format!(
            "median final hard-subset accuracy: p2o {p2o:.3}, grpo_only {grpo:.3}, no_distill {no_distill:.3}, same_template_in_group {same:.3}; runs took {:.1}s",
            desk.seconds
        ),
        started,
    );
}

#[test]
fn criterion_09_hard_count_and_pass_rates() {
    let started = Instant::now();
    let runs = &desk_runs().runs[&Mode::P2o];
    let counts = median_by_epoch(runs, |m| Some(m.hard_count as f64));
    let counts: Vec<f64> = counts.into_iter().map(Option::unwrap).collect();
    let transitions = counts.len() - 1;
    let non_increasing = counts.windows(2).filter(|w| w[1] <= w[0]).count();
    let decline_ok = non_increasing as f64 >= 0.8 * transitions as f64;

    let series = |f: fn(&EpochMetrics) -> Option<f64>| median_by_epoch(runs, f);
    let p1 = series(|m| m.pass_at_1);
    let pk = series(|m| m.pass_at_k);
    let p1t = series(|m| m.pass_at_1_with_templates);
    let pkt = series(|m| m.pass_at_k_with_templates);
    let mut lagging = Vec::new();
    for t in 0..counts.len() {
        if let (Some(a), Some(b), Some(c), Some(d)) = (p1[t], p1t[t], pk[t], pkt[t]) {
            if b < a || d < c {
                lagging.push(t);
            }
        }
    }
    verdict(
        9,
        decline_ok && lagging.is_empty(),
        &format!(
            "median hard_count {counts:?}, {non_increasing}/{transitions} non-increasing; epochs where templates trail: {lagging:?}"
        ),
        started,
    );
}

#[test]
fn criterion_10_reproducibility() {
    let started = Instant::now();
    let cfg = RunConfig {
        n_epochs: 3,
        ..desk_config(Mode::P2o, 11)
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    harness::run_p2o(&cfg, Some(a.path())).unwrap();
    harness::run_p2o(&cfg, Some(b.path())).unwrap();
    let mut files = vec!["metrics.jsonl".to_string(), "gepa_events.jsonl".into(), "templates.jsonl".into()];
    files.extend((0..cfg.n_epochs).map(|t| format!("epoch_{t}.ckpt")));
    let differing: Vec<&String> = files
        .iter()
        .filter(|f| std::fs::read(a.path().join(f)).unwrap() != std::fs::read(b.path().join(f)).unwrap())
        .collect();
    verdict(
        10,
        differing.is_empty(),
        &format!("{} files compared, differing: {differing:?}", files.len()),
        started,
    );
}
