//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! Criteria listed in `KNOWN_RED` are expected to fail with the default
//! configuration; their FAIL line is still printed and the reason recorded
//! next to it. Any other failure, or a known red that starts passing, makes
//! the binary exit nonzero.

use std::collections::BTreeSet;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ser_core::checkpoint;
use ser_core::config::ExperimentConfig;
use ser_core::cost::{annotation_costs, cost_table, pipeline_cost, CostInputs};
use ser_core::metrics::loop_table;
use ser_core::par::with_threads;
use ser_core::pipeline::{self, prepare, seed_list, Stage};
use ser_core::policy::{scale_reward, surrogate_and_grad, PolicyFeatures, PolicyParams, PromptTable, Rollout};
use ser_core::reward_model::{pairwise_loss_and_grad, Activation, OrderedPair, RewardModelParams};
use ser_core::self_evolve::{filter_data, identify_status, LearningStatus, ScoredPair, SerThresholds, Termination};
use ser_core::world::{generate_world, AnswerId, Label, PairKey, PreferencePair, QuestionId, WorldConfig};

const SEEDS: usize = 5;

/// Criterion number and why it cannot pass with the default configuration.
const KNOWN_RED: &[(u32, &str)] = &[(
    1,
    "0.67 x 0.15 + 3 x 1.33864e-4 = 0.100902, which is 3.6e-4 above the published 0.10054",
)];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-300)
}

fn c1_cost() -> Outcome {
    let d = CostInputs::default();
    let a = annotation_costs(&d);
    let p = pipeline_cost(&d).expect("default costs");
    let t = cost_table(&d).expect("default table");
    let human = (a.human_usd_per_sample - 0.668).abs() <= 0.001;
    let inference = (p.inference_usd_per_sample - 1.3387e-4).abs() <= 1e-7;
    let ser = (p.ser_usd_per_sample - 0.10054).abs() <= 1e-4;
    let ratio = t.human_to_ser_ratio > 6.0;
    outcome(
        human && inference && ser && ratio,
        format!(
            "human {:.6} [{}] inference {:.6e} [{}] ser {:.6} vs 0.10054 [{}] ratio {:.3} [{}]",
            a.human_usd_per_sample,
            ok(human),
            p.inference_usd_per_sample,
            ok(inference),
            p.ser_usd_per_sample,
            ok(ser),
            t.human_to_ser_ratio,
            ok(ratio)
        ),
    )
}

fn ok(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "off"
    }
}

fn naive_status(pool: &[ScoredPair], th: &SerThresholds, exclude: &BTreeSet<PairKey>) -> (LearningStatus, usize, usize) {
    let (mut s1, mut s2) = (0, 0);
    for sp in pool {
        let (q, a, b) = (sp.pair.question_id, sp.pair.answer_1_id, sp.pair.answer_2_id);
        if exclude.contains(&(q, a.min(b), a.max(b))) {
            continue;
        }
        let one = (sp.p1 > th.tau_high && sp.p2 < th.tau_low) || (sp.p2 > th.tau_high && sp.p1 < th.tau_low);
        if one {
            s1 += 1;
        } else if (sp.p1 - sp.p2).abs() >= th.tau_delta {
            s2 += 1;
        }
    }
    let n_min = th.effective_n_min(pool.len());
    let status = if s1 >= n_min {
        LearningStatus::Status1
    } else if s2 >= n_min {
        LearningStatus::Status2
    } else {
        LearningStatus::Stop
    };
    (status, s1, s2)
}

fn naive_filter(
    pool: &[ScoredPair],
    status: LearningStatus,
    th: &SerThresholds,
    exclude: &BTreeSet<PairKey>,
) -> Vec<(u32, u32, u32)> {
    let mut out = Vec::new();
    for sp in pool {
        let (q, a, b) = (sp.pair.question_id, sp.pair.answer_1_id, sp.pair.answer_2_id);
        if exclude.contains(&(q, a.min(b), a.max(b))) {
            continue;
        }
        let one = (sp.p1 > th.tau_high && sp.p2 < th.tau_low) || (sp.p2 > th.tau_high && sp.p1 < th.tau_low);
        let keep = match status {
            LearningStatus::Status1 => one,
            LearningStatus::Status2 => !one && (sp.p1 - sp.p2).abs() > th.delta_filter,
            LearningStatus::Stop => false,
        };
        if keep {
            let (c, r) = if sp.p1 >= sp.p2 { (a, b) } else { (b, a) };
            out.push((q.0, c.0, r.0));
        }
    }
    out
}

fn random_pool(r: &mut ChaCha8Rng) -> (Vec<ScoredPair>, SerThresholds, BTreeSet<PairKey>) {
    let n = r.random_range(0..=10_000usize);
    let tau_low = r.random_range(0.0..0.95);
    let tau_high = r.random_range(tau_low + 0.01..=1.0);
    let tau_delta = r.random_range(0.01..0.99);
    let th = SerThresholds {
        tau_high,
        tau_low,
        tau_delta,
        delta_filter: if r.random::<bool>() { tau_delta } else { r.random_range(0.01..0.99) },
        n_min: r.random_range(1..=(n / 4).max(1)),
        n_min_fraction: if r.random::<bool>() { 0.0 } else { r.random_range(0.0..0.3) },
        max_loops: 8,
    };
    // A coarse grid makes exact threshold hits common.
    let grid = r.random::<bool>();
    let draw = |r: &mut ChaCha8Rng| {
        if grid {
            r.random_range(0..=20) as f64 / 20.0
        } else {
            r.random::<f64>()
        }
    };
    let mut exclude = BTreeSet::new();
    let pool: Vec<ScoredPair> = (0..n)
        .map(|i| {
            let q = QuestionId(i as u32);
            let (a, b) = if r.random::<bool>() { (0, 1) } else { (1, 0) };
            if r.random::<f64>() < 0.1 {
                exclude.insert((q, AnswerId(0), AnswerId(1)));
            }
            let (p1, p2) = (draw(r), draw(r));
            ScoredPair {
                pair: PreferencePair::unlabeled(q, AnswerId(a), AnswerId(b)),
                p1,
                p2,
                delta: (p1 - p2).abs(),
            }
        })
        .collect();
    (pool, th, exclude)
}

fn c2_oracle_equivalence() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let mut mismatches = 0;
    let mut seen = [0usize; 3];
    for _ in 0..100 {
        let (pool, th, exclude) = random_pool(&mut r);
        let rep = identify_status(&pool, &th, &exclude);
        let (status, s1, s2) = naive_status(&pool, &th, &exclude);
        seen[status as usize] += 1;
        if (rep.status, rep.status1_count, rep.status2_count) != (status, s1, s2) {
            mismatches += 1;
            continue;
        }
        for st in [LearningStatus::Status1, LearningStatus::Status2, LearningStatus::Stop] {
            let got: Vec<(u32, u32, u32)> = filter_data(&pool, st, &th, &exclude)
                .iter()
                .map(|p| {
                    assert_eq!(p.label, Label::Chosen1);
                    (p.question_id.0, p.answer_1_id.0, p.answer_2_id.0)
                })
                .collect();
            if got != naive_filter(&pool, st, &th, &exclude) {
                mismatches += 1;
            }
        }
    }
    outcome(
        mismatches == 0,
        format!(
            "100 pools, {mismatches} mismatches (status1 {} status2 {} stop {})",
            seen[0], seen[1], seen[2]
        ),
    )
}

const FD_STEP: f64 = 1e-6;
const GRAD_TOL: f64 = 1e-4;

/// Worst relative error over components whose magnitude is above round-off.
fn worst_component(analytic: &[f64], f: impl Fn(usize, f64) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    for (i, &g) in analytic.iter().enumerate() {
        let fd = (f(i, FD_STEP) - f(i, -FD_STEP)) / (2.0 * FD_STEP);
        if g.abs() + fd.abs() < 1e-7 {
            continue;
        }
        worst = worst.max(rel_err(g, fd));
    }
    worst
}

fn c3_gradients() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let (mut rm_worst, mut rm_skipped, mut rm_done) = (0.0f64, 0, 0);
    while rm_done < 50 {
        let dim = r.random_range(2..5);
        let hidden = r.random_range(1..6);
        let mut params = RewardModelParams::random(dim, hidden, r.random());
        params.activation = Activation::Tanh;
        let margin = r.random_range(0.05..0.5);
        let batch: Vec<OrderedPair> = (0..r.random_range(1..6))
            .map(|_| OrderedPair {
                chosen: (0..2 * dim).map(|_| r.random_range(-1.0..1.0)).collect(),
                rejected: (0..2 * dim).map(|_| r.random_range(-1.0..1.0)).collect(),
            })
            .collect();
        let near_kink = batch
            .iter()
            .any(|p| (margin - (params.prob(&p.chosen) - params.prob(&p.rejected))).abs() < 1e-4);
        if near_kink {
            rm_skipped += 1;
            continue;
        }
        let (_, g) = pairwise_loss_and_grad(&params, &batch, margin).expect("loss");
        let w = worst_component(&g, |i, h| {
            let mut p = params.clone();
            p.weights[i] += h;
            pairwise_loss_and_grad(&p, &batch, margin).expect("loss").0
        });
        rm_worst = rm_worst.max(w);
        rm_done += 1;
    }

    let (mut pg_worst, mut pg_skipped, mut pg_done) = (0.0f64, 0, 0);
    let mut world = generate_world(&WorldConfig {
        dim: 3,
        n_questions: 20,
        seed: 3,
        ..WorldConfig::default()
    })
    .expect("world");
    let qs: Vec<QuestionId> = (0..20).map(QuestionId).collect();
    world.ensure_candidates(&qs, 4).expect("candidates");
    while pg_done < 50 {
        let features = [PolicyFeatures::Concat, PolicyFeatures::Interaction][pg_done % 2];
        let table = PromptTable::build(&world, &qs, features).expect("table");
        let rand_policy = |r: &mut ChaCha8Rng| {
            let mut p = PolicyParams::uniform(&table);
            p.weights.iter_mut().for_each(|w| *w = r.random_range(-0.5..0.5));
            p
        };
        let behavior = rand_policy(&mut r);
        let policy = rand_policy(&mut r);
        let eps = r.random_range(0.05..0.3);
        let kl = r.random_range(0.0..0.5);
        let rollouts: Vec<Rollout> = (0..r.random_range(1..10))
            .map(|_| {
                let prompt = r.random_range(0..table.len());
                let action = r.random_range(0..4);
                Rollout {
                    question_id: table.prompts[prompt],
                    prompt,
                    action,
                    answer_id: table.candidates[prompt][action],
                    behavior_prob: behavior.probs(&table.inputs[prompt])[action],
                    raw_reward: 0.0,
                    scaled_reward: 0.0,
                    advantage: r.random_range(-1.0..1.0),
                }
            })
            .collect();
        let near_kink = rollouts.iter().any(|ro| {
            let ratio = policy.probs(&table.inputs[ro.prompt])[ro.action] / ro.behavior_prob;
            (ratio - (1.0 - eps)).abs() < 1e-4 || (ratio - (1.0 + eps)).abs() < 1e-4
        });
        if near_kink {
            pg_skipped += 1;
            continue;
        }
        let (_, g) = surrogate_and_grad(&policy, &rollouts, &table, eps, kl).expect("surrogate");
        let w = worst_component(&g, |i, h| {
            let mut p = policy.clone();
            p.weights[i] += h;
            surrogate_and_grad(&p, &rollouts, &table, eps, kl).expect("surrogate").0
        });
        pg_worst = pg_worst.max(w);
        pg_done += 1;
    }
    outcome(
        rm_worst < GRAD_TOL && pg_worst < GRAD_TOL,
        format!(
            "hinge loss worst rel err {rm_worst:.2e} ({rm_skipped} kink instances redrawn), surrogate {pg_worst:.2e} ({pg_skipped} redrawn)"
        ),
    )
}

struct SerSeed {
    seed: u64,
    accs: Vec<f64>,
    n_test: usize,
    full: f64,
    statuses: Vec<LearningStatus>,
    termination: Termination,
    cumulative: usize,
    unlabeled: usize,
}

fn ser_seeds(cfg: &ExperimentConfig) -> Vec<SerSeed> {
    seed_list(cfg, SEEDS)
        .into_iter()
        .map(|seed| {
            let p = prepare(&ExperimentConfig { seed, ..cfg.clone() }).expect("prepare");
            let run = p.run_ser().expect("ser run");
            SerSeed {
                seed,
                accs: run.state.accuracies(),
                n_test: p.splits.test.len(),
                full: p.full_data_accuracy().expect("full-data baseline"),
                statuses: run.state.status_sequence(),
                termination: run.state.termination,
                cumulative: run.state.cumulative_filtered.len(),
                unlabeled: p.splits.unlabeled.len(),
            }
        })
        .collect()
}

fn c4_theorem1(runs: &[SerSeed]) -> Outcome {
    let mut lines = Vec::new();
    let (mut above_half, mut gains, mut no_drop) = (true, 0, true);
    for s in runs {
        let (first, last) = (s.accs[0], *s.accs.last().expect("records"));
        above_half &= first > 0.5;
        if last - first >= 0.03 {
            gains += 1;
        }
        let worst = s
            .accs
            .windows(2)
            .map(|w| (w[0] - w[1]) - 2.0 * (w[0] * (1.0 - w[0]) / s.n_test as f64).sqrt())
            .fold(f64::NEG_INFINITY, f64::max);
        no_drop &= worst <= 0.0;
        lines.push(format!("{}:{:.3}->{:.3}", s.seed, first, last));
    }
    outcome(
        above_half && gains >= 4 && no_drop,
        format!(
            "loop0>0.5 all [{}], gain>=3pt on {gains}/{} seeds, no drop beyond 2 SE [{}] | {}",
            ok(above_half),
            runs.len(),
            ok(no_drop),
            lines.join(" ")
        ),
    )
}

fn c5_full_data(runs: &[SerSeed]) -> Outcome {
    let n = runs.len() as f64;
    let ser = runs.iter().map(|s| *s.accs.last().expect("records")).sum::<f64>() / n;
    let full = runs.iter().map(|s| s.full).sum::<f64>() / n;
    outcome(
        (ser - full).abs() <= 0.02,
        format!("mean final SER {ser:.4} vs full oracle labels {full:.4}, gap {:.4}", full - ser),
    )
}

/// A possibly empty Status1 run, then a possibly empty Status2 run, then Stop.
fn schedule_ok(statuses: &[LearningStatus], termination: Termination) -> bool {
    let n1 = statuses.iter().take_while(|s| **s == LearningStatus::Status1).count();
    let n2 = statuses[n1..].iter().take_while(|s| **s == LearningStatus::Status2).count();
    termination == Termination::Stop && statuses[n1 + n2..] == [LearningStatus::Stop]
}

fn c6_schedule(runs: &[SerSeed]) -> Outcome {
    let mut all = true;
    let mut with_status2 = 0;
    let mut lines = Vec::new();
    for s in runs {
        if s.statuses.contains(&LearningStatus::Status2) {
            with_status2 += 1;
        }
        let shape = schedule_ok(&s.statuses, s.termination);
        let share = s.cumulative as f64 / s.unlabeled as f64;
        all &= shape && share <= 0.7;
        let seq: Vec<&str> = s
            .statuses
            .iter()
            .map(|st| match st {
                LearningStatus::Status1 => "1",
                LearningStatus::Status2 => "2",
                LearningStatus::Stop => "S",
            })
            .collect();
        lines.push(format!("{}:{} {:.0}%", s.seed, seq.concat(), 100.0 * share));
    }
    outcome(
        all,
        format!(
            "status1* status2* stop and filtered <= 70% on every seed, status2 reached on {with_status2}/{} | {}",
            runs.len(),
            lines.join(" ")
        ),
    )
}

fn c7_theorem2(cfg: &ExperimentConfig) -> Outcome {
    let r = pipeline::validate_theorem2(cfg, &seed_list(cfg, SEEDS)).expect("theorem 2");
    let levels: Vec<String> = r
        .levels
        .iter()
        .map(|l| format!("{}:{:.2}%", l.eps_r, 100.0 * l.regret_fraction))
        .collect();
    outcome(
        r.zero_level_fraction <= 0.05 && r.spearman >= 0.8,
        format!(
            "regret at 0 {:.2}% of optimal (<= 5%), Spearman {:.3} (>= 0.8) | {}",
            100.0 * r.zero_level_fraction,
            r.spearman,
            levels.join(" ")
        ),
    )
}

fn c8_winrate(cfg: &ExperimentConfig) -> Outcome {
    let mut lines = Vec::new();
    let mut all = true;
    for seed in seed_list(cfg, SEEDS) {
        let p = prepare(&ExperimentConfig { seed, ..cfg.clone() }).expect("prepare");
        let run = p.run_ser().expect("ser run");
        let (_, out) = pipeline::train_policy(&p, &run.params).expect("ppo");
        let w = p.win_rate(&out.policy).expect("win rate");
        all &= w.win_minus_lose > 0 && w.n_prompts == 1000;
        lines.push(format!("{}:{}/{}/{}", seed, w.result.win, w.result.tie, w.result.lose));
    }
    outcome(all, format!("win-lose > 0 on 1000 prompts, every seed | win/tie/lose {}", lines.join(" ")))
}

fn c9_scaling() -> Outcome {
    let s = |raw| scale_reward(raw, 0.0, -1.0, 1.0).expect("scale");
    let exact = s(0.0) == 0.0 && s(f64::INFINITY) == 1.0 && s(f64::NEG_INFINITY) == -1.0 && s(3f64.ln()) == 0.5;
    let large = s(1e3) == 1.0 && s(-1e3) == -1.0;
    let mut r = ChaCha8Rng::seed_from_u64(9);
    let mut violations = 0;
    for _ in 0..10_000 {
        let t = r.random_range(0.0..0.99);
        let lo = r.random_range(-5.0..5.0);
        let hi = lo + r.random_range(0.0..5.0);
        let a: f64 = r.random_range(-20.0..20.0);
        let b = a + r.random_range(0.0..5.0);
        let (ya, yb) = (scale_reward(a, t, lo, hi).expect("scale"), scale_reward(b, t, lo, hi).expect("scale"));
        if ya > yb || ya < lo || yb > hi {
            violations += 1;
        }
    }
    outcome(
        exact && large && violations == 0,
        format!(
            "0 -> {}, +inf -> {}, -inf -> {}, ln 3 -> {}, monotonicity violations {violations} / 10000",
            s(0.0),
            s(f64::INFINITY),
            s(f64::NEG_INFINITY),
            s(3f64.ln())
        ),
    )
}

fn fixed_clock() -> u64 {
    0
}

fn run_pipeline(cfg: &ExperimentConfig, out: &Path, threads: Option<usize>) {
    with_threads(threads, || {
        for stage in [Stage::GenData, Stage::SerLoop, Stage::Ppo, Stage::EvalWinrate] {
            pipeline::run(&stage, cfg, out, fixed_clock).expect("pipeline stage");
        }
    });
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).expect("read dir") {
            let path = e.expect("entry").path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).expect("prefix").display().to_string();
                out.push((rel, std::fs::read(&path).expect("read")));
            }
        }
    }
    out.sort();
    out
}

fn c10_determinism(cfg: &ExperimentConfig) -> Outcome {
    let dirs: Vec<_> = (0..3).map(|_| tempfile::tempdir().expect("tempdir")).collect();
    run_pipeline(cfg, dirs[0].path(), None);
    run_pipeline(cfg, dirs[1].path(), None);
    run_pipeline(cfg, dirs[2].path(), Some(1));
    let a = tree(dirs[0].path());
    let rerun = a == tree(dirs[1].path());
    let threads = a == tree(dirs[2].path());

    let mut ckpt = 0;
    let mut ckpt_ok = true;
    for (rel, bytes) in &a {
        if rel.ends_with(".ckpt") {
            ckpt += 1;
            let ck = checkpoint::load_checkpoint(&dirs[0].path().join(rel)).expect("load");
            ckpt_ok &= checkpoint::encode(&ck) == *bytes;
        }
    }

    let p = prepare(cfg).expect("prepare");
    let run = p.run_ser().expect("ser run");
    let csv = dirs[0].path().join("ser/loop_metrics.csv");
    let before = std::fs::read(&csv).expect("metrics");
    loop_table(&run.state.records).write(&csv).expect("rewrite");
    let idempotent = before == std::fs::read(&csv).expect("metrics");

    outcome(
        rerun && threads && ckpt_ok && ckpt > 0 && idempotent,
        format!(
            "{} files identical across reruns [{}] and with one thread [{}], {ckpt} checkpoints bit-exact [{}], metrics rewrite identical [{}]",
            a.len(),
            ok(rerun),
            ok(threads),
            ok(ckpt_ok),
            ok(idempotent)
        ),
    )
}

fn main() {
    let cfg = ExperimentConfig::default();
    let mut results: Vec<(u32, Outcome, Duration)> = Vec::new();
    let mut timed = |n: u32, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let o = f();
        let d = t.elapsed();
        results.push((n, o, d));
        let (n, o, d) = results.last().expect("just pushed");
        println!("criterion {n:>2}: {} ({:.1}s) {}", if o.pass { "PASS" } else { "FAIL" }, d.as_secs_f64(), o.detail);
    };
    timed(1, &mut c1_cost);
    timed(2, &mut c2_oracle_equivalence);
    timed(3, &mut c3_gradients);
    let t = Instant::now();
    let runs = ser_seeds(&cfg);
    let shared = t.elapsed();
    println!("(shared SER runs over {} seeds took {:.1}s)", runs.len(), shared.as_secs_f64());
    timed(4, &mut || c4_theorem1(&runs));
    timed(5, &mut || c5_full_data(&runs));
    timed(6, &mut || c6_schedule(&runs));
    timed(7, &mut || c7_theorem2(&cfg));
    timed(8, &mut || c8_winrate(&cfg));
    timed(9, &mut c9_scaling);
    timed(10, &mut || c10_determinism(&cfg));

    let mut unexpected = Vec::new();
    for (n, o, _) in &results {
        match KNOWN_RED.iter().find(|(k, _)| k == n) {
            Some((_, why)) if !o.pass => println!("criterion {n:>2}: known red: {why}"),
            Some(_) => unexpected.push(format!("criterion {n} passed but is listed as a known red")),
            None if !o.pass => unexpected.push(format!("criterion {n} failed")),
            None => {}
        }
    }
    let passed = results.iter().filter(|(_, o, _)| o.pass).count();
    println!("acceptance: {passed}/{} criteria pass", results.len());
    if !unexpected.is_empty() {
        for u in &unexpected {
            eprintln!("{u}");
        }
        std::process::exit(1);
    }
}
