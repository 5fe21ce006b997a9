//! End-to-end stages: each reads the configuration, composes the module
//! operations and writes its artifacts under one output directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, write_atomic, Checkpoint, Model};
use crate::config::{ExperimentConfig, StageSeeds};
use crate::cost;
use crate::error::{Result, SerError};
use crate::metrics;
use crate::par::Execution;
use crate::policy::{
    self, judge_win_rate, train_ppo, PerturbedReward, PolicyParams, PromptTable, RewardSource, WinRate,
};
use crate::reward_model::{self, RewardModelParams};
use crate::rng::derive_seed;
use crate::self_evolve::{self, run_ser, LoopState, SerInputs, SerRun};
use crate::theory::{
    self, check_assumptions, judge_sequence, LoopPoint, RegretRow, Theorem1Report, Theorem1Seed, Theorem2Report,
    Verdict,
};
use crate::world::{self, generate_world, make_splits, QuestionId, Splits, World};

/// World, splits and seeded configuration for one experiment seed.
pub struct Prepared {
    pub cfg: ExperimentConfig,
    pub seeds: StageSeeds,
    pub world: World,
    pub splits: Splits,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let cfg = cfg.seeded(cfg.seed);
    let mut world = generate_world(&cfg.world)?;
    let splits = make_splits(&world, &cfg.split)?;
    let mut prompts = splits.ppo_prompts.clone();
    prompts.extend(&splits.eval_prompts);
    world.ensure_candidates(&prompts, cfg.ppo.candidates)?;
    Ok(Prepared {
        seeds: StageSeeds::new(cfg.seed),
        cfg,
        world,
        splits,
    })
}

impl Prepared {
    pub fn ser_inputs(&self) -> SerInputs<'_> {
        SerInputs {
            store: &self.world,
            seed_labeled: &self.splits.seed_labeled,
            unlabeled: &self.splits.unlabeled,
            test: &self.splits.test,
        }
    }

    pub fn run_ser(&self) -> Result<SerRun> {
        run_ser(&self.ser_inputs(), &self.cfg.ser, &self.cfg.train, &self.cfg.ser_options)
    }

    /// Test accuracy of a model trained on the whole reward-model pool with
    /// noiseless labels, from the same initialization and schedule as loop 0.
    pub fn full_data_accuracy(&self) -> Result<f64> {
        let pool = self.splits.rm_pool_oracle_labeled(&self.world)?;
        let out = self_evolve::train_seed_model(&self.world, &pool, &self.cfg.train, &self.cfg.ser_options)?;
        reward_model::evaluate_accuracy(&out.params, &self.world, &self.splits.test)
    }

    pub fn ppo_table(&self) -> Result<PromptTable> {
        PromptTable::build(&self.world, &self.splits.ppo_prompts, self.cfg.ppo.features)
    }

    /// `eval.n_prompts` prompts, cycling through the held-out questions.
    pub fn eval_table(&self) -> Result<PromptTable> {
        let pool = &self.splits.eval_prompts;
        if pool.is_empty() {
            return Err(SerError::Config("no held-out questions for evaluation".into()));
        }
        let prompts: Vec<QuestionId> = (0..self.cfg.eval.n_prompts).map(|i| pool[i % pool.len()]).collect();
        PromptTable::build(&self.world, &prompts, self.cfg.ppo.features)
    }

    pub fn win_rate(&self, policy: &PolicyParams) -> Result<WinReport> {
        let table = self.eval_table()?;
        let trained = policy.distributions(&table)?;
        let uniform = policy::uniform_distributions(&table);
        let counts = judge_win_rate(&trained, &uniform, &table, self.seeds.judge, self.cfg.eval.tie_eps)?;
        Ok(WinReport {
            seed: self.cfg.seed,
            n_prompts: table.len(),
            result: counts.into(),
            win_minus_lose: counts.win as i64 - counts.lose as i64,
            expected_true_reward_policy: policy::expected_true_reward(&trained, &table),
            expected_true_reward_uniform: policy::expected_true_reward(&uniform, &table),
            expected_true_reward_optimal: policy::expected_true_reward(&policy::optimal_distributions(&table), &table),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WinReport {
    pub seed: u64,
    pub n_prompts: usize,
    #[serde(flatten)]
    pub result: WinRate,
    pub win_minus_lose: i64,
    pub expected_true_reward_policy: f64,
    pub expected_true_reward_uniform: f64,
    pub expected_true_reward_optimal: f64,
}

pub fn train_policy(p: &Prepared, reward: &dyn RewardSource) -> Result<(PromptTable, policy::PpoOutcome)> {
    let table = p.ppo_table()?;
    let out = train_ppo(&PolicyParams::uniform(&table), reward, &table, &p.cfg.ppo)?;
    Ok((table, out))
}

/// Seeds `cfg.seed, cfg.seed + 1, ...`.
pub fn seed_list(cfg: &ExperimentConfig, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| cfg.seed.wrapping_add(i)).collect()
}

fn with_seed(cfg: &ExperimentConfig, seed: u64) -> ExperimentConfig {
    ExperimentConfig { seed, ..cfg.clone() }
}

pub fn theorem1_seed(cfg: &ExperimentConfig, seed: u64) -> Result<Theorem1Seed> {
    let p = prepare(&with_seed(cfg, seed))?;
    let run = p.run_ser()?;
    theorem1_from_run(&p, &run)
}

pub fn theorem1_from_run(p: &Prepared, run: &SerRun) -> Result<Theorem1Seed> {
    let t = &p.cfg.theory;
    let test = &p.splits.test;
    let assumptions = check_assumptions(&run.snapshots[0], test, &p.world, t.delta_p, t.lipschitz_probes, p.seeds.probes)?;
    let mut loops = Vec::with_capacity(run.snapshots.len());
    for (rec, snap) in run.state.records.iter().zip(&run.snapshots) {
        let alpha = if rec.loop_index == 0 {
            assumptions.alpha_hat
        } else {
            check_assumptions(snap, test, &p.world, t.delta_p, 0, p.seeds.probes)?.alpha_hat
        };
        loops.push(LoopPoint {
            loop_index: rec.loop_index,
            accuracy: rec.test_accuracy,
            std_error: theory::eps_stat(rec.test_accuracy, test.len()) / 2.0,
            alpha_hat: alpha,
        });
    }
    let accs: Vec<f64> = loops.iter().map(|l| l.accuracy).collect();
    let (mut verdict, worst, tol, mut reason) = judge_sequence(&accs, test.len());
    let alpha_ok = |a: Option<f64>| a.is_some_and(|a| a > 0.5);
    if !(assumptions.acc0 > 0.5 && alpha_ok(assumptions.alpha_hat)) {
        verdict = Verdict::AssumptionsUnmet;
        reason = format!(
            "loop-0 accuracy {:.4} and confident-prediction accuracy {} must both exceed 0.5",
            assumptions.acc0,
            assumptions.alpha_hat.map_or("undefined".into(), |a| format!("{a:.4}"))
        );
    }
    Ok(Theorem1Seed {
        seed: p.cfg.seed,
        alpha_above_half_every_loop: loops.iter().all(|l| alpha_ok(l.alpha_hat)),
        assumptions,
        n_test: test.len(),
        loops,
        worst_drop: worst,
        worst_drop_tolerance: tol,
        verdict,
        reason,
    })
}

pub fn validate_theorem1(cfg: &ExperimentConfig, seeds: &[u64]) -> Result<Theorem1Report> {
    let per_seed = Execution::default()
        .map(seeds, |&s| theorem1_seed(cfg, s).map_err(|e| e.in_context(format!("seed {s}"))))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(Theorem1Report::assemble(per_seed, cfg.theory.theorem1_required))
}

/// Regret of PPO trained against the true reward plus bounded noise of size
/// `eps_r`. Every level reuses the same prompts and rollout stream.
pub fn regret_row(p: &Prepared, table: &PromptTable, eps_r: f64) -> Result<RegretRow> {
    let reward = PerturbedReward {
        world: &p.world,
        eps: eps_r,
        seed: p.seeds.perturb,
    };
    let out = train_ppo(&PolicyParams::uniform(table), &reward, table, &p.cfg.ppo)?;
    let j_policy = policy::expected_true_reward(&out.policy.distributions(table)?, table);
    let j_optimal = policy::expected_true_reward(&policy::optimal_distributions(table), table);
    let mut max_err: f64 = 0.0;
    for (i, cands) in table.candidates.iter().enumerate() {
        for (k, &a) in cands.iter().enumerate() {
            let q = table.prompts[i];
            max_err = max_err.max((reward.raw(q, a, &table.joint[i][k])? - table.quality[i][k]).abs());
        }
    }
    Ok(RegretRow {
        seed: p.cfg.seed,
        eps_r,
        j_optimal,
        j_policy,
        j_anti_optimal: policy::expected_true_reward(&policy::anti_optimal_distributions(table), table),
        regret: j_optimal - j_policy,
        max_abs_error: max_err,
    })
}

pub fn validate_theorem2(cfg: &ExperimentConfig, seeds: &[u64]) -> Result<Theorem2Report> {
    let exec = Execution::default();
    let prepared = exec
        .map(seeds, |&s| {
            let p = prepare(&with_seed(cfg, s))?;
            let n = p.cfg.theory.prompts.min(p.splits.ppo_prompts.len());
            let table = PromptTable::build(&p.world, &p.splits.ppo_prompts[..n], p.cfg.ppo.features)?;
            Ok((p, table))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(usize, f64)> = (0..prepared.len())
        .flat_map(|i| cfg.theory.eps_levels.iter().map(move |&e| (i, e)))
        .collect();
    let rows = exec
        .map(&jobs, |&(i, e)| {
            let (p, table) = &prepared[i];
            regret_row(p, table, e).map_err(|err| err.in_context(format!("seed {} eps_r {e}", p.cfg.seed)))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Theorem2Report::assemble(rows, cfg.theory.zero_regret_tolerance, cfg.theory.spearman_min)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TheoremSelect {
    One,
    Two,
    All,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Stage {
    GenData,
    TrainSeed,
    SerLoop,
    Ppo,
    EvalWinrate,
    ValidateTheorems { which: TheoremSelect, seeds: Option<usize> },
    CostModel,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::TrainSeed => "train-seed",
            Stage::SerLoop => "ser-loop",
            Stage::Ppo => "ppo",
            Stage::EvalWinrate => "eval-winrate",
            Stage::ValidateTheorems { .. } => "validate-theorems",
            Stage::CostModel => "cost-model",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Success,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub started_unix: u64,
    pub finished_unix: u64,
    /// Artifact name to path relative to the output directory.
    pub artifacts: BTreeMap<String, String>,
    pub status: RunStatus,
    pub error: Option<String>,
}

pub fn manifest_file(out: &Path, stage: &Stage) -> PathBuf {
    out.join("manifests").join(format!("{}.json", stage.name()))
}

/// Seconds since the epoch, or `SOURCE_DATE_EPOCH` when set.
pub fn now_unix() -> u64 {
    if let Some(v) = std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|v| v.parse().ok()) {
        return v;
    }
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

struct Artifacts<'a> {
    out: &'a Path,
    paths: BTreeMap<String, String>,
}

impl<'a> Artifacts<'a> {
    fn path(&mut self, name: &str, rel: &str) -> PathBuf {
        self.paths.insert(name.to_string(), rel.to_string());
        self.out.join(rel)
    }

    fn json<T: Serialize>(&mut self, name: &str, rel: &str, v: &T) -> Result<()> {
        let path = self.path(name, rel);
        let mut text = serde_json::to_string_pretty(v)?;
        text.push('\n');
        write_atomic(&path, text.as_bytes())
    }

    fn text(&mut self, name: &str, rel: &str, s: &str) -> Result<()> {
        let path = self.path(name, rel);
        write_atomic(&path, s.as_bytes())
    }
}

/// Runs one stage and writes its manifest, also when the stage fails.
pub fn run(stage: &Stage, cfg: &ExperimentConfig, out: &Path, clock: fn() -> u64) -> Result<RunManifest> {
    let started = clock();
    let mut arts = Artifacts {
        out,
        paths: BTreeMap::new(),
    };
    let result = cfg.validate().and_then(|_| run_stage(stage, cfg, &mut arts));
    let manifest = RunManifest {
        command: stage.name().to_string(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: cfg.hash()?,
        seed: cfg.seed,
        started_unix: started,
        finished_unix: clock(),
        artifacts: arts.paths,
        status: if result.is_ok() { RunStatus::Success } else { RunStatus::Failed },
        error: result.as_ref().err().map(|e| e.to_string()),
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    write_atomic(&manifest_file(out, stage), text.as_bytes())?;
    result.map(|_| manifest)
}

const CONFIG_FILE: &str = "config.toml";

/// Refuses to build on artifacts that were produced under another config.
fn check_same_config(out: &Path, cfg: &ExperimentConfig) -> Result<()> {
    let path = out.join(CONFIG_FILE);
    match std::fs::read_to_string(&path) {
        Ok(prev) if prev != cfg.to_toml()? => Err(SerError::Config(format!(
            "{} holds artifacts from a different configuration; use a fresh --out",
            out.display()
        ))),
        Ok(_) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
        Err(e) => Err(SerError::io(&path, e)),
    }
}

fn rm_checkpoint(params: &RewardModelParams, next_seed: u64) -> Checkpoint {
    Checkpoint {
        model: Model::Reward(params.clone()),
        rng_state: next_seed,
    }
}

fn run_stage(stage: &Stage, cfg: &ExperimentConfig, arts: &mut Artifacts<'_>) -> Result<()> {
    let out = arts.out;
    if matches!(stage, Stage::CostModel) {
        let table = cost::cost_table(&cfg.cost)?;
        arts.json("cost_json", "cost/cost.json", &table)?;
        arts.text("cost_text", "cost/cost.txt", &table.to_text())?;
        return Ok(());
    }
    if let Stage::ValidateTheorems { which, seeds } = stage {
        let seeds = seed_list(cfg, seeds.unwrap_or(cfg.theory.seeds));
        if matches!(which, TheoremSelect::One | TheoremSelect::All) {
            let r = validate_theorem1(cfg, &seeds)?;
            arts.json("theorem1_json", "theory/theorem1.json", &r)?;
            arts.text("theorem1_text", "theory/theorem1.txt", &r.to_text())?;
            r.to_table().write(&arts.path("theorem1_csv", "theory/theorem1.csv"))?;
        }
        if matches!(which, TheoremSelect::Two | TheoremSelect::All) {
            let r = validate_theorem2(cfg, &seeds)?;
            arts.json("theorem2_json", "theory/theorem2.json", &r)?;
            arts.text("theorem2_text", "theory/theorem2.txt", &r.to_text())?;
            r.to_table().write(&arts.path("theorem2_csv", "theory/theorem2.csv"))?;
        }
        return Ok(());
    }

    check_same_config(out, cfg)?;
    let p = prepare(cfg)?;
    match stage {
        Stage::GenData => gen_data(&p, arts)?,
        Stage::TrainSeed => {
            let o = self_evolve::train_seed_model(&p.world, &p.splits.seed_labeled, &p.cfg.train, &p.cfg.ser_options)?;
            let acc = reward_model::evaluate_accuracy(&o.params, &p.world, &p.splits.test)?;
            let next = self_evolve::loop_hyper(&p.cfg.train, 1).rng_seed;
            checkpoint::save_checkpoint(&arts.path("rm_seed", "checkpoints/rm_seed.ckpt"), &rm_checkpoint(&o.params, next))?;
            arts.json(
                "seed_report",
                "seed/report.json",
                &SeedReport {
                    seed_pairs: p.splits.seed_labeled.len(),
                    test_pairs: p.splits.test.len(),
                    initial_loss: o.initial_loss,
                    final_loss: o.final_loss,
                    loss_increased: o.loss_increased,
                    steps: o.steps,
                    test_accuracy: acc,
                },
            )?;
        }
        Stage::SerLoop => {
            ser_loop(&p, arts)?;
        }
        Stage::Ppo => {
            ppo(&p, arts)?;
        }
        Stage::EvalWinrate => {
            let policy = match load_policy(out, &p)? {
                Some(pol) => pol,
                None => ppo(&p, arts)?,
            };
            let report = p.win_rate(&policy)?;
            arts.json("winrate", "eval/winrate.json", &report)?;
        }
        Stage::ValidateTheorems { .. } | Stage::CostModel => unreachable!("handled above"),
    }
    arts.text("config", CONFIG_FILE, &cfg.to_toml()?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed_pairs: usize,
    pub test_pairs: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub loss_increased: bool,
    pub steps: usize,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub seed: u64,
    pub membership_hash: String,
    pub oracle_spec_hash: String,
    pub oracle: String,
    pub seed_labeled: usize,
    pub unlabeled: usize,
    pub test: usize,
    pub ppo_prompts: Vec<QuestionId>,
    pub eval_prompts: Vec<QuestionId>,
}

fn gen_data(p: &Prepared, arts: &mut Artifacts<'_>) -> Result<()> {
    let oracle_hash = p.world.oracle.hash();
    for (name, pool) in [
        ("seed_labeled", &p.splits.seed_labeled),
        ("unlabeled", &p.splits.unlabeled),
        ("test", &p.splits.test),
    ] {
        let rel = format!("data/{name}.jsonl");
        let path = arts.path(name, &rel);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| SerError::io(dir, e))?;
        }
        world::export_jsonl(&path, &p.world, pool, Some(p.cfg.seed), Some(oracle_hash.clone()))?;
        arts.paths.insert(format!("{name}_manifest"), format!("{rel}.manifest.json"));
    }
    arts.json(
        "splits",
        "data/splits.json",
        &SplitSummary {
            seed: p.cfg.seed,
            membership_hash: p.splits.membership_hash(),
            oracle_spec_hash: oracle_hash,
            oracle: p.world.oracle.describe(),
            seed_labeled: p.splits.seed_labeled.len(),
            unlabeled: p.splits.unlabeled.len(),
            test: p.splits.test.len(),
            ppo_prompts: p.splits.ppo_prompts.clone(),
            eval_prompts: p.splits.eval_prompts.clone(),
        },
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SerSummary {
    pub seed: u64,
    pub loops: usize,
    pub statuses: Vec<String>,
    pub termination: self_evolve::Termination,
    pub loop0_accuracy: f64,
    pub final_accuracy: f64,
    pub unlabeled_pool: usize,
    pub cumulative_filtered: usize,
}

impl SerSummary {
    pub fn new(seed: u64, state: &LoopState, unlabeled_pool: usize) -> Self {
        let accs = state.accuracies();
        SerSummary {
            seed,
            loops: state.records.len(),
            statuses: state.status_sequence().iter().map(|s| s.to_string()).collect(),
            termination: state.termination,
            loop0_accuracy: accs.first().copied().unwrap_or(f64::NAN),
            final_accuracy: accs.last().copied().unwrap_or(f64::NAN),
            unlabeled_pool,
            cumulative_filtered: state.cumulative_filtered.len(),
        }
    }
}

fn ser_loop(p: &Prepared, arts: &mut Artifacts<'_>) -> Result<RewardModelParams> {
    let run = p.run_ser()?;
    metrics::loop_table(&run.state.records).write(&arts.path("loop_metrics", "ser/loop_metrics.csv"))?;
    arts.json("ser_summary", "ser/summary.json", &SerSummary::new(p.cfg.seed, &run.state, p.splits.unlabeled.len()))?;
    for (i, snap) in run.snapshots.iter().enumerate() {
        let next = self_evolve::loop_hyper(&p.cfg.train, i + 1).rng_seed;
        let rel = format!("checkpoints/rm_loop{i}.ckpt");
        checkpoint::save_checkpoint(&arts.path(&format!("rm_loop{i}"), &rel), &rm_checkpoint(snap, next))?;
    }
    let next = self_evolve::loop_hyper(&p.cfg.train, run.snapshots.len()).rng_seed;
    checkpoint::save_checkpoint(&arts.path("rm_final", "checkpoints/rm_final.ckpt"), &rm_checkpoint(&run.params, next))?;
    Ok(run.params)
}

fn load_if_present(path: &Path, dim: usize) -> Result<Option<Checkpoint>> {
    if !path.exists() {
        return Ok(None);
    }
    Ok(Some(checkpoint::load_checkpoint(path)?.expect_dim(dim)?))
}

fn ppo(p: &Prepared, arts: &mut Artifacts<'_>) -> Result<PolicyParams> {
    let rm = match load_if_present(&arts.out.join("checkpoints/rm_final.ckpt"), p.world.dim)? {
        Some(ck) => ck.into_reward_model()?,
        None => ser_loop(p, arts)?,
    };
    let (table, out) = train_policy(p, &rm)?;
    metrics::curve_table(&out.curve).write(&arts.path("learning_curve", "ppo/learning_curve.csv"))?;
    let ck = Checkpoint {
        model: Model::Policy(out.policy.clone()),
        rng_state: derive_seed(p.cfg.ppo.rng_seed, "ppo-rollout", (p.cfg.ppo.steps * p.cfg.ppo.batch_size) as u64),
    };
    checkpoint::save_checkpoint(&arts.path("policy", "checkpoints/policy.ckpt"), &ck)?;
    let dists = out.policy.distributions(&table)?;
    arts.json(
        "ppo_summary",
        "ppo/summary.json",
        &PpoSummary {
            seed: p.cfg.seed,
            prompts: table.len(),
            steps: out.curve.len(),
            expected_true_reward_policy: policy::expected_true_reward(&dists, &table),
            expected_true_reward_uniform: policy::expected_true_reward(&policy::uniform_distributions(&table), &table),
            expected_true_reward_optimal: policy::expected_true_reward(&policy::optimal_distributions(&table), &table),
        },
    )?;
    Ok(out.policy)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpoSummary {
    pub seed: u64,
    pub prompts: usize,
    pub steps: usize,
    pub expected_true_reward_policy: f64,
    pub expected_true_reward_uniform: f64,
    pub expected_true_reward_optimal: f64,
}

fn load_policy(out: &Path, p: &Prepared) -> Result<Option<PolicyParams>> {
    load_if_present(&out.join("checkpoints/policy.ckpt"), p.world.dim)?
        .map(Checkpoint::into_policy)
        .transpose()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.world.n_questions = 300;
        c.world.dim = 4;
        c.ser.max_loops = 3;
        c.ppo.steps = 20;
        c.eval.n_prompts = 50;
        c.theory.seeds = 2;
        c.theory.lipschitz_probes = 20;
        c.theory.prompts = 8;
        c
    }

    fn clock() -> u64 {
        7
    }

    #[test]
    fn eval_winrate_runs_upstream_stages() {
        let dir = tempfile::tempdir().unwrap();
        let m = run(&Stage::EvalWinrate, &small(), dir.path(), clock).unwrap();
        assert_eq!(m.status, RunStatus::Success);
        for rel in m.artifacts.values() {
            assert!(dir.path().join(rel).exists(), "{rel}");
        }
        assert!(m.artifacts.contains_key("rm_final"));
        assert!(manifest_file(dir.path(), &Stage::EvalWinrate).exists());
    }

    #[test]
    fn other_config_in_same_dir_refused() {
        let dir = tempfile::tempdir().unwrap();
        run(&Stage::GenData, &small(), dir.path(), clock).unwrap();
        let other = ExperimentConfig { seed: 1, ..small() };
        let err = run(&Stage::GenData, &other, dir.path(), clock).unwrap_err();
        assert!(matches!(err, SerError::Config(_)));
        let m: RunManifest =
            serde_json::from_str(&std::fs::read_to_string(manifest_file(dir.path(), &Stage::GenData)).unwrap()).unwrap();
        assert_eq!(m.status, RunStatus::Failed);
        assert!(m.error.is_some());
    }

    #[test]
    fn theorem_reports_written() {
        let dir = tempfile::tempdir().unwrap();
        let stage = Stage::ValidateTheorems {
            which: TheoremSelect::All,
            seeds: None,
        };
        let m = run(&stage, &small(), dir.path(), clock).unwrap();
        let t1: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join(&m.artifacts["theorem1_json"])).unwrap())
                .unwrap();
        assert!(t1.get("verdict").is_some());
        assert_eq!(t1["seeds"].as_array().unwrap().len(), 2);
        assert!(dir.path().join(&m.artifacts["theorem2_csv"]).exists());
    }

    #[test]
    fn seed_list_counts_up() {
        assert_eq!(seed_list(&small(), 3), vec![42, 43, 44]);
    }
}
