//! The self-evolving reward loop: self-label the unlabeled pool, read off the
//! model's learning status, keep the confident pairs, retrain, repeat until no
//! status can be declared.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SerError};
use crate::par::Execution;
use crate::reward_model::{self, OrderedPair, RewardModelParams, TrainHyper};
use crate::rng;
use crate::world::{FeatureStore, Label, PairKey, PreferencePair, Source};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SerThresholds {
    pub tau_high: f64,
    pub tau_low: f64,
    pub tau_delta: f64,
    /// Status-2 filter bound δ (strict).
    pub delta_filter: f64,
    /// Absolute qualifying count needed to declare a status.
    pub n_min: usize,
    /// When positive, overrides `n_min` with this share of the unlabeled pool.
    pub n_min_fraction: f64,
    pub max_loops: usize,
}

impl Default for SerThresholds {
    fn default() -> Self {
        Self {
            tau_high: 0.55,
            tau_low: 0.45,
            tau_delta: 0.3,
            delta_filter: 0.3,
            n_min: 600,
            n_min_fraction: Self::HH_N_MIN_FRACTION,
            max_loops: 8,
        }
    }
}

impl SerThresholds {
    /// A 600-pair threshold on a ~43k-pair pool, as a share.
    pub const HH_N_MIN_FRACTION: f64 = 600.0 / 43_000.0;

    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.tau_low && self.tau_low < self.tau_high && self.tau_high <= 1.0) {
            return Err(SerError::Config(format!(
                "ser thresholds need 0 <= tau_low < tau_high <= 1, got {} / {}",
                self.tau_low, self.tau_high
            )));
        }
        if !(self.tau_delta > 0.0 && self.tau_delta < 1.0) {
            return Err(SerError::Config(format!(
                "ser.tau_delta must be in (0,1), got {}",
                self.tau_delta
            )));
        }
        if !(self.delta_filter > 0.0 && self.delta_filter < 1.0) {
            return Err(SerError::Config(format!(
                "ser.delta_filter must be in (0,1), got {}",
                self.delta_filter
            )));
        }
        if self.n_min == 0 {
            return Err(SerError::Config("ser.n_min must be >= 1".into()));
        }
        let f = self.n_min_fraction;
        if !(0.0..=1.0).contains(&f) {
            return Err(SerError::Config(format!(
                "ser.n_min_fraction must be in [0,1], got {f}"
            )));
        }
        Ok(())
    }

    pub fn effective_n_min(&self, pool_len: usize) -> usize {
        if self.n_min_fraction > 0.0 {
            ((self.n_min_fraction * pool_len as f64).round() as usize).max(1)
        } else {
            self.n_min
        }
    }

    pub fn meets_status1(&self, p1: f64, p2: f64) -> bool {
        (p1 > self.tau_high && p2 < self.tau_low) || (p1 < self.tau_low && p2 > self.tau_high)
    }

    /// Status-2 counting condition (inclusive bound, Status-1 pairs excluded).
    pub fn meets_status2(&self, p1: f64, p2: f64) -> bool {
        !self.meets_status1(p1, p2) && (p1 - p2).abs() >= self.tau_delta
    }

    /// Status-2 filter condition (strict bound on δ, Status-1 pairs excluded).
    pub fn passes_status2_filter(&self, p1: f64, p2: f64) -> bool {
        !self.meets_status1(p1, p2) && (p1 - p2).abs() > self.delta_filter
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LearningStatus {
    Status1,
    Status2,
    Stop,
}

impl fmt::Display for LearningStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LearningStatus::Status1 => "status1",
            LearningStatus::Status2 => "status2",
            LearningStatus::Stop => "stop",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub pair: PreferencePair,
    pub p1: f64,
    pub p2: f64,
    pub delta: f64,
}

impl ScoredPair {
    pub fn key(&self) -> PairKey {
        canonical_key(&self.pair)
    }
}

pub type ScoredPool = Vec<ScoredPair>;

/// Orientation-independent identity; selected pairs are stored chosen-first.
pub fn canonical_key(p: &PreferencePair) -> PairKey {
    let (a, b) = if p.answer_1_id <= p.answer_2_id {
        (p.answer_1_id, p.answer_2_id)
    } else {
        (p.answer_2_id, p.answer_1_id)
    };
    (p.question_id, a, b)
}

/// Scores both answers of every pair with the current model, in pool order.
pub fn self_label(
    params: &RewardModelParams,
    store: &dyn FeatureStore,
    pool: &[PreferencePair],
    exec: Execution,
) -> Result<ScoredPool> {
    if let Some(p) = pool.iter().find(|p| p.label != Label::Unlabeled) {
        return Err(SerError::Argument(format!(
            "self-labeling expects unlabeled pairs, {} is labeled",
            p.question_id
        )));
    }
    if store.dim() != params.dim {
        return Err(SerError::Shape {
            expected: params.dim,
            got: store.dim(),
        });
    }
    exec.map(pool, |p| {
        let x1 = store.joint_input(p.question_id, p.answer_1_id)?;
        let x2 = store.joint_input(p.question_id, p.answer_2_id)?;
        params.check_input(&x1)?;
        params.check_input(&x2)?;
        let p1 = params.prob(&x1);
        let p2 = params.prob(&x2);
        Ok(ScoredPair {
            pair: PreferencePair {
                scores: Some((p1, p2)),
                ..p.clone()
            },
            p1,
            p2,
            delta: (p1 - p2).abs(),
        })
    })
    .into_iter()
    .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusReport {
    pub status: LearningStatus,
    pub status1_count: usize,
    pub status2_count: usize,
    pub n_min: usize,
}

pub fn identify_status(scored: &[ScoredPair], th: &SerThresholds, exclude: &BTreeSet<PairKey>) -> StatusReport {
    let mut s1 = 0;
    let mut s2 = 0;
    for sp in scored.iter().filter(|sp| !exclude.contains(&sp.key())) {
        if th.meets_status1(sp.p1, sp.p2) {
            s1 += 1;
        } else if sp.delta >= th.tau_delta {
            s2 += 1;
        }
    }
    let n_min = th.effective_n_min(scored.len());
    let status = if s1 >= n_min {
        LearningStatus::Status1
    } else if s2 >= n_min {
        LearningStatus::Status2
    } else {
        LearningStatus::Stop
    };
    StatusReport {
        status,
        status1_count: s1,
        status2_count: s2,
        n_min,
    }
}

/// Selects the pairs the status admits, stored chosen-first as self labels.
pub fn filter_data(
    scored: &[ScoredPair],
    status: LearningStatus,
    th: &SerThresholds,
    exclude: &BTreeSet<PairKey>,
) -> Vec<PreferencePair> {
    let admit = |sp: &ScoredPair| match status {
        LearningStatus::Status1 => th.meets_status1(sp.p1, sp.p2),
        LearningStatus::Status2 => th.passes_status2_filter(sp.p1, sp.p2),
        LearningStatus::Stop => false,
    };
    scored
        .iter()
        .filter(|sp| !exclude.contains(&sp.key()) && admit(sp))
        .map(|sp| {
            let p = &sp.pair;
            let (a1, a2, s) = if sp.p1 >= sp.p2 {
                (p.answer_1_id, p.answer_2_id, (sp.p1, sp.p2))
            } else {
                (p.answer_2_id, p.answer_1_id, (sp.p2, sp.p1))
            };
            PreferencePair {
                question_id: p.question_id,
                answer_1_id: a1,
                answer_2_id: a2,
                label: Label::Chosen1,
                source: Some(Source::SelfLabel),
                scores: Some(s),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SerOptions {
    pub hidden: usize,
    /// Keep the human seed pairs in every retraining set.
    pub include_seed: bool,
    /// Re-initialize the model before each retraining instead of continuing.
    pub fresh_init: bool,
}

impl Default for SerOptions {
    fn default() -> Self {
        Self {
            hidden: 32,
            include_seed: true,
            fresh_init: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopRecord {
    pub loop_index: usize,
    /// `None` for the seed warm-up. A `Stop` record repeats the previous metrics.
    pub status: Option<LearningStatus>,
    pub status1_count: usize,
    pub status2_count: usize,
    pub new_filtered: usize,
    pub cumulative_filtered: usize,
    pub train_loss: f64,
    pub test_accuracy: f64,
    /// Pairs added this loop, chosen-first, with the scores that admitted them.
    pub new_pairs: Vec<PreferencePair>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Stop,
    MaxLoops,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopState {
    pub records: Vec<LoopRecord>,
    pub cumulative_filtered: Vec<PreferencePair>,
    pub termination: Termination,
}

impl LoopState {
    /// Statuses of loops 1.., ending in Stop unless the loop budget ran out.
    pub fn status_sequence(&self) -> Vec<LearningStatus> {
        self.records.iter().filter_map(|r| r.status).collect()
    }

    pub fn accuracies(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.test_accuracy).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SerRun {
    pub params: RewardModelParams,
    pub state: LoopState,
    /// Model after each loop, aligned with `state.records`.
    pub snapshots: Vec<RewardModelParams>,
}

pub struct SerInputs<'a> {
    pub store: &'a dyn FeatureStore,
    pub seed_labeled: &'a [PreferencePair],
    pub unlabeled: &'a [PreferencePair],
    pub test: &'a [PreferencePair],
}

/// Training hyperparameters for loop `n`: same settings, own shuffle stream.
pub fn loop_hyper(hyper: &TrainHyper, n: usize) -> TrainHyper {
    TrainHyper {
        rng_seed: rng::derive_seed(hyper.rng_seed, "ser-loop", n as u64),
        ..hyper.clone()
    }
}

/// The initial model every run starts from.
pub fn initial_params(dim: usize, hyper: &TrainHyper, opts: &SerOptions) -> RewardModelParams {
    RewardModelParams::random(dim, opts.hidden, hyper.rng_seed)
}

/// Loop 0 on its own: the seed model trained on the human-labeled pairs only.
pub fn train_seed_model(
    store: &dyn FeatureStore,
    seed_labeled: &[PreferencePair],
    hyper: &TrainHyper,
    opts: &SerOptions,
) -> Result<reward_model::TrainOutcome> {
    if seed_labeled.is_empty() {
        return Err(SerError::Config("seed-labeled set is empty".into()));
    }
    if opts.hidden == 0 {
        return Err(SerError::Config("ser_options.hidden must be >= 1".into()));
    }
    let data = reward_model::ordered_pairs(store, seed_labeled)?;
    let init = initial_params(store.dim(), hyper, opts);
    reward_model::train(&init, &data, &loop_hyper(hyper, 0)).map_err(|e| e.in_context("loop 0"))
}

pub fn run_ser(
    inputs: &SerInputs<'_>,
    th: &SerThresholds,
    hyper: &TrainHyper,
    opts: &SerOptions,
) -> Result<SerRun> {
    th.validate()?;
    hyper.validate()?;
    let exec = Execution::default();
    let store = inputs.store;
    let warm = train_seed_model(store, inputs.seed_labeled, hyper, opts)?;
    let seed_pairs = reward_model::ordered_pairs(store, inputs.seed_labeled)?;
    let test_pairs = reward_model::ordered_pairs(store, inputs.test)?;
    let init = initial_params(store.dim(), hyper, opts);
    let loop_hyper = |n: usize| loop_hyper(hyper, n);

    let mut params = warm.params;
    let mut records = vec![LoopRecord {
        loop_index: 0,
        status: None,
        status1_count: 0,
        status2_count: 0,
        new_filtered: 0,
        cumulative_filtered: 0,
        train_loss: warm.final_loss,
        test_accuracy: reward_model::accuracy_ordered(&params, &test_pairs, exec),
        new_pairs: Vec::new(),
    }];
    let mut snapshots = vec![params.clone()];
    let mut selected: BTreeSet<PairKey> = BTreeSet::new();
    let mut cumulative: Vec<PreferencePair> = Vec::new();
    let mut cumulative_ordered: Vec<OrderedPair> = Vec::new();
    let mut termination = Termination::MaxLoops;

    for n in 1..=th.max_loops {
        let scored = self_label(&params, store, inputs.unlabeled, exec)?;
        let report = identify_status(&scored, th, &selected);
        if report.status == LearningStatus::Stop {
            let last = records.last().expect("warm-up record");
            let (train_loss, test_accuracy) = (last.train_loss, last.test_accuracy);
            records.push(LoopRecord {
                loop_index: n,
                status: Some(LearningStatus::Stop),
                status1_count: report.status1_count,
                status2_count: report.status2_count,
                new_filtered: 0,
                cumulative_filtered: cumulative.len(),
                train_loss,
                test_accuracy,
                new_pairs: Vec::new(),
            });
            snapshots.push(params.clone());
            termination = Termination::Stop;
            break;
        }
        let fresh = filter_data(&scored, report.status, th, &selected);
        for p in &fresh {
            selected.insert(canonical_key(p));
        }
        cumulative_ordered.extend(reward_model::ordered_pairs(store, &fresh)?);
        cumulative.extend(fresh.iter().cloned());

        let mut data = Vec::with_capacity(seed_pairs.len() + cumulative_ordered.len());
        if opts.include_seed {
            data.extend(seed_pairs.iter().cloned());
        }
        data.extend(cumulative_ordered.iter().cloned());
        let start = if opts.fresh_init { &init } else { &params };
        let out = reward_model::train(start, &data, &loop_hyper(n)).map_err(|e| e.in_context(format!("loop {n}")))?;
        params = out.params;
        records.push(LoopRecord {
            loop_index: n,
            status: Some(report.status),
            status1_count: report.status1_count,
            status2_count: report.status2_count,
            new_filtered: fresh.len(),
            cumulative_filtered: cumulative.len(),
            train_loss: out.final_loss,
            test_accuracy: reward_model::accuracy_ordered(&params, &test_pairs, exec),
            new_pairs: fresh,
        });
        snapshots.push(params.clone());
    }

    Ok(SerRun {
        params,
        state: LoopState {
            records,
            cumulative_filtered: cumulative,
            termination,
        },
        snapshots,
    })
}
