//! Synthetic preference world with a hidden ground-truth quality function.
//!
//! Every question carries a context vector and a handful of candidate answers.
//! Answer quality comes from a fixed random scorer (the oracle) drawn once from
//! the world seed. Learners only ever see feature vectors; the oracle is used to
//! simulate annotators and to judge policies.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, SerError};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct QuestionId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AnswerId(pub u32);

impl fmt::Display for QuestionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "q{}", self.0)
    }
}

impl fmt::Display for AnswerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "a{}", self.0)
    }
}

/// Read access to feature vectors, shared by generated worlds and imported data.
pub trait FeatureStore: Sync {
    fn dim(&self) -> usize;
    fn context(&self, q: QuestionId) -> Result<&[f64]>;
    fn answer(&self, q: QuestionId, a: AnswerId) -> Result<&[f64]>;

    /// Concatenated `context ⊕ answer` input of the reward model.
    fn joint_input(&self, q: QuestionId, a: AnswerId) -> Result<Vec<f64>> {
        let mut x = Vec::with_capacity(2 * self.dim());
        x.extend_from_slice(self.context(q)?);
        x.extend_from_slice(self.answer(q, a)?);
        Ok(x)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub dim: usize,
    pub n_questions: usize,
    pub answers_per_question: usize,
    /// Hidden width of the oracle scorer.
    pub oracle_hidden: usize,
    /// Weight of the context-dependent nonlinear term relative to the linear answer term.
    pub oracle_nonlinear_weight: f64,
    /// Scale of the oracle's hidden pre-activations; larger values make the
    /// nonlinear term closer to a sum of sign functions.
    pub oracle_sharpness: f64,
    /// Answers are drawn as `z + s·κ·û` with `s = ±1` equiprobable, `z` standard
    /// normal and `û` the oracle's unit linear direction. `κ = 0` gives plain
    /// i.i.d. standard-normal answers.
    pub cluster_separation: f64,
    /// Rescale `g*` to unit standard deviation under the feature distribution,
    /// so reward errors are measured in units of the reward's spread.
    pub standardize_oracle: bool,
    /// Derived from the experiment seed; not read from config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            // 0.65 * 3077 rounds to a 2000-question reward-model pool.
            n_questions: 3077,
            answers_per_question: 2,
            oracle_hidden: 32,
            oracle_nonlinear_weight: 1.0,
            oracle_sharpness: 3.0,
            cluster_separation: 3.0,
            standardize_oracle: true,
            seed: 42,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(SerError::Config("world.dim must be >= 1".into()));
        }
        if self.n_questions == 0 {
            return Err(SerError::Config("world.n_questions must be >= 1".into()));
        }
        if self.answers_per_question < 2 {
            return Err(SerError::Config(
                "world.answers_per_question must be >= 2".into(),
            ));
        }
        if self.oracle_hidden == 0 {
            return Err(SerError::Config("world.oracle_hidden must be >= 1".into()));
        }
        if !self.oracle_nonlinear_weight.is_finite() || self.oracle_nonlinear_weight < 0.0 {
            return Err(SerError::Config(
                "world.oracle_nonlinear_weight must be finite and >= 0".into(),
            ));
        }
        if !(self.oracle_sharpness.is_finite() && self.oracle_sharpness > 0.0) {
            return Err(SerError::Config("world.oracle_sharpness must be > 0".into()));
        }
        if !self.cluster_separation.is_finite() || self.cluster_separation < 0.0 {
            return Err(SerError::Config(
                "world.cluster_separation must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// The hidden quality function
/// `g*(c, a) = u·a + β · v·tanh(W [c; a])`.
///
/// No biases anywhere, so `g*` is odd in `(c, a)`; with symmetric feature
/// sampling its mean is exactly zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSpec {
    pub dim: usize,
    pub hidden: usize,
    pub nonlinear_weight: f64,
    /// `dim` weights on the answer features.
    pub linear: Vec<f64>,
    /// `hidden × 2·dim`, row-major.
    pub hidden_weights: Vec<f64>,
    pub output_weights: Vec<f64>,
    /// Multiplies the whole score.
    pub output_scale: f64,
}

/// Probe pairs used to estimate the spread of `g*`.
pub const SCALE_PROBES: usize = 4096;

impl OracleSpec {
    fn sample(cfg: &WorldConfig) -> Self {
        let d = cfg.dim;
        let h = cfg.oracle_hidden;
        let mut r = rng::stream(cfg.seed, "oracle", 0);
        let lin_scale = (1.0 / d as f64).sqrt();
        let hid_scale = cfg.oracle_sharpness * (1.0 / (2 * d) as f64).sqrt();
        let out_scale = (1.0 / h as f64).sqrt();
        let linear = (0..d)
            .map(|_| lin_scale * r.sample::<f64, _>(StandardNormal))
            .collect();
        let hidden_weights = (0..h * 2 * d)
            .map(|_| hid_scale * r.sample::<f64, _>(StandardNormal))
            .collect();
        let output_weights = (0..h)
            .map(|_| out_scale * r.sample::<f64, _>(StandardNormal))
            .collect();
        let mut spec = Self {
            dim: d,
            hidden: h,
            nonlinear_weight: cfg.oracle_nonlinear_weight,
            linear,
            hidden_weights,
            output_weights,
            output_scale: 1.0,
        };
        if cfg.standardize_oracle {
            let mut r = rng::stream(cfg.seed, "oracle-scale", 0);
            let g: Vec<f64> = (0..SCALE_PROBES)
                .map(|_| {
                    let c = normal_vec(&mut r, d);
                    let a = sample_answer(&mut r, &spec, cfg.cluster_separation);
                    spec.quality(&c, &a)
                })
                .collect();
            let mean = g.iter().sum::<f64>() / g.len() as f64;
            let sd = (g.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / g.len() as f64).sqrt();
            if sd > 0.0 {
                spec.output_scale = 1.0 / sd;
            }
        }
        spec
    }

    pub fn quality(&self, context: &[f64], answer: &[f64]) -> f64 {
        let d = self.dim;
        let lin: f64 = self.linear.iter().zip(answer).map(|(w, x)| w * x).sum();
        let mut nl = 0.0;
        for j in 0..self.hidden {
            let row = &self.hidden_weights[j * 2 * d..(j + 1) * 2 * d];
            let pre: f64 = row[..d].iter().zip(context).map(|(w, x)| w * x).sum::<f64>()
                + row[d..].iter().zip(answer).map(|(w, x)| w * x).sum::<f64>();
            nl += self.output_weights[j] * pre.tanh();
        }
        self.output_scale * (lin + self.nonlinear_weight * nl)
    }

    /// Closed-form mean of the quality under the world's feature distribution.
    /// Contexts and answers are both symmetric under negation and `g*` is odd.
    pub fn analytic_mean(&self) -> f64 {
        0.0
    }

    pub fn describe(&self) -> String {
        format!(
            "g*(c,a) = {} * (u.a + {} * v.tanh(W[c;a])); d={}, hidden={}, no biases",
            self.output_scale, self.nonlinear_weight, self.dim, self.hidden
        )
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.dim as u64).to_le_bytes());
        h.update((self.hidden as u64).to_le_bytes());
        h.update(self.nonlinear_weight.to_le_bytes());
        h.update(self.output_scale.to_le_bytes());
        for w in self
            .linear
            .iter()
            .chain(&self.hidden_weights)
            .chain(&self.output_weights)
        {
            h.update(w.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Answer {
    pub id: AnswerId,
    pub features: Vec<f64>,
    pub true_quality: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub id: QuestionId,
    pub context: Vec<f64>,
    pub answers: Vec<Answer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub dim: usize,
    pub questions: Vec<Question>,
    pub oracle: OracleSpec,
    pub cluster_separation: f64,
    pub rng_seed: u64,
}

fn normal_vec(r: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.sample(StandardNormal)).collect()
}

/// Draws `z + s·κ·û`; consumes `dim + 1` values from the stream.
fn sample_answer(r: &mut impl Rng, oracle: &OracleSpec, kappa: f64) -> Vec<f64> {
    let side = if r.random::<bool>() { 1.0 } else { -1.0 };
    let mut z = normal_vec(r, oracle.dim);
    let norm = oracle.linear.iter().map(|w| w * w).sum::<f64>().sqrt();
    if kappa > 0.0 && norm > 0.0 {
        for (x, w) in z.iter_mut().zip(&oracle.linear) {
            *x += side * kappa * w / norm;
        }
    }
    z
}

fn has_spread(answers: &[Answer]) -> bool {
    let first = answers[0].true_quality;
    answers.iter().any(|a| a.true_quality != first)
}

pub fn generate_world(cfg: &WorldConfig) -> Result<World> {
    cfg.validate()?;
    let oracle = OracleSpec::sample(cfg);
    let d = cfg.dim;
    let questions = (0..cfg.n_questions)
        .map(|qi| {
            let mut attempt = 0u64;
            loop {
                let mut r = rng::stream(cfg.seed, "question", ((qi as u64) << 16) | attempt);
                let context = normal_vec(&mut r, d);
                let answers: Vec<Answer> = (0..cfg.answers_per_question)
                    .map(|ai| {
                        let features = sample_answer(&mut r, &oracle, cfg.cluster_separation);
                        let true_quality = oracle.quality(&context, &features);
                        Answer {
                            id: AnswerId(ai as u32),
                            features,
                            true_quality,
                        }
                    })
                    .collect();
                if has_spread(&answers) {
                    return Question {
                        id: QuestionId(qi as u32),
                        context,
                        answers,
                    };
                }
                attempt += 1;
            }
        })
        .collect();
    Ok(World {
        dim: d,
        questions,
        oracle,
        cluster_separation: cfg.cluster_separation,
        rng_seed: cfg.seed,
    })
}

impl World {
    pub fn question(&self, q: QuestionId) -> Result<&Question> {
        self.questions
            .get(q.0 as usize)
            .filter(|x| x.id == q)
            .ok_or_else(|| SerError::Lookup(format!("unknown question {q}")))
    }

    pub fn answer_record(&self, q: QuestionId, a: AnswerId) -> Result<&Answer> {
        self.question(q)?
            .answers
            .iter()
            .find(|x| x.id == a)
            .ok_or_else(|| SerError::Lookup(format!("unknown answer {a} of {q}")))
    }

    pub fn true_quality(&self, q: QuestionId, a: AnswerId) -> Result<f64> {
        Ok(self.answer_record(q, a)?.true_quality)
    }

    /// Gives each listed question at least `k` candidates. Extra candidates come
    /// from a per-question stream, so the result does not depend on call order.
    pub fn ensure_candidates(&mut self, questions: &[QuestionId], k: usize) -> Result<()> {
        for &q in questions {
            let idx = q.0 as usize;
            if self.questions.get(idx).map(|x| x.id) != Some(q) {
                return Err(SerError::Lookup(format!("unknown question {q}")));
            }
            let question = &mut self.questions[idx];
            let base = question.answers.len();
            if base >= k {
                continue;
            }
            let mut r = rng::stream(self.rng_seed, "extra-candidates", u64::from(q.0));
            // Replaying earlier draws keeps candidate n identical whatever `k`
            // was first requested.
            for _ in 2..base {
                sample_answer(&mut r, &self.oracle, self.cluster_separation);
            }
            for ai in base..k {
                let features = sample_answer(&mut r, &self.oracle, self.cluster_separation);
                let true_quality = self.oracle.quality(&question.context, &features);
                question.answers.push(Answer {
                    id: AnswerId(ai as u32),
                    features,
                    true_quality,
                });
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

impl FeatureStore for World {
    fn dim(&self) -> usize {
        self.dim
    }

    fn context(&self, q: QuestionId) -> Result<&[f64]> {
        Ok(&self.question(q)?.context)
    }

    fn answer(&self, q: QuestionId, a: AnswerId) -> Result<&[f64]> {
        Ok(&self.answer_record(q, a)?.features)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Chosen1,
    Chosen2,
    Unlabeled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    HumanSim,
    SelfLabel,
    Oracle,
}

/// Identity of a pair: the question and both answer ids in stored order.
pub type PairKey = (QuestionId, AnswerId, AnswerId);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub question_id: QuestionId,
    pub answer_1_id: AnswerId,
    pub answer_2_id: AnswerId,
    pub label: Label,
    /// `None` while no preference has been produced.
    pub source: Option<Source>,
    pub scores: Option<(f64, f64)>,
}

impl PreferencePair {
    pub fn unlabeled(q: QuestionId, a1: AnswerId, a2: AnswerId) -> Self {
        Self {
            question_id: q,
            answer_1_id: a1,
            answer_2_id: a2,
            label: Label::Unlabeled,
            source: None,
            scores: None,
        }
    }

    pub fn key(&self) -> PairKey {
        (self.question_id, self.answer_1_id, self.answer_2_id)
    }

    /// `(chosen, rejected)` answer ids, or `None` when unlabeled.
    pub fn ordered(&self) -> Option<(AnswerId, AnswerId)> {
        match self.label {
            Label::Chosen1 => Some((self.answer_1_id, self.answer_2_id)),
            Label::Chosen2 => Some((self.answer_2_id, self.answer_1_id)),
            Label::Unlabeled => None,
        }
    }

    /// Same pair with the answers stored in the opposite order.
    pub fn swapped(&self) -> Self {
        Self {
            question_id: self.question_id,
            answer_1_id: self.answer_2_id,
            answer_2_id: self.answer_1_id,
            label: match self.label {
                Label::Chosen1 => Label::Chosen2,
                Label::Chosen2 => Label::Chosen1,
                Label::Unlabeled => Label::Unlabeled,
            },
            source: self.source,
            scores: self.scores.map(|(a, b)| (b, a)),
        }
    }
}

/// Labels a pair from the true qualities, flipping with probability `noise_eta`.
/// `Source::Oracle` forces the noise to zero.
pub fn oracle_label(
    world: &World,
    pair: &PreferencePair,
    source: Source,
    noise_eta: f64,
    rng: &mut impl Rng,
) -> Result<PreferencePair> {
    if !(0.0..0.5).contains(&noise_eta) {
        return Err(SerError::Argument(format!(
            "noise_eta must be in [0, 0.5), got {noise_eta}"
        )));
    }
    if pair.answer_1_id == pair.answer_2_id {
        return Err(SerError::Input(format!(
            "pair on {} compares answer {} with itself",
            pair.question_id, pair.answer_1_id
        )));
    }
    let q1 = world.true_quality(pair.question_id, pair.answer_1_id)?;
    let q2 = world.true_quality(pair.question_id, pair.answer_2_id)?;
    let first_better = q1 >= q2;
    let eta = if source == Source::Oracle { 0.0 } else { noise_eta };
    let flip = eta > 0.0 && rng.random::<f64>() < eta;
    let label = if first_better != flip {
        Label::Chosen1
    } else {
        Label::Chosen2
    };
    Ok(PreferencePair {
        label,
        source: Some(source),
        scores: None,
        ..pair.clone()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    /// Share of questions outside any training stage. No supervised
    /// fine-tuning stage exists here, so this share is the held-out test pool
    /// and the win-rate evaluation prompts.
    pub sft_frac: f64,
    pub rm_frac: f64,
    pub ppo_frac: f64,
    pub seed_label_frac: f64,
    pub noise_eta: f64,
    /// Derived from the experiment seed; not read from config files.
    #[serde(skip)]
    pub rng_seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            sft_frac: 0.30,
            rm_frac: 0.65,
            ppo_frac: 0.05,
            seed_label_frac: 0.15,
            noise_eta: 0.1,
            rng_seed: 42,
        }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("split.sft_frac", self.sft_frac),
            ("split.rm_frac", self.rm_frac),
            ("split.ppo_frac", self.ppo_frac),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(SerError::Config(format!("{name} must be in [0,1], got {v}")));
            }
        }
        let sum = self.sft_frac + self.rm_frac + self.ppo_frac;
        if (sum - 1.0).abs() > 1e-12 {
            return Err(SerError::Config(format!(
                "split fractions must sum to 1, got {sum}"
            )));
        }
        if !(self.seed_label_frac > 0.0 && self.seed_label_frac <= 1.0) {
            return Err(SerError::Config(format!(
                "split.seed_label_frac must be in (0,1], got {}",
                self.seed_label_frac
            )));
        }
        if !(0.0..0.5).contains(&self.noise_eta) {
            return Err(SerError::Config(format!(
                "split.noise_eta must be in [0,0.5), got {}",
                self.noise_eta
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub seed_labeled: Vec<PreferencePair>,
    pub unlabeled: Vec<PreferencePair>,
    pub test: Vec<PreferencePair>,
    pub ppo_prompts: Vec<QuestionId>,
    /// Questions of the held-out share, reused as win-rate prompts.
    pub eval_prompts: Vec<QuestionId>,
}

impl Splits {
    /// SHA-256 over the membership of every pool, for determinism checks.
    pub fn membership_hash(&self) -> String {
        let mut h = Sha256::new();
        for (tag, pool) in [
            (0u8, &self.seed_labeled),
            (1, &self.unlabeled),
            (2, &self.test),
        ] {
            h.update([tag]);
            for p in pool {
                h.update(p.question_id.0.to_le_bytes());
                h.update(p.answer_1_id.0.to_le_bytes());
                h.update(p.answer_2_id.0.to_le_bytes());
                h.update([p.label as u8]);
            }
        }
        h.update([3u8]);
        for q in &self.ppo_prompts {
            h.update(q.0.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// The whole reward-model pool with noiseless labels, for the full-data baseline.
    pub fn rm_pool_oracle_labeled(&self, world: &World) -> Result<Vec<PreferencePair>> {
        let mut r = rng::stream(0, "unused", 0);
        self.seed_labeled
            .iter()
            .chain(&self.unlabeled)
            .map(|p| oracle_label(world, p, Source::Oracle, 0.0, &mut r))
            .collect()
    }
}

fn first_pair(q: &Question) -> PreferencePair {
    PreferencePair::unlabeled(q.id, q.answers[0].id, q.answers[1].id)
}

pub fn make_splits(world: &World, split: &SplitConfig) -> Result<Splits> {
    split.validate()?;
    let n = world.questions.len();
    if n == 0 {
        return Err(SerError::Config("world has no questions".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(split.rng_seed, "split", 0));

    let n_sft = (split.sft_frac * n as f64).round() as usize;
    let n_rm = ((split.rm_frac * n as f64).round() as usize).min(n - n_sft.min(n));
    let n_sft = n_sft.min(n);
    let n_ppo = n - n_sft - n_rm;
    if n_rm == 0 {
        return Err(SerError::Config("reward-model pool is empty after rounding".into()));
    }
    if n_sft == 0 {
        return Err(SerError::Config("held-out test pool is empty after rounding".into()));
    }
    if split.ppo_frac > 0.0 && n_ppo == 0 {
        return Err(SerError::Config("PPO prompt pool is empty after rounding".into()));
    }
    let n_seed = (split.seed_label_frac * n_rm as f64).round() as usize;
    if n_seed == 0 {
        return Err(SerError::Config("seed-labeled pool is empty after rounding".into()));
    }

    let sft_q = &order[..n_sft];
    let rm_q = &order[n_sft..n_sft + n_rm];
    let ppo_q = &order[n_sft + n_rm..];

    let mut human = rng::stream(split.rng_seed, "human-label", 0);
    let seed_labeled = rm_q[..n_seed]
        .iter()
        .map(|&qi| {
            oracle_label(
                world,
                &first_pair(&world.questions[qi]),
                Source::HumanSim,
                split.noise_eta,
                &mut human,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let unlabeled = rm_q[n_seed..]
        .iter()
        .map(|&qi| first_pair(&world.questions[qi]))
        .collect();
    let mut none = rng::stream(split.rng_seed, "oracle-label", 0);
    let test = sft_q
        .iter()
        .map(|&qi| {
            oracle_label(
                world,
                &first_pair(&world.questions[qi]),
                Source::Oracle,
                0.0,
                &mut none,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Splits {
        seed_labeled,
        unlabeled,
        test,
        ppo_prompts: ppo_q.iter().map(|&qi| world.questions[qi].id).collect(),
        eval_prompts: sft_q.iter().map(|&qi| world.questions[qi].id).collect(),
    })
}

// ---------------------------------------------------------------------------
// JSONL exchange format
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JsonAnswer {
    pub id: AnswerId,
    pub features: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JsonPair {
    pub question_id: QuestionId,
    pub context: Vec<f64>,
    pub answer_1: JsonAnswer,
    pub answer_2: JsonAnswer,
    pub label: Option<JsonLabel>,
    pub source: Option<Source>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JsonLabel {
    Chosen1,
    Chosen2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairCounts {
    pub pairs: usize,
    pub chosen1: usize,
    pub chosen2: usize,
    pub unlabeled: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JsonlManifest {
    pub dim: usize,
    pub counts: PairCounts,
    pub seed: Option<u64>,
    pub oracle_spec_hash: Option<String>,
}

fn to_json_pair(store: &dyn FeatureStore, p: &PreferencePair) -> Result<JsonPair> {
    Ok(JsonPair {
        question_id: p.question_id,
        context: store.context(p.question_id)?.to_vec(),
        answer_1: JsonAnswer {
            id: p.answer_1_id,
            features: store.answer(p.question_id, p.answer_1_id)?.to_vec(),
        },
        answer_2: JsonAnswer {
            id: p.answer_2_id,
            features: store.answer(p.question_id, p.answer_2_id)?.to_vec(),
        },
        label: match p.label {
            Label::Chosen1 => Some(JsonLabel::Chosen1),
            Label::Chosen2 => Some(JsonLabel::Chosen2),
            Label::Unlabeled => None,
        },
        source: p.source,
    })
}

fn counts(pairs: &[PreferencePair]) -> PairCounts {
    let c1 = pairs.iter().filter(|p| p.label == Label::Chosen1).count();
    let c2 = pairs.iter().filter(|p| p.label == Label::Chosen2).count();
    PairCounts {
        pairs: pairs.len(),
        chosen1: c1,
        chosen2: c2,
        unlabeled: pairs.len() - c1 - c2,
    }
}

/// Writes `pairs` as JSONL plus a `<path>.manifest.json` sidecar.
pub fn export_jsonl(
    path: &Path,
    store: &dyn FeatureStore,
    pairs: &[PreferencePair],
    seed: Option<u64>,
    oracle_spec_hash: Option<String>,
) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| SerError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for p in pairs {
        let line = serde_json::to_string(&to_json_pair(store, p)?)?;
        writeln!(w, "{line}").map_err(|e| SerError::io(path, e))?;
    }
    w.flush().map_err(|e| SerError::io(path, e))?;
    let manifest = JsonlManifest {
        dim: store.dim(),
        counts: counts(pairs),
        seed,
        oracle_spec_hash,
    };
    let mpath = manifest_path(path);
    std::fs::write(&mpath, serde_json::to_string_pretty(&manifest)?)
        .map_err(|e| SerError::io(&mpath, e))?;
    Ok(())
}

pub fn manifest_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.json");
    s.into()
}

/// Feature table built from imported pairs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairFeatureTable {
    dim: usize,
    questions: BTreeMap<QuestionId, (Vec<f64>, BTreeMap<AnswerId, Vec<f64>>)>,
}

impl PairFeatureTable {
    fn insert(&mut self, line: usize, jp: &JsonPair) -> Result<()> {
        let check = |v: &[f64], what: &str| -> Result<()> {
            if v.len() != self.dim {
                return Err(SerError::Input(format!(
                    "line {line}: {what} has {} features, expected {}",
                    v.len(),
                    self.dim
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(SerError::Input(format!("line {line}: non-finite {what}")));
            }
            Ok(())
        };
        check(&jp.context, "context")?;
        check(&jp.answer_1.features, "answer_1")?;
        check(&jp.answer_2.features, "answer_2")?;
        if jp.answer_1.id == jp.answer_2.id {
            return Err(SerError::Input(format!("line {line}: both answers share an id")));
        }
        let entry = self
            .questions
            .entry(jp.question_id)
            .or_insert_with(|| (jp.context.clone(), BTreeMap::new()));
        if entry.0 != jp.context {
            return Err(SerError::Input(format!(
                "line {line}: conflicting context for {}",
                jp.question_id
            )));
        }
        for a in [&jp.answer_1, &jp.answer_2] {
            let prev = entry.1.entry(a.id).or_insert_with(|| a.features.clone());
            if *prev != a.features {
                return Err(SerError::Input(format!(
                    "line {line}: conflicting features for {} of {}",
                    a.id, jp.question_id
                )));
            }
        }
        Ok(())
    }

    pub fn question_ids(&self) -> impl Iterator<Item = QuestionId> + '_ {
        self.questions.keys().copied()
    }
}

impl FeatureStore for PairFeatureTable {
    fn dim(&self) -> usize {
        self.dim
    }

    fn context(&self, q: QuestionId) -> Result<&[f64]> {
        self.questions
            .get(&q)
            .map(|x| x.0.as_slice())
            .ok_or_else(|| SerError::Lookup(format!("unknown question {q}")))
    }

    fn answer(&self, q: QuestionId, a: AnswerId) -> Result<&[f64]> {
        self.questions
            .get(&q)
            .and_then(|x| x.1.get(&a))
            .map(|v| v.as_slice())
            .ok_or_else(|| SerError::Lookup(format!("unknown answer {a} of {q}")))
    }
}

pub fn import_jsonl(path: &Path) -> Result<(PairFeatureTable, Vec<PreferencePair>)> {
    let file = std::fs::File::open(path).map_err(|e| SerError::io(path, e))?;
    let reader = std::io::BufReader::new(file);
    let mut table = PairFeatureTable::default();
    let mut pairs = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| SerError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let jp: JsonPair = serde_json::from_str(&line)
            .map_err(|e| SerError::Format(format!("line {}: {e}", i + 1)))?;
        if table.dim == 0 {
            table.dim = jp.context.len();
            if table.dim == 0 {
                return Err(SerError::Input(format!("line {}: empty context", i + 1)));
            }
        }
        table.insert(i + 1, &jp)?;
        let (label, source) = match (jp.label, jp.source) {
            (None, _) => (Label::Unlabeled, None),
            (Some(JsonLabel::Chosen1), s) => (Label::Chosen1, s.or(Some(Source::HumanSim))),
            (Some(JsonLabel::Chosen2), s) => (Label::Chosen2, s.or(Some(Source::HumanSim))),
        };
        let pair = PreferencePair {
            question_id: jp.question_id,
            answer_1_id: jp.answer_1.id,
            answer_2_id: jp.answer_2.id,
            label,
            source,
            scores: None,
        };
        if !seen.insert(pair.key()) {
            return Err(SerError::Input(format!("line {}: duplicate pair", i + 1)));
        }
        pairs.push(pair);
    }
    Ok((table, pairs))
}
