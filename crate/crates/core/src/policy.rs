//! PPO-lite: a linear softmax policy over a fixed candidate set per prompt,
//! trained as a one-step contextual bandit against a reward source.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SerError};
use crate::par::Execution;
use crate::reward_model::{sigmoid, RewardModelParams};
use crate::rng;
use crate::world::{AnswerId, FeatureStore, QuestionId, World};

/// What the policy sees of a (context, answer) candidate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyFeatures {
    /// `[c; a]`. The context half is shared by all candidates of a prompt and
    /// cancels in the softmax, so this policy cannot condition on the prompt.
    Concat,
    /// `[c; a; c ⊗ a]`, which lets the logit depend on the prompt.
    Interaction,
    /// One indicator per (prompt row, candidate): a tabular softmax policy.
    /// It can represent the per-prompt optimum but does not generalize.
    Tabular,
}

impl PolicyFeatures {
    fn dense(self, context: &[f64], answer: &[f64]) -> Vec<f64> {
        let mut x = Vec::with_capacity(2 * context.len());
        x.extend_from_slice(context);
        x.extend_from_slice(answer);
        if self == PolicyFeatures::Interaction {
            for c in context {
                x.extend(answer.iter().map(|a| c * a));
            }
        }
        x
    }
}

/// Candidates, their features and hidden qualities for an ordered list of
/// prompts. A question may appear more than once; each entry is its own prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptTable {
    pub dim: usize,
    pub features: PolicyFeatures,
    pub input_len: usize,
    pub prompts: Vec<QuestionId>,
    pub candidates: Vec<Vec<AnswerId>>,
    /// Policy features per candidate.
    pub inputs: Vec<Vec<Vec<f64>>>,
    /// Reward-model inputs `[c; a]` per candidate.
    pub joint: Vec<Vec<Vec<f64>>>,
    pub quality: Vec<Vec<f64>>,
}

impl PromptTable {
    pub fn build(world: &World, prompts: &[QuestionId], features: PolicyFeatures) -> Result<Self> {
        let mut t = PromptTable {
            dim: world.dim,
            features,
            input_len: 0,
            prompts: prompts.to_vec(),
            candidates: Vec::with_capacity(prompts.len()),
            inputs: Vec::with_capacity(prompts.len()),
            joint: Vec::with_capacity(prompts.len()),
            quality: Vec::with_capacity(prompts.len()),
        };
        let mut slots = 0;
        for &q in prompts {
            let question = world.question(q)?;
            if question.answers.len() < 2 {
                return Err(SerError::Config(format!("prompt {q} has fewer than 2 candidates")));
            }
            t.candidates.push(question.answers.iter().map(|a| a.id).collect());
            t.joint.push(
                question
                    .answers
                    .iter()
                    .map(|a| world.joint_input(q, a.id))
                    .collect::<Result<Vec<_>>>()?,
            );
            t.quality.push(question.answers.iter().map(|a| a.true_quality).collect());
            slots += question.answers.len();
        }
        t.input_len = match features {
            PolicyFeatures::Concat => 2 * world.dim,
            PolicyFeatures::Interaction => 2 * world.dim + world.dim * world.dim,
            PolicyFeatures::Tabular => slots,
        };
        let mut offset = 0;
        for (i, &q) in prompts.iter().enumerate() {
            let question = world.question(q)?;
            let rows = match features {
                PolicyFeatures::Tabular => (0..question.answers.len())
                    .map(|j| {
                        let mut x = vec![0.0; slots];
                        x[offset + j] = 1.0;
                        x
                    })
                    .collect(),
                _ => question
                    .answers
                    .iter()
                    .map(|a| features.dense(&question.context, &a.features))
                    .collect(),
            };
            offset += t.candidates[i].len();
            t.inputs.push(rows);
        }
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    /// Feature dimension of the world the policy was built for.
    pub dim: usize,
    pub features: PolicyFeatures,
    pub input_len: usize,
    pub weights: Vec<f64>,
    pub version: u64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl PolicyParams {
    /// The uniform policy over the table's candidates.
    pub fn uniform(table: &PromptTable) -> Self {
        Self {
            dim: table.dim,
            features: table.features,
            input_len: table.input_len,
            weights: vec![0.0; table.input_len],
            version: 0,
        }
    }

    pub fn probs(&self, candidates: &[Vec<f64>]) -> Vec<f64> {
        let logits: Vec<f64> = candidates.iter().map(|x| dot(&self.weights, x)).collect();
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|x| x / z).collect()
    }

    pub fn distributions(&self, table: &PromptTable) -> Result<Vec<Vec<f64>>> {
        self.check(table)?;
        Ok(table.inputs.iter().map(|c| self.probs(c)).collect())
    }

    fn check(&self, table: &PromptTable) -> Result<()> {
        if self.features != table.features {
            return Err(SerError::Config(format!(
                "policy uses {:?} features, prompt table {:?}",
                self.features, table.features
            )));
        }
        if self.input_len != table.input_len || self.weights.len() != self.input_len {
            return Err(SerError::Shape {
                expected: table.input_len,
                got: self.weights.len(),
            });
        }
        Ok(())
    }
}

/// Per-question argmax of the hidden quality.
pub fn optimal_distributions(table: &PromptTable) -> Vec<Vec<f64>> {
    table.quality.iter().map(|q| one_hot(q, |a, b| a > b)).collect()
}

/// Per-question argmin of the hidden quality.
pub fn anti_optimal_distributions(table: &PromptTable) -> Vec<Vec<f64>> {
    table.quality.iter().map(|q| one_hot(q, |a, b| a < b)).collect()
}

pub fn uniform_distributions(table: &PromptTable) -> Vec<Vec<f64>> {
    table
        .quality
        .iter()
        .map(|q| vec![1.0 / q.len() as f64; q.len()])
        .collect()
}

fn one_hot(q: &[f64], better: impl Fn(f64, f64) -> bool) -> Vec<f64> {
    let mut best = 0;
    for (i, &v) in q.iter().enumerate() {
        if better(v, q[best]) {
            best = i;
        }
    }
    let mut out = vec![0.0; q.len()];
    out[best] = 1.0;
    out
}

/// Mean over prompts of the expected hidden quality under `dists`.
pub fn expected_true_reward(dists: &[Vec<f64>], table: &PromptTable) -> f64 {
    if table.is_empty() {
        return 0.0;
    }
    let total: f64 = dists
        .iter()
        .zip(&table.quality)
        .map(|(p, q)| dot(p, q))
        .sum();
    total / table.len() as f64
}

pub trait RewardSource: Sync {
    /// Unscaled reward for one candidate; `x` is its joint input.
    fn raw(&self, q: QuestionId, a: AnswerId, x: &[f64]) -> Result<f64>;
}

/// A trained reward model rewards with its logit, so the scaled reward is
/// `2p - 1` in its own probability.
impl RewardSource for RewardModelParams {
    fn raw(&self, _q: QuestionId, _a: AnswerId, x: &[f64]) -> Result<f64> {
        self.check_input(x)?;
        Ok(self.logit(x))
    }
}

pub struct OracleReward<'a>(pub &'a World);

impl RewardSource for OracleReward<'_> {
    fn raw(&self, q: QuestionId, a: AnswerId, _x: &[f64]) -> Result<f64> {
        self.0.true_quality(q, a)
    }
}

/// `g*` plus uniform noise on `[-2eps, 2eps]` clamped to `[-eps, eps]`, drawn
/// once per (question, answer). Half the candidates sit exactly at `±eps`, so
/// the sup error over any sizable table is `eps` itself.
pub struct PerturbedReward<'a> {
    pub world: &'a World,
    pub eps: f64,
    pub seed: u64,
}

impl PerturbedReward<'_> {
    pub fn noise(&self, q: QuestionId, a: AnswerId) -> f64 {
        let bits = rng::derive_seed(self.seed, "rm-perturb", (u64::from(q.0) << 32) | u64::from(a.0));
        let u = (bits >> 11) as f64 / (1u64 << 53) as f64;
        (2.0 * self.eps * (2.0 * u - 1.0)).clamp(-self.eps, self.eps)
    }
}

impl RewardSource for PerturbedReward<'_> {
    fn raw(&self, q: QuestionId, a: AnswerId, _x: &[f64]) -> Result<f64> {
        Ok(self.world.true_quality(q, a)? + self.noise(q, a))
    }
}

pub fn scale_reward(raw: f64, t_clip: f64, new_min: f64, new_max: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&t_clip) {
        return Err(SerError::Argument(format!("t_clip must be in [0,1), got {t_clip}")));
    }
    let v = (sigmoid(raw) - t_clip) * (new_max - new_min) / (1.0 - t_clip) + new_min;
    Ok(v.clamp(new_min, new_max))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoHyper {
    pub clip_eps: f64,
    pub learning_rate: f64,
    pub ppo_epochs: usize,
    pub batch_size: usize,
    pub target_kl: f64,
    pub init_kl_coeff: f64,
    /// Gradient-norm bound δ_φ.
    pub grad_clip: f64,
    pub t_clip: f64,
    pub new_min: f64,
    pub new_max: f64,
    pub steps: usize,
    /// Candidates per prompt.
    pub candidates: usize,
    pub features: PolicyFeatures,
    /// Derived from the experiment seed; not read from config files.
    #[serde(skip)]
    pub rng_seed: u64,
}

impl Default for PpoHyper {
    fn default() -> Self {
        Self {
            clip_eps: 0.2,
            learning_rate: 0.2,
            ppo_epochs: 4,
            batch_size: 8,
            target_kl: 0.1,
            init_kl_coeff: 0.2,
            grad_clip: 1.0,
            t_clip: 0.0,
            new_min: -1.0,
            new_max: 1.0,
            steps: 1000,
            candidates: 4,
            features: PolicyFeatures::Concat,
            rng_seed: 42,
        }
    }
}

impl PpoHyper {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SerError::Config(m));
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return bad(format!("ppo.clip_eps must be in (0,1), got {}", self.clip_eps));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("ppo.learning_rate must be finite and >= 0, got {}", self.learning_rate));
        }
        if self.ppo_epochs == 0 {
            return bad("ppo.ppo_epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("ppo.batch_size must be >= 1".into());
        }
        if !(self.target_kl > 0.0) {
            return bad(format!("ppo.target_kl must be > 0, got {}", self.target_kl));
        }
        if !(self.init_kl_coeff >= 0.0 && self.init_kl_coeff.is_finite()) {
            return bad(format!("ppo.init_kl_coeff must be >= 0, got {}", self.init_kl_coeff));
        }
        if !(self.grad_clip > 0.0) {
            return bad(format!("ppo.grad_clip must be > 0, got {}", self.grad_clip));
        }
        if !(0.0..1.0).contains(&self.t_clip) {
            return bad(format!("ppo.t_clip must be in [0,1), got {}", self.t_clip));
        }
        if !(self.new_min < self.new_max) {
            return bad(format!(
                "ppo.new_min must be below ppo.new_max, got {} / {}",
                self.new_min, self.new_max
            ));
        }
        if self.candidates < 2 {
            return bad("ppo.candidates must be >= 2".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub question_id: QuestionId,
    /// Row of the prompt table.
    pub prompt: usize,
    /// Candidate index within the prompt.
    pub action: usize,
    pub answer_id: AnswerId,
    pub behavior_prob: f64,
    pub raw_reward: f64,
    pub scaled_reward: f64,
    pub advantage: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub mean_ratio: f64,
    pub clip_frac: f64,
    pub approx_kl: f64,
    /// Coefficient after adaptation, for the next step.
    pub kl_coeff: f64,
}

fn grad_log_prob(x: &[Vec<f64>], probs: &[f64], action: usize, out: &mut [f64], scale: f64) {
    for (j, xj) in x.iter().enumerate() {
        let c = if j == action { 1.0 - probs[j] } else { -probs[j] };
        for (o, v) in out.iter_mut().zip(xj) {
            *o += scale * c * v;
        }
    }
}

/// Mean clipped surrogate minus `kl_coeff` times the mean `(r - 1) - ln r`
/// KL estimate, with its gradient. Clipped samples contribute no gradient.
pub fn surrogate_and_grad(
    policy: &PolicyParams,
    rollouts: &[Rollout],
    table: &PromptTable,
    clip_eps: f64,
    kl_coeff: f64,
) -> Result<(f64, Vec<f64>)> {
    if rollouts.is_empty() {
        return Err(SerError::Argument("empty rollout batch".into()));
    }
    let n = rollouts.len() as f64;
    let mut obj = 0.0;
    let mut grad = vec![0.0; policy.weights.len()];
    for r in rollouts {
        let x = &table.inputs[r.prompt];
        let probs = policy.probs(x);
        let ratio = probs[r.action] / r.behavior_prob;
        let a = r.advantage;
        let unclipped = ratio * a;
        let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps) * a;
        obj += unclipped.min(clipped) / n;
        obj -= kl_coeff * ((ratio - 1.0) - ratio.ln()) / n;
        // d ratio = ratio · d log π
        let mut s = -kl_coeff * (ratio - 1.0);
        if unclipped <= clipped {
            s += a * ratio;
        }
        grad_log_prob(x, &probs, r.action, &mut grad, s / n);
    }
    Ok((obj, grad))
}

pub fn ppo_step(
    policy: &PolicyParams,
    rollouts: &[Rollout],
    table: &PromptTable,
    hyper: &PpoHyper,
    kl_coeff: f64,
) -> Result<(PolicyParams, StepDiagnostics)> {
    if rollouts.is_empty() {
        return Err(SerError::Argument("empty rollout batch".into()));
    }
    policy.check(table)?;
    let mut p = policy.clone();
    for epoch in 0..hyper.ppo_epochs {
        let (obj, mut g) = surrogate_and_grad(&p, rollouts, table, hyper.clip_eps, kl_coeff)?;
        if !obj.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(SerError::Divergence {
                context: format!("ppo epoch {epoch}"),
                detail: format!("non-finite objective {obj}"),
            });
        }
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > hyper.grad_clip {
            let s = hyper.grad_clip / norm;
            g.iter_mut().for_each(|v| *v *= s);
        }
        for (w, v) in p.weights.iter_mut().zip(&g) {
            *w += hyper.learning_rate * v;
        }
    }
    p.version = policy.version + 1;

    let n = rollouts.len() as f64;
    let (mut ratio_sum, mut clipped, mut kl) = (0.0, 0usize, 0.0);
    for r in rollouts {
        let ratio = p.probs(&table.inputs[r.prompt])[r.action] / r.behavior_prob;
        ratio_sum += ratio;
        if (ratio - 1.0).abs() > hyper.clip_eps {
            clipped += 1;
        }
        kl += (ratio - 1.0) - ratio.ln();
    }
    let approx_kl = kl / n;
    let next = if approx_kl > 2.0 * hyper.target_kl {
        kl_coeff * 2.0
    } else if approx_kl < hyper.target_kl / 2.0 {
        kl_coeff / 2.0
    } else {
        kl_coeff
    };
    Ok((
        p,
        StepDiagnostics {
            mean_ratio: ratio_sum / n,
            clip_frac: clipped as f64 / n,
            approx_kl,
            kl_coeff: next,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub mean_scaled_reward: f64,
    pub approx_kl: f64,
    pub clip_frac: f64,
    pub kl_coeff: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PpoOutcome {
    pub policy: PolicyParams,
    pub curve: Vec<CurvePoint>,
}

fn sample_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

pub fn sample_rollouts(
    policy: &PolicyParams,
    reward: &dyn RewardSource,
    table: &PromptTable,
    hyper: &PpoHyper,
    step: usize,
) -> Result<Vec<Rollout>> {
    let exec = Execution::default();
    let base = (step * hyper.batch_size) as u64;
    let mut rollouts = exec
        .map_indexed(hyper.batch_size, |i| {
            let mut r = rng::stream(hyper.rng_seed, "ppo-rollout", base + i as u64);
            let prompt = r.random_range(0..table.len());
            let probs = policy.probs(&table.inputs[prompt]);
            let action = sample_index(&probs, r.random::<f64>());
            let q = table.prompts[prompt];
            let a = table.candidates[prompt][action];
            let raw = reward.raw(q, a, &table.joint[prompt][action])?;
            let scaled = scale_reward(raw, hyper.t_clip, hyper.new_min, hyper.new_max)?;
            Ok(Rollout {
                question_id: q,
                prompt,
                action,
                answer_id: a,
                behavior_prob: probs[action],
                raw_reward: raw,
                scaled_reward: scaled,
                advantage: 0.0,
            })
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let mean = rollouts.iter().map(|r| r.scaled_reward).sum::<f64>() / rollouts.len() as f64;
    for r in &mut rollouts {
        r.advantage = r.scaled_reward - mean;
    }
    Ok(rollouts)
}

pub fn train_ppo(
    policy: &PolicyParams,
    reward: &dyn RewardSource,
    table: &PromptTable,
    hyper: &PpoHyper,
) -> Result<PpoOutcome> {
    hyper.validate()?;
    if table.is_empty() {
        return Err(SerError::Config("no PPO prompts".into()));
    }
    policy.check(table)?;
    let mut p = policy.clone();
    let mut kl_coeff = hyper.init_kl_coeff;
    let mut curve = Vec::with_capacity(hyper.steps);
    for step in 0..hyper.steps {
        let rollouts = sample_rollouts(&p, reward, table, hyper, step).map_err(|e| e.in_context(format!("step {step}")))?;
        let (next, diag) = ppo_step(&p, &rollouts, table, hyper, kl_coeff).map_err(|e| e.in_context(format!("step {step}")))?;
        curve.push(CurvePoint {
            step,
            mean_scaled_reward: rollouts.iter().map(|r| r.scaled_reward).sum::<f64>() / rollouts.len() as f64,
            approx_kl: diag.approx_kl,
            clip_frac: diag.clip_frac,
            kl_coeff,
        });
        kl_coeff = diag.kl_coeff;
        p = next;
    }
    Ok(PpoOutcome { policy: p, curve })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WinCounts {
    pub win: usize,
    pub tie: usize,
    pub lose: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WinRate {
    pub win: usize,
    pub tie: usize,
    pub lose: usize,
    pub win_frac: f64,
    pub tie_frac: f64,
    pub lose_frac: f64,
}

impl From<WinCounts> for WinRate {
    fn from(c: WinCounts) -> Self {
        let n = (c.win + c.tie + c.lose).max(1) as f64;
        WinRate {
            win: c.win,
            tie: c.tie,
            lose: c.lose,
            win_frac: c.win as f64 / n,
            tie_frac: c.tie as f64 / n,
            lose_frac: c.lose as f64 / n,
        }
    }
}

pub const DEFAULT_TIE_EPS: f64 = 1e-9;

/// Samples one answer per side for every prompt and compares hidden
/// qualities. Both sides draw from the same uniform per prompt, so identical
/// policies always tie and swapping the sides swaps win and lose.
pub fn judge_win_rate(
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    table: &PromptTable,
    seed: u64,
    tie_eps: f64,
) -> Result<WinCounts> {
    if a.len() != table.len() || b.len() != table.len() {
        return Err(SerError::Shape {
            expected: table.len(),
            got: a.len().min(b.len()),
        });
    }
    let mut c = WinCounts { win: 0, tie: 0, lose: 0 };
    for i in 0..table.len() {
        let u: f64 = rng::stream(seed, "judge", i as u64).random();
        let qa = table.quality[i][sample_index(&a[i], u)];
        let qb = table.quality[i][sample_index(&b[i], u)];
        if (qa - qb).abs() <= tie_eps {
            c.tie += 1;
        } else if qa > qb {
            c.win += 1;
        } else {
            c.lose += 1;
        }
    }
    Ok(c)
}
