//! Feed-forward reward scorer with a sigmoid probability head.
//!
//! Layout: `2d → h (activation) → 1 → sigmoid`. All weights live in one flat
//! vector `[W1 (h×2d, row-major) | b1 (h) | w2 (h) | b2]` so that optimizers,
//! checkpoints and gradient checks share a single indexing scheme.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SerError};
use crate::par::Execution;
use crate::rng;
use crate::world::{FeatureStore, PreferencePair};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the activation output `y` and input `z`.
    fn derivative(self, z: f64, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub(crate) fn code(self) -> u32 {
        match self {
            Activation::Tanh => 0,
            Activation::Relu => 1,
        }
    }

    pub(crate) fn from_code(c: u32) -> Option<Self> {
        match c {
            0 => Some(Activation::Tanh),
            1 => Some(Activation::Relu),
            _ => None,
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardModelParams {
    pub dim: usize,
    pub hidden: usize,
    pub activation: Activation,
    pub weights: Vec<f64>,
    /// Bumped on every training call.
    pub version: u64,
}

impl RewardModelParams {
    pub fn n_weights(dim: usize, hidden: usize) -> usize {
        hidden * 2 * dim + 2 * hidden + 1
    }

    pub fn zeros(dim: usize, hidden: usize) -> Self {
        Self {
            dim,
            hidden,
            activation: Activation::Tanh,
            weights: vec![0.0; Self::n_weights(dim, hidden)],
            version: 0,
        }
    }

    /// Gaussian init scaled by fan-in; biases start at zero.
    pub fn random(dim: usize, hidden: usize, seed: u64) -> Self {
        let mut p = Self::zeros(dim, hidden);
        let mut r = rng::stream(seed, "rm-init", 0);
        let s1 = (1.0 / (2 * dim) as f64).sqrt();
        let s2 = (1.0 / hidden as f64).sqrt();
        let (w1, rest) = p.weights.split_at_mut(hidden * 2 * dim);
        for w in w1 {
            *w = s1 * r.sample::<f64, _>(StandardNormal);
        }
        for w in &mut rest[hidden..2 * hidden] {
            *w = s2 * r.sample::<f64, _>(StandardNormal);
        }
        p
    }

    pub fn from_weights(
        dim: usize,
        hidden: usize,
        activation: Activation,
        weights: Vec<f64>,
    ) -> Result<Self> {
        let n = Self::n_weights(dim, hidden);
        if weights.len() != n {
            return Err(SerError::Shape {
                expected: n,
                got: weights.len(),
            });
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(SerError::Input("non-finite reward-model weight".into()));
        }
        Ok(Self {
            dim,
            hidden,
            activation,
            weights,
            version: 0,
        })
    }

    pub fn input_len(&self) -> usize {
        2 * self.dim
    }

    fn w1(&self) -> &[f64] {
        &self.weights[..self.hidden * 2 * self.dim]
    }

    fn b1(&self) -> &[f64] {
        let o = self.hidden * 2 * self.dim;
        &self.weights[o..o + self.hidden]
    }

    fn w2(&self) -> &[f64] {
        let o = self.hidden * 2 * self.dim + self.hidden;
        &self.weights[o..o + self.hidden]
    }

    fn b2(&self) -> f64 {
        self.weights[self.weights.len() - 1]
    }

    /// Pre-sigmoid output. `x` must already be `2d` long.
    pub fn logit(&self, x: &[f64]) -> f64 {
        let n_in = self.input_len();
        let w1 = self.w1();
        let b1 = self.b1();
        let w2 = self.w2();
        let mut out = self.b2();
        for j in 0..self.hidden {
            let row = &w1[j * n_in..(j + 1) * n_in];
            let z = b1[j] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
            out += w2[j] * self.activation.apply(z);
        }
        out
    }

    pub fn prob(&self, x: &[f64]) -> f64 {
        sigmoid(self.logit(x))
    }

    /// Adds `scale · ∂logit/∂θ` into `grad`.
    fn accumulate_logit_grad(&self, x: &[f64], scale: f64, grad: &mut [f64]) {
        let n_in = self.input_len();
        let h = self.hidden;
        let w1 = self.w1();
        let b1 = self.b1();
        let w2 = self.w2();
        let o_b1 = h * n_in;
        let o_w2 = o_b1 + h;
        for j in 0..h {
            let row = &w1[j * n_in..(j + 1) * n_in];
            let z = b1[j] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
            let y = self.activation.apply(z);
            grad[o_w2 + j] += scale * y;
            let back = scale * w2[j] * self.activation.derivative(z, y);
            if back != 0.0 {
                for (g, v) in grad[j * n_in..(j + 1) * n_in].iter_mut().zip(x) {
                    *g += back * v;
                }
                grad[o_b1 + j] += back;
            }
        }
        *grad.last_mut().expect("non-empty weights") += scale;
    }

    pub fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_len() {
            return Err(SerError::Shape {
                expected: self.input_len(),
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(SerError::Input("non-finite feature".into()));
        }
        Ok(())
    }
}

/// Probability that the answer is good: `sigmoid(network(q ⊕ a))`.
pub fn score(params: &RewardModelParams, q_feat: &[f64], a_feat: &[f64]) -> Result<f64> {
    if q_feat.len() != params.dim {
        return Err(SerError::Shape {
            expected: params.dim,
            got: q_feat.len(),
        });
    }
    if a_feat.len() != params.dim {
        return Err(SerError::Shape {
            expected: params.dim,
            got: a_feat.len(),
        });
    }
    let mut x = Vec::with_capacity(2 * params.dim);
    x.extend_from_slice(q_feat);
    x.extend_from_slice(a_feat);
    params.check_input(&x)?;
    Ok(params.prob(&x))
}

/// A pair with the preferred answer's joint input first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderedPair {
    pub chosen: Vec<f64>,
    pub rejected: Vec<f64>,
}

/// Materializes labeled pairs as chosen-first model inputs.
pub fn ordered_pairs(store: &dyn FeatureStore, pairs: &[PreferencePair]) -> Result<Vec<OrderedPair>> {
    pairs
        .iter()
        .map(|p| {
            let (c, r) = p.ordered().ok_or_else(|| {
                SerError::Argument(format!(
                    "pair on {} ({}, {}) is unlabeled",
                    p.question_id, p.answer_1_id, p.answer_2_id
                ))
            })?;
            Ok(OrderedPair {
                chosen: store.joint_input(p.question_id, c)?,
                rejected: store.joint_input(p.question_id, r)?,
            })
        })
        .collect()
}

/// Mean hinge `max(0, Δ − (p_chosen − p_rejected))` and its exact gradient.
/// Pairs at or beyond the margin contribute nothing, including at the kink.
pub fn pairwise_loss_and_grad(
    params: &RewardModelParams,
    batch: &[OrderedPair],
    margin: f64,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(SerError::Argument("empty batch".into()));
    }
    let mut grad = vec![0.0; params.weights.len()];
    let mut loss = 0.0;
    let inv = 1.0 / batch.len() as f64;
    for pair in batch {
        params.check_input(&pair.chosen)?;
        params.check_input(&pair.rejected)?;
        let pc = params.prob(&pair.chosen);
        let pr = params.prob(&pair.rejected);
        let slack = margin - (pc - pr);
        if slack > 0.0 {
            loss += slack;
            params.accumulate_logit_grad(&pair.chosen, -inv * pc * (1.0 - pc), &mut grad);
            params.accumulate_logit_grad(&pair.rejected, inv * pr * (1.0 - pr), &mut grad);
        }
    }
    Ok((loss * inv, grad))
}

/// Mean hinge loss over a whole dataset, evaluated pair-parallel.
pub fn dataset_loss(params: &RewardModelParams, data: &[OrderedPair], margin: f64, exec: Execution) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let per = exec.map(data, |p| (margin - (params.prob(&p.chosen) - params.prob(&p.rejected))).max(0.0));
    per.iter().sum::<f64>() / data.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainHyper {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub margin: f64,
    pub weight_decay: f64,
    /// Derived from the experiment seed; not read from config files.
    #[serde(skip)]
    pub rng_seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            learning_rate: 0.5,
            epochs: 2,
            batch_size: 32,
            margin: 0.2,
            weight_decay: 0.05,
            rng_seed: 42,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(SerError::Config(format!(
                "train.learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(SerError::Config("train.epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(SerError::Config("train.batch_size must be >= 1".into()));
        }
        if !(self.margin > 0.0 && self.margin < 1.0) {
            return Err(SerError::Config(format!(
                "train.margin must be in (0,1), got {}",
                self.margin
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(SerError::Config("train.weight_decay must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub params: RewardModelParams,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Set when training ended with a higher loss than it started with.
    pub loss_increased: bool,
    pub steps: usize,
}

/// Seeded mini-batch gradient descent with optional decoupled weight decay.
pub fn train(params: &RewardModelParams, data: &[OrderedPair], hyper: &TrainHyper) -> Result<TrainOutcome> {
    hyper.validate()?;
    if data.is_empty() {
        return Err(SerError::Argument("no training pairs".into()));
    }
    let exec = Execution::default();
    let mut p = params.clone();
    let initial_loss = dataset_loss(&p, data, hyper.margin, exec);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut batch = Vec::with_capacity(hyper.batch_size);
    let mut steps = 0;
    for epoch in 0..hyper.epochs {
        order.shuffle(&mut rng::stream(hyper.rng_seed, "rm-shuffle", epoch as u64));
        for (b, chunk) in order.chunks(hyper.batch_size).enumerate() {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| data[i].clone()));
            let (loss, grad) = pairwise_loss_and_grad(&p, &batch, hyper.margin)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(SerError::Divergence {
                    context: format!("epoch {epoch}, batch {b}"),
                    detail: format!("non-finite loss {loss}"),
                });
            }
            let decay = 1.0 - hyper.learning_rate * hyper.weight_decay;
            for (w, g) in p.weights.iter_mut().zip(&grad) {
                *w = *w * decay - hyper.learning_rate * g;
            }
            if p.weights.iter().any(|w| !w.is_finite()) {
                return Err(SerError::Divergence {
                    context: format!("epoch {epoch}, batch {b}"),
                    detail: "weights left the finite range".into(),
                });
            }
            steps += 1;
        }
    }
    let final_loss = dataset_loss(&p, data, hyper.margin, exec);
    if !final_loss.is_finite() {
        return Err(SerError::Divergence {
            context: format!("epoch {}, final evaluation", hyper.epochs),
            detail: format!("non-finite loss {final_loss}"),
        });
    }
    p.version = params.version + 1;
    Ok(TrainOutcome {
        params: p,
        initial_loss,
        final_loss,
        loss_increased: final_loss > initial_loss,
        steps,
    })
}

/// Fraction of pairs whose chosen answer scores strictly higher.
pub fn accuracy_ordered(params: &RewardModelParams, pairs: &[OrderedPair], exec: Execution) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let hits = exec.map(pairs, |p| params.prob(&p.chosen) > params.prob(&p.rejected));
    hits.iter().filter(|&&h| h).count() as f64 / pairs.len() as f64
}

pub fn evaluate_accuracy(
    params: &RewardModelParams,
    store: &dyn FeatureStore,
    test: &[PreferencePair],
) -> Result<f64> {
    if test.is_empty() {
        return Err(SerError::Argument("empty evaluation set".into()));
    }
    let ordered = ordered_pairs(store, test)?;
    for p in &ordered {
        params.check_input(&p.chosen)?;
        params.check_input(&p.rejected)?;
    }
    Ok(accuracy_ordered(params, &ordered, Execution::default()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RewardModelParams {
        // d = 1, h = 1: logit = w2 * tanh(w11*q + w12*a + b1) + b2
        RewardModelParams::from_weights(1, 1, Activation::Tanh, vec![0.7, -1.3, 0.2, 1.5, -0.4])
            .unwrap()
    }

    #[test]
    fn zero_final_layer_gives_half() {
        let mut p = RewardModelParams::random(3, 4, 1);
        let n = p.weights.len();
        for w in &mut p.weights[n - 5..] {
            *w = 0.0;
        }
        assert_eq!(score(&p, &[1.0, -2.0, 3.0], &[0.5, 0.1, 9.0]).unwrap(), 0.5);
    }

    #[test]
    fn hand_computed_score() {
        let p = tiny();
        let (q, a) = (0.3, -0.8);
        let z: f64 = 0.7 * q - 1.3 * a + 0.2;
        let want = 1.0 / (1.0 + (-(1.5 * z.tanh() - 0.4)).exp());
        let got = score(&p, &[q], &[a]).unwrap();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn zero_inputs_use_bias_path() {
        let p = tiny();
        let want = sigmoid(1.5 * 0.2f64.tanh() - 0.4);
        assert!((score(&p, &[0.0], &[0.0]).unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn score_errors() {
        let p = tiny();
        assert!(matches!(score(&p, &[0.0, 1.0], &[0.0]), Err(SerError::Shape { .. })));
        assert!(matches!(score(&p, &[f64::NAN], &[0.0]), Err(SerError::Input(_))));
    }

    /// Model whose probability is a direct function of the first input coordinate.
    fn probe_params() -> RewardModelParams {
        // d=1, h=1, w11 = 1, w12 = 0, b1 = 0, w2 = 4, b2 = 0 → logit = 4 tanh(x0)
        RewardModelParams::from_weights(1, 1, Activation::Tanh, vec![1.0, 0.0, 0.0, 4.0, 0.0]).unwrap()
    }

    fn pair_with_probs(pc: f64, pr: f64) -> OrderedPair {
        let x = |p: f64| {
            let logit = (p / (1.0 - p)).ln();
            vec![(logit / 4.0).atanh(), 0.0]
        };
        OrderedPair { chosen: x(pc), rejected: x(pr) }
    }

    #[test]
    fn hinge_examples() {
        let p = probe_params();
        for (pc, pr, want) in [(0.8, 0.3, 0.0), (0.5, 0.5, 0.1), (0.4, 0.6, 0.3)] {
            let (loss, _) = pairwise_loss_and_grad(&p, &[pair_with_probs(pc, pr)], 0.1).unwrap();
            assert!((loss - want).abs() < 1e-9, "({pc},{pr}) -> {loss}");
        }
    }

    #[test]
    fn satisfied_pair_has_zero_gradient() {
        let p = probe_params();
        let (loss, g) = pairwise_loss_and_grad(&p, &[pair_with_probs(0.7, 0.4)], 0.1).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn empty_batch_is_error() {
        assert!(matches!(
            pairwise_loss_and_grad(&tiny(), &[], 0.1),
            Err(SerError::Argument(_))
        ));
        assert!(matches!(
            train(&tiny(), &[], &TrainHyper::default()),
            Err(SerError::Argument(_))
        ));
    }

    #[test]
    fn training_on_satisfied_pair_keeps_params() {
        let p = probe_params();
        let hyper = TrainHyper { weight_decay: 0.0, ..TrainHyper::default() };
        let out = train(&p, &[pair_with_probs(0.7, 0.4)], &hyper).unwrap();
        assert_eq!(out.params.weights, p.weights);
        assert_eq!(out.final_loss, 0.0);
    }

    #[test]
    fn training_is_deterministic_and_pure() {
        let p = RewardModelParams::random(2, 4, 3);
        let before = p.clone();
        let data: Vec<_> = (0..40)
            .map(|i| {
                let t = i as f64 / 10.0 - 2.0;
                OrderedPair {
                    chosen: vec![t, 0.1, 1.0, 0.5],
                    rejected: vec![t, 0.1, -1.0, 0.2],
                }
            })
            .collect();
        let hyper = TrainHyper { learning_rate: 0.5, ..TrainHyper::default() };
        let a = train(&p, &data, &hyper).unwrap();
        let b = train(&p, &data, &hyper).unwrap();
        assert_eq!(a.params.weights, b.params.weights);
        assert_eq!(p, before);
        assert_ne!(a.params.weights, p.weights);
        assert_eq!(a.params.version, 1);
    }

    #[test]
    fn divergence_names_batch() {
        let p = probe_params();
        let data = vec![pair_with_probs(0.5, 0.5)];
        let hyper = TrainHyper { learning_rate: f64::MAX, ..TrainHyper::default() };
        match train(&p, &data, &hyper) {
            Err(SerError::Divergence { context, .. }) => assert!(context.contains("batch")),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn hyper_validation() {
        assert!(TrainHyper { margin: 1.0, ..TrainHyper::default() }.validate().is_err());
        assert!(TrainHyper { epochs: 0, ..TrainHyper::default() }.validate().is_err());
        assert!(TrainHyper { learning_rate: 0.0, ..TrainHyper::default() }.validate().is_err());
    }
}
