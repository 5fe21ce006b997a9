//! Empirical checks of the convergence assumptions and theorems: initial
//! accuracy, confident-prediction reliability, a Lipschitz probe, accuracy
//! monotonicity across loops, and policy regret against reward error.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SerError};
use crate::metrics::{fmt_g9, Table};
use crate::reward_model::{sigmoid, RewardModelParams};
use crate::rng;
use crate::world::{AnswerId, FeatureStore, PreferencePair, QuestionId, World};

/// Anything that turns a (question, answer) into a preference probability.
pub trait AnswerScorer: Sync {
    fn prob(&self, q: QuestionId, a: AnswerId, x: &[f64]) -> Result<f64>;
}

impl AnswerScorer for RewardModelParams {
    fn prob(&self, _q: QuestionId, _a: AnswerId, x: &[f64]) -> Result<f64> {
        self.check_input(x)?;
        Ok(RewardModelParams::prob(self, x))
    }
}

/// `σ(k·(g* − median of the question's candidate qualities))`. Depends on the
/// true answer only, so its Lipschitz probe reflects `g*` itself.
pub struct CalibratedOracle<'a> {
    pub world: &'a World,
    pub sharpness: f64,
}

impl AnswerScorer for CalibratedOracle<'_> {
    fn prob(&self, q: QuestionId, _a: AnswerId, x: &[f64]) -> Result<f64> {
        let d = self.world.dim;
        let g = self.world.oracle.quality(&x[..d], &x[d..]);
        Ok(sigmoid(self.sharpness * (g - question_median(self.world, q)?)))
    }
}

pub struct ConstantScorer(pub f64);

impl AnswerScorer for ConstantScorer {
    fn prob(&self, _q: QuestionId, _a: AnswerId, _x: &[f64]) -> Result<f64> {
        Ok(self.0)
    }
}

fn question_median(world: &World, q: QuestionId) -> Result<f64> {
    let mut v: Vec<f64> = world.question(q)?.answers.iter().map(|a| a.true_quality).collect();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Ok(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub acc0: f64,
    /// `None` when no prediction cleared the confidence margin.
    pub alpha_hat: Option<f64>,
    pub delta_p: f64,
    pub n_confident: usize,
    pub n_answers: usize,
    pub lipschitz_hat: f64,
    pub n_probes: usize,
}

pub const PROBE_STEP: f64 = 1e-3;

pub fn check_assumptions(
    scorer: &dyn AnswerScorer,
    labeled_eval: &[PreferencePair],
    world: &World,
    delta_p: f64,
    probes: usize,
    probe_seed: u64,
) -> Result<AssumptionReport> {
    if !(delta_p > 0.0 && delta_p < 0.5) {
        return Err(SerError::Argument(format!("delta_p must be in (0, 0.5), got {delta_p}")));
    }
    if labeled_eval.is_empty() {
        return Err(SerError::Argument("empty evaluation set".into()));
    }
    let mut hits = 0usize;
    let (mut n_conf, mut conf_hits, mut n_answers) = (0usize, 0usize, 0usize);
    for p in labeled_eval {
        let (c, r) = p
            .ordered()
            .ok_or_else(|| SerError::Argument(format!("unlabeled pair for {} in evaluation set", p.question_id)))?;
        let q = p.question_id;
        let pc = scorer.prob(q, c, &world.joint_input(q, c)?)?;
        let pr = scorer.prob(q, r, &world.joint_input(q, r)?)?;
        if pc > pr {
            hits += 1;
        }
        let median = question_median(world, q)?;
        for (a, prob) in [(c, pc), (r, pr)] {
            n_answers += 1;
            if (prob - 0.5).abs() >= delta_p {
                n_conf += 1;
                let good = world.true_quality(q, a)? > median;
                if (prob > 0.5) == good {
                    conf_hits += 1;
                }
            }
        }
    }

    let mut lip: f64 = 0.0;
    let d = world.dim;
    for i in 0..probes {
        let mut r = rng::stream(probe_seed, "lipschitz", i as u64);
        let p = &labeled_eval[r.random_range(0..labeled_eval.len())];
        let a = if r.random::<bool>() { p.answer_1_id } else { p.answer_2_id };
        let coord = r.random_range(0..d);
        let sign = if r.random::<bool>() { 1.0 } else { -1.0 };
        let x = world.joint_input(p.question_id, a)?;
        let mut y = x.clone();
        y[d + coord] += sign * PROBE_STEP;
        let dr = (scorer.prob(p.question_id, a, &y)? - scorer.prob(p.question_id, a, &x)?).abs();
        lip = lip.max(dr / PROBE_STEP);
    }

    Ok(AssumptionReport {
        acc0: hits as f64 / labeled_eval.len() as f64,
        alpha_hat: (n_conf > 0).then(|| conf_hits as f64 / n_conf as f64),
        delta_p,
        n_confident: n_conf,
        n_answers,
        lipschitz_hat: lip,
        n_probes: probes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    AssumptionsUnmet,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Pass => "PASS",
            Verdict::Fail => "FAIL",
            Verdict::AssumptionsUnmet => "assumptions unmet",
        }
    }
}

/// Two binomial standard errors.
pub fn eps_stat(acc: f64, n_test: usize) -> f64 {
    2.0 * (acc * (1.0 - acc) / n_test as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopPoint {
    pub loop_index: usize,
    pub accuracy: f64,
    pub std_error: f64,
    pub alpha_hat: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Seed {
    pub seed: u64,
    pub assumptions: AssumptionReport,
    pub n_test: usize,
    pub loops: Vec<LoopPoint>,
    /// Largest drop between consecutive loops, and the tolerance it met or broke.
    pub worst_drop: f64,
    pub worst_drop_tolerance: f64,
    pub alpha_above_half_every_loop: bool,
    pub verdict: Verdict,
    pub reason: String,
}

/// Applies the monotonicity rule to a measured accuracy sequence.
pub fn judge_sequence(accs: &[f64], n_test: usize) -> (Verdict, f64, f64, String) {
    let mut worst = 0.0;
    let mut tol = 0.0;
    let mut reason = String::new();
    let mut ok = true;
    for (t, w) in accs.windows(2).enumerate() {
        let drop = w[0] - w[1];
        let e = eps_stat(w[0], n_test);
        if drop > worst {
            worst = drop;
            tol = e;
        }
        if w[1] - w[0] < -e && ok {
            ok = false;
            reason = format!("loop {} -> {} drops {:.4} > 2 SE {:.4}", t, t + 1, drop, e);
        }
    }
    if let (Some(first), Some(last)) = (accs.first(), accs.last()) {
        if last < first && ok {
            ok = false;
            reason = format!("final accuracy {last:.4} below loop-0 {first:.4}");
        }
    }
    if ok {
        reason = "no drop beyond 2 SE and final >= loop 0".into();
    }
    (if ok { Verdict::Pass } else { Verdict::Fail }, worst, tol, reason)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Report {
    pub seeds: Vec<Theorem1Seed>,
    pub passed: usize,
    pub required: usize,
    pub verdict: Verdict,
}

impl Theorem1Report {
    pub fn assemble(mut seeds: Vec<Theorem1Seed>, required: usize) -> Self {
        seeds.sort_by_key(|s| s.seed);
        let passed = seeds.iter().filter(|s| s.verdict == Verdict::Pass).count();
        let verdict = if seeds.iter().all(|s| s.verdict == Verdict::AssumptionsUnmet) {
            Verdict::AssumptionsUnmet
        } else if passed >= required {
            Verdict::Pass
        } else {
            Verdict::Fail
        };
        Theorem1Report {
            seeds,
            passed,
            required,
            verdict,
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "theorem 1 (accuracy non-decreasing across loops): {} ({} of {} seeds pass, {} required)\n",
            self.verdict.as_str(),
            self.passed,
            self.seeds.len(),
            self.required
        );
        for r in &self.seeds {
            let accs: Vec<String> = r.loops.iter().map(|l| format!("{:.4}", l.accuracy)).collect();
            s += &format!(
                "  seed {}: {} | acc0 {:.4} alpha_hat {} | acc {} | {}\n",
                r.seed,
                r.verdict.as_str(),
                r.assumptions.acc0,
                r.assumptions.alpha_hat.map_or("undefined".into(), |a| format!("{a:.4}")),
                accs.join(" -> "),
                r.reason
            );
        }
        s
    }

    pub fn to_table(&self) -> Table {
        let mut t = Table::new(&["seed", "loop", "accuracy", "std_error", "alpha_hat"]);
        for r in &self.seeds {
            for l in &r.loops {
                t.push(vec![
                    r.seed.to_string(),
                    l.loop_index.to_string(),
                    fmt_g9(l.accuracy),
                    fmt_g9(l.std_error),
                    l.alpha_hat.map_or_else(String::new, fmt_g9),
                ]);
            }
        }
        t
    }
}

/// Average ranks, ties sharing the mean rank.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    pearson(&ranks(x), &ranks(y))
}

/// Least-squares slope of `y` on `x`.
pub fn ls_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretRow {
    pub seed: u64,
    pub eps_r: f64,
    pub j_optimal: f64,
    pub j_policy: f64,
    pub j_anti_optimal: f64,
    pub regret: f64,
    /// Largest |RM_ε − g*| seen over the probe set.
    pub max_abs_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelSummary {
    pub eps_r: f64,
    pub mean_regret: f64,
    pub mean_j_optimal: f64,
    pub regret_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem2Report {
    pub rows: Vec<RegretRow>,
    pub levels: Vec<LevelSummary>,
    pub spearman: f64,
    pub k_hat: f64,
    pub zero_level_fraction: f64,
    pub zero_level_tolerance: f64,
    pub spearman_threshold: f64,
    pub verdict: Verdict,
    pub reason: String,
}

impl Theorem2Report {
    pub fn assemble(mut rows: Vec<RegretRow>, zero_tol: f64, rho_min: f64) -> Result<Self> {
        rows.sort_by(|a, b| a.eps_r.total_cmp(&b.eps_r).then(a.seed.cmp(&b.seed)));
        let mut eps: Vec<f64> = rows.iter().map(|r| r.eps_r).collect();
        eps.dedup();
        if eps.first() != Some(&0.0) {
            return Err(SerError::Argument("reward-error levels must include 0".into()));
        }
        let levels: Vec<LevelSummary> = eps
            .iter()
            .map(|&e| {
                let at: Vec<_> = rows.iter().filter(|r| r.eps_r == e).collect();
                let n = at.len() as f64;
                let mean_regret = at.iter().map(|r| r.regret).sum::<f64>() / n;
                let mean_j = at.iter().map(|r| r.j_optimal).sum::<f64>() / n;
                LevelSummary {
                    eps_r: e,
                    mean_regret,
                    mean_j_optimal: mean_j,
                    regret_fraction: mean_regret / mean_j,
                }
            })
            .collect();
        let x: Vec<f64> = levels.iter().map(|l| l.eps_r).collect();
        let y: Vec<f64> = levels.iter().map(|l| l.mean_regret).collect();
        let rho = if x.len() > 1 { spearman(&x, &y) } else { 1.0 };
        let k_hat = if x.len() > 1 { ls_slope(&x, &y) } else { 0.0 };
        let zero = levels[0].regret_fraction;
        let mut reasons = Vec::new();
        if zero > zero_tol {
            reasons.push(format!("regret at eps_r=0 is {:.2}% of optimal (> {:.0}%)", 100.0 * zero, 100.0 * zero_tol));
        }
        if rho < rho_min {
            reasons.push(format!("Spearman(eps_r, regret) = {rho:.3} < {rho_min}"));
        }
        let verdict = if reasons.is_empty() { Verdict::Pass } else { Verdict::Fail };
        let reason = if reasons.is_empty() {
            format!("regret at 0 is {:.2}% of optimal, Spearman {rho:.3}", 100.0 * zero)
        } else {
            reasons.join("; ")
        };
        Ok(Theorem2Report {
            rows,
            levels,
            spearman: rho,
            k_hat,
            zero_level_fraction: zero,
            zero_level_tolerance: zero_tol,
            spearman_threshold: rho_min,
            verdict,
            reason,
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "theorem 2 (policy regret grows with reward error): {} | {}\n  K_hat (slope of regret on eps_r) = {:.6}\n",
            self.verdict.as_str(),
            self.reason,
            self.k_hat
        );
        for l in &self.levels {
            s += &format!(
                "  eps_r {:<6} mean regret {:.6} ({:.2}% of optimal)\n",
                l.eps_r,
                l.mean_regret,
                100.0 * l.regret_fraction
            );
        }
        s
    }

    pub fn to_table(&self) -> Table {
        let mut t = Table::new(&["seed", "eps_r", "j_optimal", "j_policy", "j_anti_optimal", "regret", "max_abs_error"]);
        for r in &self.rows {
            t.push(vec![
                r.seed.to_string(),
                fmt_g9(r.eps_r),
                fmt_g9(r.j_optimal),
                fmt_g9(r.j_policy),
                fmt_g9(r.j_anti_optimal),
                fmt_g9(r.regret),
                fmt_g9(r.max_abs_error),
            ]);
        }
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{generate_world, make_splits, SplitConfig, WorldConfig};

    fn fixture() -> (World, Vec<PreferencePair>) {
        let w = generate_world(&WorldConfig {
            dim: 4,
            n_questions: 200,
            seed: 2,
            ..WorldConfig::default()
        })
        .unwrap();
        let s = make_splits(&w, &SplitConfig::default()).unwrap();
        (w, s.test)
    }

    #[test]
    fn calibrated_oracle_is_fully_reliable() {
        let (w, test) = fixture();
        let o = CalibratedOracle { world: &w, sharpness: 5.0 };
        let r = check_assumptions(&o, &test, &w, 0.05, 200, 1).unwrap();
        assert_eq!(r.acc0, 1.0);
        assert!(r.n_confident > 0);
        assert_eq!(r.alpha_hat, Some(1.0));
        assert!(r.lipschitz_hat > 0.0);
    }

    #[test]
    fn constant_scorer_has_no_confident_predictions() {
        let (w, test) = fixture();
        let r = check_assumptions(&ConstantScorer(0.5), &test, &w, 0.05, 50, 1).unwrap();
        assert_eq!(r.n_confident, 0);
        assert_eq!(r.alpha_hat, None);
        assert_eq!(r.acc0, 0.0);
        assert_eq!(r.lipschitz_hat, 0.0);
    }

    #[test]
    fn bad_margin_rejected() {
        let (w, test) = fixture();
        assert!(check_assumptions(&ConstantScorer(0.5), &test, &w, 0.5, 1, 1).is_err());
    }

    #[test]
    fn sequence_rules() {
        assert_eq!(judge_sequence(&[0.8], 400).0, Verdict::Pass);
        assert_eq!(judge_sequence(&[0.8, 0.85, 0.84, 0.86], 400).0, Verdict::Pass);
        // 2 SE at 0.85 with n=400 is ~0.0357
        assert_eq!(judge_sequence(&[0.8, 0.85, 0.81, 0.86], 400).0, Verdict::Fail);
        assert_eq!(judge_sequence(&[0.8, 0.79], 400).0, Verdict::Fail);
    }

    #[test]
    fn spearman_and_slope() {
        assert_eq!(spearman(&[0.0, 1.0, 2.0, 3.0], &[1.0, 2.0, 5.0, 9.0]), 1.0);
        assert!((spearman(&[0.0, 1.0, 2.0, 3.0], &[1.0, 5.0, 2.0, 9.0]) - 0.8).abs() < 1e-12);
        assert_eq!(spearman(&[0.0, 1.0, 2.0], &[3.0, 2.0, 1.0]), -1.0);
        assert!((ls_slope(&[0.0, 1.0, 2.0], &[1.0, 3.0, 5.0]) - 2.0).abs() < 1e-12);
        assert_eq!(ranks(&[2.0, 1.0, 2.0]), vec![2.5, 1.0, 2.5]);
    }
}
