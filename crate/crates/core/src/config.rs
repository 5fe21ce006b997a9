//! Experiment configuration: one TOML file with a section per module, strict
//! key checking, dotted-path overrides and per-stage seed derivation.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cost::CostInputs;
use crate::error::{Result, SerError};
use crate::policy::PpoHyper;
use crate::reward_model::TrainHyper;
use crate::rng::derive_seed;
use crate::self_evolve::{SerOptions, SerThresholds};
use crate::world::{SplitConfig, WorldConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Win-rate prompts, cycling through the held-out questions when there
    /// are fewer of them.
    pub n_prompts: usize,
    pub tie_eps: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_prompts: 1000,
            tie_eps: crate::policy::DEFAULT_TIE_EPS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TheoryConfig {
    pub seeds: usize,
    pub delta_p: f64,
    pub lipschitz_probes: usize,
    /// Seeds that must pass the accuracy-monotonicity check.
    pub theorem1_required: usize,
    pub eps_levels: Vec<f64>,
    /// PPO prompts per regret run.
    pub prompts: usize,
    pub zero_regret_tolerance: f64,
    pub spearman_min: f64,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        Self {
            seeds: 5,
            delta_p: 0.05,
            lipschitz_probes: 1000,
            theorem1_required: 4,
            eps_levels: vec![0.0, 0.1, 0.2, 0.4],
            prompts: 64,
            zero_regret_tolerance: 0.05,
            spearman_min: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: String,
    pub world: WorldConfig,
    pub split: SplitConfig,
    pub ser: SerThresholds,
    pub ser_options: SerOptions,
    pub train: TrainHyper,
    pub ppo: PpoHyper,
    pub eval: EvalConfig,
    pub theory: TheoryConfig,
    pub cost: CostInputs,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            output_dir: "runs/default".into(),
            world: WorldConfig::default(),
            split: SplitConfig::default(),
            ser: SerThresholds::default(),
            ser_options: SerOptions::default(),
            train: TrainHyper::default(),
            ppo: PpoHyper::default(),
            eval: EvalConfig::default(),
            theory: TheoryConfig::default(),
            cost: CostInputs::default(),
        }
    }
}

/// Per-stage seeds fanned out from one experiment seed. Each stage hashes its
/// own label, so adding a stage never shifts another stage's stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSeeds {
    pub world: u64,
    pub split: u64,
    pub reward_model: u64,
    pub ppo: u64,
    pub judge: u64,
    pub perturb: u64,
    pub probes: u64,
}

impl StageSeeds {
    pub fn new(seed: u64) -> Self {
        let s = |label| derive_seed(seed, label, 0);
        Self {
            world: s("world"),
            split: s("split"),
            reward_model: s("reward-model"),
            ppo: s("ppo"),
            judge: s("judge"),
            perturb: s("perturb"),
            probes: s("probes"),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.split.validate()?;
        self.ser.validate()?;
        if self.ser_options.hidden == 0 {
            return Err(SerError::Config("ser_options.hidden must be >= 1".into()));
        }
        self.train.validate()?;
        self.ppo.validate()?;
        if self.eval.n_prompts == 0 {
            return Err(SerError::Config("eval.n_prompts must be >= 1".into()));
        }
        if !(self.eval.tie_eps >= 0.0) {
            return Err(SerError::Config("eval.tie_eps must be >= 0".into()));
        }
        let t = &self.theory;
        if t.seeds == 0 {
            return Err(SerError::Config("theory.seeds must be >= 1".into()));
        }
        if !(t.delta_p > 0.0 && t.delta_p < 0.5) {
            return Err(SerError::Config(format!("theory.delta_p must be in (0,0.5), got {}", t.delta_p)));
        }
        if t.eps_levels.first() != Some(&0.0) || t.eps_levels.iter().any(|e| !(*e >= 0.0 && e.is_finite())) {
            return Err(SerError::Config(
                "theory.eps_levels must be non-negative and start with 0".into(),
            ));
        }
        if t.eps_levels.windows(2).any(|w| w[1] <= w[0]) {
            return Err(SerError::Config("theory.eps_levels must be strictly increasing".into()));
        }
        if t.prompts == 0 {
            return Err(SerError::Config("theory.prompts must be >= 1".into()));
        }
        self.cost.validate()
    }

    /// The module configs with every seed filled in from `seed`.
    pub fn seeded(&self, seed: u64) -> Self {
        let s = StageSeeds::new(seed);
        let mut c = self.clone();
        c.seed = seed;
        c.world.seed = s.world;
        c.split.rng_seed = s.split;
        c.train.rng_seed = s.reward_model;
        c.ppo.rng_seed = s.ppo;
        c
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| SerError::Config(format!("cannot serialize config: {e}")))
    }

    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }

    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| SerError::Config(format!("invalid config: {}", e.message())))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| SerError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// `"default"` selects the built-in configuration.
    pub fn load(path: &str, overrides: &[String]) -> Result<Self> {
        let text = if path == "default" {
            String::new()
        } else {
            std::fs::read_to_string(Path::new(path)).map_err(|e| SerError::io(path, e))?
        };
        Self::from_toml_str(&text, overrides)
    }
}

/// Applies `a.b.c=value`. The value is read as a TOML literal when it parses
/// as one and as a bare string otherwise.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| SerError::Config(format!("override `{spec}` is not key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(SerError::Config(format!("override `{spec}` has an empty key")));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = keys.split_last().expect("non-empty path");
    let mut cur = table;
    for k in parents {
        let entry = cur
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| SerError::Config(format!("override `{spec}`: `{k}` is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_default() {
        assert_eq!(ExperimentConfig::from_toml_str("", &[]).unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn round_trip() {
        let cfg = ExperimentConfig::from_toml_str("", &["ser.tau_high=0.6".into(), "ppo.features=\"tabular\"".into()]).unwrap();
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text, &[]).unwrap(), cfg);
    }

    #[test]
    fn overrides() {
        let cfg = ExperimentConfig::from_toml_str(
            "[train]\nmargin = 0.3\n",
            &["train.epochs=3".into(), "ser.n_min_fraction=0".into(), "output_dir=out/x".into()],
        )
        .unwrap();
        assert_eq!(cfg.train.margin, 0.3);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.ser.n_min_fraction, 0.0);
        assert_eq!(cfg.output_dir, "out/x");
    }

    #[test]
    fn unknown_keys_rejected_by_name() {
        let err = ExperimentConfig::from_toml_str("[ser]\ntau_hgh = 0.6\n", &[]).unwrap_err();
        assert!(err.to_string().contains("tau_hgh"), "{err}");
        let err = ExperimentConfig::from_toml_str("", &["wrld.dim=3".into()]).unwrap_err();
        assert!(err.to_string().contains("wrld"), "{err}");
    }

    #[test]
    fn seeds_are_not_config_keys() {
        assert!(ExperimentConfig::from_toml_str("[world]\nseed = 3\n", &[]).is_err());
    }

    #[test]
    fn invalid_values_name_the_field() {
        let err = ExperimentConfig::from_toml_str("", &["split.noise_eta=0.6".into()]).unwrap_err();
        assert!(err.to_string().contains("split.noise_eta"), "{err}");
    }

    #[test]
    fn stage_seeds_differ_and_are_stable() {
        let a = StageSeeds::new(42);
        assert_eq!(a, StageSeeds::new(42));
        assert_ne!(a.world, a.split);
        assert_ne!(a, StageSeeds::new(43));
        let c = ExperimentConfig::default().seeded(7);
        assert_eq!(c.world.seed, StageSeeds::new(7).world);
    }
}
