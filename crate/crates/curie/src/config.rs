//! Experiment configuration. Parsed and validated in full before anything
//! is computed or written.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use curie_core::network::ModelConfig;
use curie_core::scenarios::{full_slot, make_perovskite_task, make_square_rect_task, restricted_slot, Deformation, TiltPattern, TiltSpec, TARGET_LMAX};
use curie_core::training::{DiscoveryConfig, OrderParameterSlot, Task, TrainConfig};

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub scenario: ScenarioConfig,
    /// Defaults depend on the scenario (see [`ExperimentConfig::model_config`]).
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub pipeline: Pipeline,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub discovery: DiscoveryConfig,
    /// Overrides `discovery.target_mse` with this fraction of the targets'
    /// mean square.
    #[serde(default)]
    pub relative_target_mse: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "default_grid_res")]
    pub grid_res: usize,
    #[serde(default)]
    pub checks: CheckConfig,
    /// Checkpoint for `check`; relative paths resolve against the config file.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

fn default_grid_res() -> usize {
    24
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    Train,
    #[default]
    Discover,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "snake_case")]
pub enum SlotChoice {
    /// Every degree up to the target ladder, both parities.
    #[default]
    Full,
    /// `1e + 1o + 2e + 2o`.
    Restricted,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScenarioConfig {
    SquareToRect {
        #[serde(default)]
        slot: SlotChoice,
    },
    RectToSquare {
        #[serde(default)]
        slot: SlotChoice,
    },
    Perovskite {
        #[serde(default = "default_pattern")]
        pattern: TiltPattern,
        #[serde(default = "default_theta")]
        theta_a: f64,
        #[serde(default = "default_theta")]
        theta_b: f64,
        /// Tie the two checkerboard sublattices and drop the first 1e component.
        #[serde(default)]
        constrained: bool,
    },
}

fn default_pattern() -> TiltPattern {
    TiltPattern::APlusBMinusBMinus
}

fn default_theta() -> f64 {
    0.1
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct CheckConfig {
    pub equivariance: bool,
    pub curie: bool,
    pub combination: bool,
    pub gradient: bool,
    /// Random group elements per check.
    pub samples: usize,
    /// Random-weight models for the Curie check (the loaded model counts as one).
    pub curie_models: usize,
    pub equivariance_tolerance: f64,
    pub gradient_tolerance: f64,
    pub curie_input_tolerance: f64,
    pub curie_output_tolerance: f64,
}

impl Default for CheckConfig {
    fn default() -> Self {
        Self {
            equivariance: true,
            curie: true,
            combination: true,
            gradient: true,
            samples: 20,
            curie_models: 3,
            equivariance_tolerance: 1e-8,
            gradient_tolerance: 1e-8,
            curie_input_tolerance: 1e-6,
            curie_output_tolerance: 1e-3,
        }
    }
}

/// Command-line overrides applied after parsing.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub grid_res: Option<usize>,
}

/// Named sub-seed: first eight bytes of `sha256(seed || name)`.
pub fn sub_seed(seed: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        if let Some(out) = &overrides.out {
            cfg.output_dir = Some(out.clone());
        }
        if let Some(seed) = overrides.seed {
            cfg.seed = seed;
        }
        if let Some(n) = overrides.grid_res {
            cfg.grid_res = n;
        }
        if let Some(ck) = &cfg.checkpoint {
            if ck.is_relative() {
                cfg.checkpoint = Some(path.parent().unwrap_or(Path::new(".")).join(ck));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Validation(m));
        if self.version != SCHEMA_VERSION {
            return bad(format!("unsupported config version {} (expected {SCHEMA_VERSION})", self.version));
        }
        if !(4..=512).contains(&self.grid_res) {
            return bad(format!("grid_res {} outside 4..=512", self.grid_res));
        }
        self.model_config().validate().map_err(|e| CliError::Validation(format!("model: {e}")))?;
        if let ScenarioConfig::Perovskite { pattern, theta_a, theta_b, .. } = &self.scenario {
            TiltSpec::new(*pattern, *theta_a, *theta_b)
                .validate()
                .map_err(|e| CliError::Validation(format!("scenario: {e}")))?;
        }
        if let Some(r) = self.relative_target_mse {
            if !(r > 0.0 && r.is_finite()) {
                return bad(format!("relative_target_mse {r} must be positive"));
            }
        }
        let t = &self.training;
        if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
            return bad(format!("training.learning_rate {} must be positive", t.learning_rate));
        }
        let d = &self.discovery;
        for (name, v) in [
            ("model_learning_rate", d.model_learning_rate),
            ("input_learning_rate", d.input_learning_rate),
            ("stabilizer_tolerance", d.stabilizer_tolerance),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("discovery.{name} {v} must be positive"));
            }
        }
        if self.checks.samples == 0 {
            return bad("checks.samples must be at least 1".into());
        }
        Ok(())
    }

    /// Explicit model section, or the scenario default. The perovskite uses
    /// a cutoff that keeps only the B–X bonds of the 2×2×2 cell.
    pub fn model_config(&self) -> ModelConfig {
        self.model.clone().unwrap_or_else(|| match self.scenario {
            ScenarioConfig::Perovskite { .. } => ModelConfig {
                r_cut: 0.6,
                ..ModelConfig::default()
            },
            _ => ModelConfig::default(),
        })
    }

    pub fn task(&self) -> Result<Task, CliError> {
        let v = |e: curie_core::Error| CliError::Validation(format!("scenario: {e}"));
        let with = |task: Task, slot: SlotChoice| -> Result<Task, CliError> {
            let signature = match slot {
                SlotChoice::Full => full_slot(TARGET_LMAX),
                SlotChoice::Restricted => restricted_slot(),
            };
            let sharing = task.slot.sharing.clone();
            task.with_slot(OrderParameterSlot { signature, sharing }).map_err(v)
        };
        match &self.scenario {
            ScenarioConfig::SquareToRect { slot } => with(make_square_rect_task(Deformation::SquareToRect).map_err(v)?, *slot),
            ScenarioConfig::RectToSquare { slot } => with(make_square_rect_task(Deformation::RectToSquare).map_err(v)?, *slot),
            ScenarioConfig::Perovskite {
                pattern,
                theta_a,
                theta_b,
                constrained,
            } => make_perovskite_task(&TiltSpec::new(*pattern, *theta_a, *theta_b), *constrained).map_err(v),
        }
    }

    pub fn discovery_config(&self, task: &Task) -> DiscoveryConfig {
        let mut d = self.discovery.clone();
        if let Some(r) = self.relative_target_mse {
            d.target_mse = r * task.target_mean_square();
        }
        d
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_parses() {
        let c = ExperimentConfig::from_json(r#"{"version": 1, "scenario": {"kind": "square_to_rect"}}"#).unwrap();
        assert_eq!(c.pipeline, Pipeline::Discover);
        assert_eq!(c.scenario, ScenarioConfig::SquareToRect { slot: SlotChoice::Full });
        assert_eq!(c.model_config().r_cut, 3.5);
    }

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        for text in [
            r#"{"version": 1, "scenario": {"kind": "square_to_rect"}, "extra": 1}"#,
            r#"{"version": 1, "scenario": {"kind": "square_to_rect", "slott": "full"}}"#,
            r#"{"version": 1, "scenario": {"kind": "square_to_rect"}, "model": {"layers": 2}}"#,
            r#"{"version": 1, "scenario": {"kind": "square_to_rect"}, "discovery": {"lr": 2}}"#,
            r#"{"version": 1, "scenario": {"kind": "hexagon"}}"#,
        ] {
            assert!(matches!(ExperimentConfig::from_json(text), Err(CliError::Validation(_))), "{text}");
        }
    }

    #[test]
    fn version_and_ranges_are_checked() {
        assert!(ExperimentConfig::from_json(r#"{"version": 2, "scenario": {"kind": "square_to_rect"}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"version": 1, "scenario": {"kind": "perovskite", "theta_a": 0.5}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"version": 1, "scenario": {"kind": "square_to_rect"}, "grid_res": 2}"#).is_err());
    }

    #[test]
    fn sub_seeds_are_distinct_and_stable() {
        assert_ne!(sub_seed(1, "weights"), sub_seed(1, "rotations"));
        assert_ne!(sub_seed(1, "weights"), sub_seed(2, "weights"));
        assert_eq!(sub_seed(7, "checks"), sub_seed(7, "checks"));
    }

    #[test]
    fn perovskite_defaults_to_short_cutoff() {
        let c = ExperimentConfig::from_json(r#"{"version": 1, "scenario": {"kind": "perovskite", "pattern": "a+b-b-"}}"#).unwrap();
        assert_eq!(c.model_config().r_cut, 0.6);
        assert_eq!(c.task().unwrap().name, "perovskite_pnma");
    }
}
