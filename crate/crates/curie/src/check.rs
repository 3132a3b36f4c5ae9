//! The `check` suite: equivariance, Curie containment, the combination rule
//! and gradient equivariance, on a loaded checkpoint or a fresh model.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use curie_core::irreps::{random_group_element, GeometricTensor, GroupElement};
use curie_core::network::{equivariance_error, Model};
use curie_core::scenarios::Structure;
use curie_core::symmetry::{check_combination, check_curie, CandidateGroup};
use curie_core::training::{model_gradient_equivariance, Task};

use crate::checkpoint::Checkpoint;
use crate::config::{sub_seed, ExperimentConfig, Overrides};
use crate::output::OutputDir;
use crate::CliError;

#[derive(Debug, Clone, Serialize)]
pub struct CheckLine {
    pub name: String,
    pub passed: bool,
    /// Worst observed error (or violation count).
    pub worst: f64,
    pub tolerance: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckReport {
    pub task: String,
    pub group_order: usize,
    pub checks: Vec<CheckLine>,
    pub passed: bool,
}

fn core(e: curie_core::Error) -> CliError {
    CliError::Failed(e.to_string())
}

pub fn cmd_check(config_path: &Path, overrides: &Overrides) -> Result<CheckReport, CliError> {
    let cfg = ExperimentConfig::load(config_path, overrides)?;
    let report = check(&cfg)?;
    if let Some(dir) = &overrides.out {
        let mut out = OutputDir::create(dir)?;
        out.write_json("check.json", &report)?;
        out.finish()?;
    }
    Ok(report)
}

/// Mostly rotations, every other one with inversion, every fifth a
/// composition of two random elements.
fn element(rng: &mut ChaCha8Rng, k: usize) -> GroupElement {
    let g = random_group_element(rng, k % 2 == 1);
    if k % 5 == 4 {
        g.compose(&random_group_element(rng, true))
    } else {
        g
    }
}

fn random_slot(task: &Task, rng: &mut ChaCha8Rng) -> Result<Vec<GeometricTensor>, CliError> {
    let sig = task.slot.signature.clone();
    (0..task.structure.len())
        .map(|_| GeometricTensor::new(sig.clone(), (0..sig.dim()).map(|_| rng.random_range(-1.0..1.0)).collect()).map_err(core))
        .collect()
}

pub fn check(cfg: &ExperimentConfig) -> Result<CheckReport, CliError> {
    let task = cfg.task()?;
    let mcfg = cfg.model_config();
    let model = match &cfg.checkpoint {
        Some(path) => Checkpoint::load(path)?.into_model()?,
        None => Model::new(&mcfg, &task.input_signature(), sub_seed(cfg.seed, "weights")).map_err(|e| CliError::Validation(format!("model: {e}")))?,
    };
    if model.input != task.input_signature() {
        return Err(CliError::Validation(format!(
            "checkpoint input {} does not match task input {}",
            model.input,
            task.input_signature()
        )));
    }
    let c = &cfg.checks;
    let s = &task.structure;
    let group = CandidateGroup::for_structure(s).map_err(core)?;
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, "checks"));
    let mut rot = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, "rotations"));
    let mut checks = Vec::new();

    if c.equivariance {
        let mut worst = 0.0f64;
        for k in 0..c.samples {
            let inputs = model.inputs(s, Some(&random_slot(&task, &mut rng)?)).map_err(core)?;
            worst = worst.max(equivariance_error(&model, s, &inputs, &element(&mut rot, k)).map_err(core)?);
        }
        checks.push(CheckLine {
            name: "equivariance".into(),
            passed: worst < c.equivariance_tolerance,
            worst,
            tolerance: c.equivariance_tolerance,
            samples: c.samples,
        });
    }

    if c.curie {
        let mut violations = 0usize;
        for k in 0..c.curie_models.max(1) {
            let fresh;
            let m = if k == 0 {
                &model
            } else {
                fresh = Model::new(&model.config, &model.input, sub_seed(cfg.seed, &format!("curie-{k}"))).map_err(core)?;
                &fresh
            };
            let inputs = m.inputs(s, None).map_err(core)?;
            let f = |st: &Structure, x: &[GeometricTensor]| -> curie_core::Result<Vec<GeometricTensor>> {
                Ok(m.forward(st, x)?.into_iter().map(|sig| sig.into_tensor()).collect())
            };
            let r = check_curie(f, s, &inputs, &group, c.curie_input_tolerance, c.curie_output_tolerance).map_err(core)?;
            violations += r.violations.len();
        }
        checks.push(CheckLine {
            name: "curie".into(),
            passed: violations == 0,
            worst: violations as f64,
            tolerance: 0.0,
            samples: c.curie_models.max(1),
        });
    }

    if c.combination {
        let outputs = model.forward(s, &model.inputs(s, None).map_err(core)?).map_err(core)?;
        let mut failures = 0usize;
        for k in 0..c.samples {
            let i = k % s.len();
            let (a, b) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            if !check_combination(outputs[i].tensor(), task.targets[i].tensor(), a, b, &group, c.curie_output_tolerance).map_err(core)? {
                failures += 1;
            }
        }
        checks.push(CheckLine {
            name: "combination".into(),
            passed: failures == 0,
            worst: failures as f64,
            tolerance: 0.0,
            samples: c.samples,
        });
    }

    if c.gradient {
        let mut worst = 0.0f64;
        for k in 0..c.samples {
            let inputs = model.inputs(s, Some(&random_slot(&task, &mut rng)?)).map_err(core)?;
            let r = model_gradient_equivariance(&model, s, &inputs, &task.targets, &element(&mut rot, k)).map_err(core)?;
            worst = worst.max(r.error);
        }
        checks.push(CheckLine {
            name: "gradient_equivariance".into(),
            passed: worst < c.gradient_tolerance,
            worst,
            tolerance: c.gradient_tolerance,
            samples: c.samples,
        });
    }

    let passed = checks.iter().all(|l| l.passed);
    Ok(CheckReport {
        task: task.name.clone(),
        group_order: group.len(),
        checks,
        passed,
    })
}
