//! The `run` pipeline: training or discovery, then result files.

use std::path::{Path, PathBuf};

use serde::Serialize;

use curie_core::harmonics::{peak_vectors, sample_signal, SphereGrid, SphereSignal};
use curie_core::network::Model;
use curie_core::symmetry::{stabilizer, CandidateGroup, StabilizerReport};
use curie_core::training::{discover_order_parameters, train, Aborted, MagnitudeRow, Task, TaskGraph};

use crate::checkpoint::Checkpoint;
use crate::config::{sub_seed, ExperimentConfig, Overrides, Pipeline};
use crate::output::OutputDir;
use crate::CliError;

#[derive(Debug, Clone, Serialize)]
pub struct History {
    pub model: Vec<f64>,
    pub input: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SiteResult {
    pub site: usize,
    /// Grid peaks of the output signal as `direction * value`.
    pub peaks: Vec<[f64; 3]>,
    pub target_peaks: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Results {
    pub version: u32,
    pub task: String,
    pub pipeline: Pipeline,
    pub seed: u64,
    pub weight_seed: u64,
    pub num_params: usize,
    pub final_mse: f64,
    pub relative_mse: f64,
    pub phase_a_steps: usize,
    pub blocks: usize,
    pub history: History,
    /// Flat order-parameter vector, one block per sharing group.
    pub order_parameters: Vec<f64>,
    pub magnitudes: Vec<MagnitudeRow>,
    pub stabilizer_structure: StabilizerReport,
    pub stabilizer_before: Option<StabilizerReport>,
    pub stabilizer_after: Option<StabilizerReport>,
    pub sites: Vec<SiteResult>,
}

#[derive(Debug, Clone, Serialize)]
struct PartialHistory<'a> {
    error: String,
    model: &'a [f64],
    input: &'a [f64],
}

pub struct RunOutcome {
    pub out_dir: PathBuf,
    pub results: Results,
}

fn core(e: curie_core::Error) -> CliError {
    CliError::Failed(e.to_string())
}

/// Parses and validates the config, then runs it. Nothing is written when
/// validation fails.
pub fn cmd_run(config_path: &Path, overrides: &Overrides) -> Result<RunOutcome, CliError> {
    let cfg = ExperimentConfig::load(config_path, overrides)?;
    let out = cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from("out"));
    run(&cfg, &out)
}

pub fn run(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunOutcome, CliError> {
    let task = cfg.task()?;
    let weight_seed = sub_seed(cfg.seed, "weights");
    let mut model = Model::new(&cfg.model_config(), &task.input_signature(), weight_seed).map_err(|e| CliError::Validation(format!("model: {e}")))?;
    let dcfg = cfg.discovery_config(&task);
    let mut out = OutputDir::create(out_dir)?;

    let outcome = match cfg.pipeline {
        Pipeline::Train => train(&mut model, &task, &cfg.training).map(|h| (h, None)),
        Pipeline::Discover => discover_order_parameters(&mut model, &task, &dcfg).map(|r| (Vec::new(), Some(r))),
    };
    let (train_history, discovery) = match outcome {
        Ok(v) => v,
        Err(Aborted {
            error,
            model_history,
            input_history,
        }) => {
            let partial = PartialHistory {
                error: error.to_string(),
                model: &model_history,
                input: &input_history,
            };
            out.write_json("history.json", &partial)?;
            out.write("model.ckpt", Checkpoint::from_model(&model).to_json().as_bytes())?;
            out.finish()?;
            return Err(match error {
                curie_core::Error::Diverged { step } => CliError::Diverged { step },
                e => CliError::Failed(e.to_string()),
            });
        }
    };

    let slot = discovery.as_ref().map_or_else(|| vec![0.0; task.slot_len()], |r| r.order_parameters.clone());
    let mut tg = TaskGraph::new(&model, &task).map_err(core)?;
    tg.set_slot(&slot).map_err(core)?;
    let final_mse = tg.mse().map_err(core)?;
    let outputs = tg.outputs();
    let group = CandidateGroup::for_structure(&task.structure).map_err(core)?;
    let stabilizer_structure = stabilizer(&task.structure, &[], &group, dcfg.stabilizer_tolerance).map_err(core)?;
    let grid = SphereGrid::new(cfg.grid_res);

    let sites = outputs
        .iter()
        .zip(&task.targets)
        .enumerate()
        .map(|(site, (o, t))| SiteResult {
            site,
            peaks: peak_vectors(o, &grid, 0.5),
            target_peaks: peak_vectors(t, &grid, 0.5),
        })
        .collect();
    let (history, phase_a_steps, blocks, magnitudes, before, after) = match discovery {
        Some(r) => (
            History {
                model: r.model_history,
                input: r.input_history,
            },
            r.phase_a_steps,
            r.blocks,
            r.magnitudes,
            Some(r.stabilizer_before),
            Some(r.stabilizer_after),
        ),
        None => (
            History {
                model: train_history,
                input: Vec::new(),
            },
            0,
            0,
            Vec::new(),
            None,
            None,
        ),
    };
    let results = Results {
        version: 1,
        task: task.name.clone(),
        pipeline: cfg.pipeline,
        seed: cfg.seed,
        weight_seed,
        num_params: model.num_params(),
        final_mse,
        relative_mse: final_mse / task.target_mean_square(),
        phase_a_steps,
        blocks,
        history,
        order_parameters: slot,
        magnitudes,
        stabilizer_structure,
        stabilizer_before: before,
        stabilizer_after: after,
        sites,
    };

    out.write_json("results.json", &results)?;
    out.write("magnitudes.csv", &magnitudes_csv(&results.magnitudes)?)?;
    for (i, (o, t)) in outputs.iter().zip(&task.targets).enumerate() {
        out.write(&format!("signals/site_{i:02}.csv"), &signal_csv(o, t, &grid)?)?;
    }
    out.write("model.ckpt", Checkpoint::from_model(&model).to_json().as_bytes())?;
    write_structure(&mut out, &task)?;
    out.write_json("config.json", cfg)?;
    let out_dir = out.finish()?;
    Ok(RunOutcome { out_dir, results })
}

fn write_structure(out: &mut OutputDir, task: &Task) -> Result<(), CliError> {
    out.write_json("structure.json", &task.structure)?;
    out.write("structure.xyz", task.structure.to_extended_xyz(&task.name).as_bytes())
}

fn magnitudes_csv(rows: &[MagnitudeRow]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["site", "degree", "parity", "m", "value"]).map_err(CliError::csv)?;
    for r in rows {
        w.write_record([
            r.site.to_string(),
            r.degree.to_string(),
            r.parity.suffix().to_string(),
            r.m.to_string(),
            format!("{:e}", r.value),
        ])
        .map_err(CliError::csv)?;
    }
    w.into_inner().map_err(|e| CliError::Io(e.to_string()))
}

/// One row per grid point: direction, quadrature weight, output and target.
fn signal_csv(output: &SphereSignal, target: &SphereSignal, grid: &SphereGrid) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["theta", "phi", "x", "y", "z", "weight", "output", "target"])
        .map_err(CliError::csv)?;
    let o = sample_signal(output, grid);
    let t = sample_signal(target, grid);
    for (k, ((d, vo), (_, vt))) in o.iter().zip(&t).enumerate() {
        let (theta, phi) = grid.angles(k);
        let row = [theta, phi, d[0], d[1], d[2], grid.weights()[k], *vo, *vt];
        w.write_record(row.iter().map(|v| format!("{v:e}"))).map_err(CliError::csv)?;
    }
    w.into_inner().map_err(|e| CliError::Io(e.to_string()))
}
