//! Losses, the optimizer, plain training and order-parameter discovery.
//!
//! Discovery first trains the model with the order-parameter slot held at
//! zero until the loss plateaus, then alternates blocks of model steps and
//! input steps. Input steps follow the MSE gradient through the frozen model;
//! the L1 sparsity and degree penalties are applied as a proximal
//! soft-threshold after each step, so unused components land on exactly zero.

use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Graph, NodeId, ZERO_INDEX};
use crate::error::{Error, Result};
use crate::harmonics::SphereSignal;
use crate::irreps::{GeometricTensor, GroupElement, Irrep, IrrepsSignature, Parity, Representation};
use crate::network::{input_signature, Model};
use crate::scenarios::Structure;
use crate::symmetry::{stabilizer, CandidateGroup, GradientEquivariance, StabilizerReport};

/// How slot sites share order-parameter values.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Sharing {
    /// One value replicated to every slot site.
    Global,
    /// Independent values per slot site.
    PerSite,
    /// `groups[k]` is the shared value used by the k-th slot site; components
    /// with `mask[c] == false` are pinned to zero.
    Custom { groups: Vec<usize>, mask: Vec<bool> },
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct OrderParameterSlot {
    pub signature: IrrepsSignature,
    pub sharing: Sharing,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub name: String,
    pub structure: Structure,
    pub slot: OrderParameterSlot,
    pub targets: Vec<SphereSignal>,
    pub lambda_sparsity: f64,
    pub lambda_degree: f64,
}

impl Task {
    pub fn new(
        name: &str,
        structure: Structure,
        slot: OrderParameterSlot,
        targets: Vec<SphereSignal>,
        lambda_sparsity: f64,
        lambda_degree: f64,
    ) -> Result<Self> {
        if targets.len() != structure.len() {
            return Err(Error::Shape(format!("{} targets for {} points", targets.len(), structure.len())));
        }
        if let Some(t) = targets.iter().find(|t| t.lmax() != targets[0].lmax()) {
            return Err(Error::SignatureMismatch {
                expected: targets[0].coefficients().len(),
                actual: t.coefficients().len(),
            });
        }
        if !(lambda_sparsity >= 0.0 && lambda_degree >= 0.0) {
            return Err(Error::Invalid("penalty weights must be non-negative".into()));
        }
        let sites = structure.slot_sites().len();
        if let Sharing::Custom { groups, mask } = &slot.sharing {
            if groups.len() != sites {
                return Err(Error::Shape(format!("{} sharing groups for {sites} slot sites", groups.len())));
            }
            if mask.len() != slot.signature.dim() {
                return Err(Error::Shape(format!(
                    "mask of length {} for slot dimension {}",
                    mask.len(),
                    slot.signature.dim()
                )));
            }
            let n = groups.iter().max().map_or(0, |m| m + 1);
            if (0..n).any(|g| !groups.contains(&g)) {
                return Err(Error::Invalid("sharing groups must be numbered 0..n without gaps".into()));
            }
        }
        Ok(Self {
            name: name.into(),
            structure,
            slot,
            targets,
            lambda_sparsity,
            lambda_degree,
        })
    }

    pub fn with_slot(mut self, slot: OrderParameterSlot) -> Result<Self> {
        self.slot = slot;
        Self::new(
            &self.name.clone(),
            self.structure,
            self.slot,
            self.targets,
            self.lambda_sparsity,
            self.lambda_degree,
        )
    }

    pub fn input_signature(&self) -> IrrepsSignature {
        input_signature(self.structure.num_species(), &self.slot.signature)
    }

    pub fn num_groups(&self) -> usize {
        let sites = self.structure.slot_sites().len();
        match &self.slot.sharing {
            Sharing::Global => usize::from(sites > 0),
            Sharing::PerSite => sites,
            Sharing::Custom { groups, .. } => groups.iter().max().map_or(0, |m| m + 1),
        }
    }

    /// Length of the flat order-parameter vector.
    pub fn slot_len(&self) -> usize {
        self.num_groups() * self.slot.signature.dim()
    }

    fn group_of_site(&self, k: usize) -> usize {
        match &self.slot.sharing {
            Sharing::Global => 0,
            Sharing::PerSite => k,
            Sharing::Custom { groups, .. } => groups[k],
        }
    }

    fn component_free(&self, c: usize) -> bool {
        match &self.slot.sharing {
            Sharing::Custom { mask, .. } => mask[c],
            _ => true,
        }
    }

    /// For every point and every slot component, the index into the flat
    /// order-parameter vector, or `None` if pinned to zero.
    pub fn slot_index(&self) -> Vec<Vec<Option<usize>>> {
        let d = self.slot.signature.dim();
        let mut site = 0;
        let mut out = Vec::with_capacity(self.structure.len());
        for i in 0..self.structure.len() {
            if self.structure.site_mask[i] {
                let g = self.group_of_site(site);
                site += 1;
                out.push((0..d).map(|c| self.component_free(c).then_some(g * d + c)).collect());
            } else {
                out.push(vec![None; d]);
            }
        }
        out
    }

    /// Per-point slot tensors for a flat order-parameter vector.
    pub fn site_tensors(&self, values: &[f64]) -> Result<Vec<GeometricTensor>> {
        if values.len() != self.slot_len() {
            return Err(Error::Shape(format!(
                "{} order-parameter values, task expects {}",
                values.len(),
                self.slot_len()
            )));
        }
        self.slot_index()
            .into_iter()
            .map(|idx| GeometricTensor::new(self.slot.signature.clone(), idx.iter().map(|k| k.map_or(0.0, |k| values[k])).collect()))
            .collect()
    }

    /// Per-group tensors for a flat order-parameter vector.
    pub fn group_tensors(&self, values: &[f64]) -> Result<Vec<GeometricTensor>> {
        let d = self.slot.signature.dim();
        if values.len() != self.slot_len() {
            return Err(Error::Shape(format!(
                "{} order-parameter values, task expects {}",
                values.len(),
                self.slot_len()
            )));
        }
        values
            .chunks(d.max(1))
            .take(self.num_groups())
            .map(|c| GeometricTensor::new(self.slot.signature.clone(), c.to_vec()))
            .collect()
    }

    /// Per-component proximal weights `λ_s + λ_d L` (zero for scalars).
    pub fn penalty_weights(&self, with_degree: bool) -> Vec<f64> {
        let per: Vec<f64> = self
            .slot
            .signature
            .component_irreps()
            .iter()
            .map(|ir| {
                if ir.degree == 0 {
                    0.0
                } else {
                    self.lambda_sparsity + if with_degree { self.lambda_degree * ir.degree as f64 } else { 0.0 }
                }
            })
            .collect();
        (0..self.num_groups()).flat_map(|_| per.iter().copied()).collect()
    }

    pub fn target_mean_square(&self) -> f64 {
        let n: usize = self.targets.iter().map(|t| t.coefficients().len()).sum();
        self.targets.iter().flat_map(|t| t.coefficients()).map(|x| x * x).sum::<f64>() / n.max(1) as f64
    }
}

/// Mean over all points and components of the squared difference.
pub fn mse_loss(pred: &[SphereSignal], target: &[SphereSignal]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::Shape(format!("{} predictions for {} targets", pred.len(), target.len())));
    }
    let (mut s, mut n) = (0.0, 0usize);
    for (p, t) in pred.iter().zip(target) {
        if p.coefficients().len() != t.coefficients().len() {
            return Err(Error::SignatureMismatch {
                expected: t.coefficients().len(),
                actual: p.coefficients().len(),
            });
        }
        for (a, b) in p.coefficients().iter().zip(t.coefficients()) {
            s += (a - b) * (a - b);
        }
        n += t.coefficients().len();
    }
    if n == 0 {
        return Err(Error::Shape("empty signals".into()));
    }
    Ok(s / n as f64)
}

fn weighted_l1(params: &[GeometricTensor], lambda: f64, weight: impl Fn(Irrep) -> f64) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(Error::Invalid(format!("penalty weight {lambda}")));
    }
    let mut s = 0.0;
    for t in params {
        for (ir, v) in t.signature().component_irreps().iter().zip(t.coefficients()) {
            s += weight(*ir) * v.abs();
        }
    }
    Ok(lambda * s)
}

/// `λ Σ |v|` over components with L > 0.
pub fn sparsity_loss(params: &[GeometricTensor], lambda: f64) -> Result<f64> {
    weighted_l1(params, lambda, |ir| if ir.degree > 0 { 1.0 } else { 0.0 })
}

/// `λ Σ L |v|`.
pub fn degree_penalty(params: &[GeometricTensor], lambda: f64) -> Result<f64> {
    weighted_l1(params, lambda, |ir| ir.degree as f64)
}

/// Adam with optional proximal L1 step.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, x: &mut [f64], grad: &[f64]) {
        self.step_prox(x, grad, None);
    }

    /// After the Adam update, soft-thresholds `x_i` by `lr λ_i / (√v̂_i + ε)`.
    pub fn step_prox(&mut self, x: &mut [f64], grad: &[f64], lambda: Option<&[f64]>) {
        self.t += 1;
        let c1 = 1.0 - libm::pow(self.beta1, self.t as f64);
        let c2 = 1.0 - libm::pow(self.beta2, self.t as f64);
        for i in 0..x.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let denom = libm::sqrt(self.v[i] / c2) + self.eps;
            x[i] -= self.lr * (self.m[i] / c1) / denom;
            if let Some(l) = lambda {
                let thr = self.lr * l[i] / denom;
                x[i] = if x[i] > thr {
                    x[i] - thr
                } else if x[i] < -thr {
                    x[i] + thr
                } else {
                    0.0
                };
            }
        }
    }
}

/// Model attached to a task: species one-hot constants, a (possibly
/// shared) order-parameter leaf, and the MSE against the targets.
#[derive(Debug, Clone)]
pub struct TaskGraph {
    pub graph: Graph,
    pub params: NodeId,
    pub slot: NodeId,
    pub output: NodeId,
    pub mse: NodeId,
    points: usize,
    lmax: u32,
}

impl TaskGraph {
    pub fn new(model: &Model, task: &Task) -> Result<Self> {
        let expected = task.input_signature();
        if model.input != expected {
            return Err(Error::SignatureMismatch {
                expected: expected.dim(),
                actual: model.input.dim(),
            });
        }
        if model.output.dim() != task.targets[0].coefficients().len() {
            return Err(Error::SignatureMismatch {
                expected: task.targets[0].coefficients().len(),
                actual: model.output.dim(),
            });
        }
        let s = &task.structure;
        let (n, ns, d) = (s.len(), s.num_species(), task.slot.signature.dim());
        let mut g = Graph::new();
        let mut onehot = vec![0.0; n * ns];
        for (i, &sp) in s.species.iter().enumerate() {
            onehot[i * ns + sp] = 1.0;
        }
        let species = g.constant(onehot);
        let slot = g.leaf(task.slot_len());
        g.set(slot, &vec![0.0; task.slot_len()])?;
        let source = g.concat(&[species, slot]);
        let slot_index = task.slot_index();
        let mut idx = Vec::with_capacity(n * (ns + d));
        for (i, comps) in slot_index.iter().enumerate() {
            idx.extend((0..ns).map(|k| (i * ns + k) as u32));
            idx.extend(comps.iter().map(|c| c.map_or(ZERO_INDEX, |c| (n * ns + c) as u32)));
        }
        let input = g.gather(source, Arc::new(idx))?;
        let (params, output) = model.attach(&mut g, s, input)?;
        let target = g.constant(task.targets.iter().flat_map(|t| t.coefficients().iter().copied()).collect());
        let diff = g.sub(output, target)?;
        let sq = g.square(diff);
        let mse = g.mean(sq)?;
        Ok(Self {
            graph: g,
            params,
            slot,
            output,
            mse,
            points: n,
            lmax: model.output.lmax(),
        })
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        self.graph.set(self.params, p)
    }

    pub fn set_slot(&mut self, v: &[f64]) -> Result<()> {
        self.graph.set(self.slot, v)
    }

    /// MSE and its gradients with respect to (parameters, order parameters).
    pub fn evaluate(&mut self) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        self.graph.forward()?;
        let loss = self.graph.scalar(self.mse)?;
        let mut grads = self.graph.backward(self.mse)?;
        let gp = grads.take(self.params).unwrap_or_default();
        let gs = grads.take(self.slot).unwrap_or_default();
        Ok((loss, gp, gs))
    }

    pub fn mse(&mut self) -> Result<f64> {
        self.graph.forward()?;
        self.graph.scalar(self.mse)
    }

    pub fn outputs(&self) -> Vec<SphereSignal> {
        let v = self.graph.value(self.output);
        let d = v.len() / self.points.max(1);
        v.chunks(d.max(1))
            .map(|c| SphereSignal::from_coefficients(self.lmax, c.to_vec()).expect("natural ladder output"))
            .collect()
    }
}

/// MSE of `model(structure, inputs)` against `targets` and its gradient
/// with respect to every per-point input tensor.
pub fn input_gradient(model: &Model, structure: &Structure, inputs: &[GeometricTensor], targets: &[SphereSignal]) -> Result<(f64, Vec<GeometricTensor>)> {
    if inputs.len() != structure.len() || targets.len() != structure.len() {
        return Err(Error::Shape(format!(
            "{} inputs and {} targets for {} points",
            inputs.len(),
            targets.len(),
            structure.len()
        )));
    }
    let mut g = Graph::new();
    let x = g.leaf(structure.len() * model.input.dim());
    g.set(x, &inputs.iter().flat_map(|t| t.coefficients().iter().copied()).collect::<Vec<_>>())?;
    let (_, output) = model.attach(&mut g, structure, x)?;
    let target = g.constant(targets.iter().flat_map(|t| t.coefficients().iter().copied()).collect());
    let diff = g.sub(output, target)?;
    let sq = g.square(diff);
    let mse = g.mean(sq)?;
    g.forward()?;
    let loss = g.scalar(mse)?;
    let grad = g.backward(mse)?.take(x).unwrap_or_default();
    let tensors = grad
        .chunks(model.input.dim())
        .map(|c| GeometricTensor::new(model.input.clone(), c.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    Ok((loss, tensors))
}

/// `‖∇L(gS, gx; gy) − g∇L(S, x; y)‖ / ‖∇L(S, x; y)‖` for the model MSE.
pub fn model_gradient_equivariance(
    model: &Model,
    structure: &Structure,
    inputs: &[GeometricTensor],
    targets: &[SphereSignal],
    g: &GroupElement,
) -> Result<GradientEquivariance> {
    let lmax = model.input.lmax().max(model.output.lmax());
    let rep = Representation::new(*g, lmax);
    let (_, grad) = input_gradient(model, structure, inputs, targets)?;
    let gx: Vec<_> = inputs.iter().map(|t| rep.apply(t)).collect();
    let gy = targets
        .iter()
        .map(|t| SphereSignal::from_tensor(rep.apply(t.tensor())))
        .collect::<Result<Vec<_>>>()?;
    let (_, grad_g) = input_gradient(model, &structure.transformed(g)?, &gx, &gy)?;
    let (mut num, mut den) = (0.0, 0.0);
    for (a, b) in grad.iter().zip(&grad_g) {
        for (u, v) in rep.apply(a).coefficients().iter().zip(b.coefficients()) {
            num += (u - v) * (u - v);
        }
        den += a.coefficients().iter().map(|v| v * v).sum::<f64>();
    }
    let (num, den) = (libm::sqrt(num), libm::sqrt(den));
    Ok(if den == 0.0 {
        GradientEquivariance { error: num, absolute: true }
    } else {
        GradientEquivariance {
            error: num / den,
            absolute: false,
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            learning_rate: 1e-2,
        }
    }
}

/// Training stopped by the divergence guard; carries the history so far.
#[derive(Debug, Clone, PartialEq)]
pub struct Aborted {
    pub error: Error,
    pub model_history: Vec<f64>,
    pub input_history: Vec<f64>,
}

impl From<Error> for Aborted {
    fn from(error: Error) -> Self {
        Self {
            error,
            model_history: Vec::new(),
            input_history: Vec::new(),
        }
    }
}

/// An MSE this many times the targets' mean square counts as divergence.
pub const DIVERGENCE_FACTOR: f64 = 1e6;

fn check_finite(loss: f64, limit: f64, grad: &[f64], step: usize) -> Result<()> {
    if loss.is_finite() && loss <= limit && grad.iter().all(|g| g.is_finite()) {
        Ok(())
    } else {
        Err(Error::Diverged { step })
    }
}

/// Model-only training with the slot held at zero. Returns the loss before
/// each step. `model` keeps the last finite parameters on divergence.
pub fn train(model: &mut Model, task: &Task, config: &TrainConfig) -> core::result::Result<Vec<f64>, Aborted> {
    if !(config.learning_rate > 0.0) {
        return Err(Error::Invalid(format!("learning rate {}", config.learning_rate)).into());
    }
    let mut tg = TaskGraph::new(model, task)?;
    let limit = DIVERGENCE_FACTOR * task.target_mean_square();
    let mut adam = Adam::new(model.num_params(), config.learning_rate);
    let mut params = model.params.clone();
    let mut history = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        tg.set_params(&params)?;
        let (loss, gp, _) = tg.evaluate()?;
        if let Err(error) = check_finite(loss, limit, &gp, step) {
            return Err(Aborted {
                error,
                model_history: history,
                input_history: Vec::new(),
            });
        }
        history.push(loss);
        let prev = params.clone();
        adam.step(&mut params, &gp);
        if params.iter().any(|p| !p.is_finite()) {
            model.set_params(&prev)?;
            return Err(Aborted {
                error: Error::Diverged { step },
                model_history: history,
                input_history: Vec::new(),
            });
        }
        model.set_params(&params)?;
    }
    Ok(history)
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct DiscoveryConfig {
    pub model_learning_rate: f64,
    pub input_learning_rate: f64,
    /// Phase A stops when the best loss improved by less than
    /// `plateau_tolerance` (relative) over `plateau_window` steps.
    pub plateau_window: usize,
    pub plateau_tolerance: f64,
    pub max_phase_a_steps: usize,
    pub block_model_steps: usize,
    pub block_input_steps: usize,
    pub max_blocks: usize,
    /// Blocks run even if the loss is already below target.
    pub min_blocks: usize,
    /// Stop once the MSE falls below this.
    pub target_mse: f64,
    /// Divide the MSE by the target mean square in the objective, making the
    /// penalty weights independent of the displacement scale.
    pub normalize_mse: bool,
    pub degree_penalty: bool,
    pub stabilizer_tolerance: f64,
}

impl Default for DiscoveryConfig {
    fn default() -> Self {
        Self {
            model_learning_rate: 1e-2,
            input_learning_rate: 1e-2,
            plateau_window: 300,
            plateau_tolerance: 1e-4,
            max_phase_a_steps: 3000,
            block_model_steps: 200,
            block_input_steps: 200,
            max_blocks: 50,
            min_blocks: 0,
            target_mse: 1e-4,
            normalize_mse: true,
            degree_penalty: false,
            stabilizer_tolerance: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MagnitudeRow {
    pub site: usize,
    pub degree: u32,
    pub parity: Parity,
    pub m: i32,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DiscoveryResult {
    /// Flat order-parameter vector (one block per sharing group).
    pub order_parameters: Vec<f64>,
    /// Recovered tensor of every slot site, in site order.
    pub site_parameters: Vec<GeometricTensor>,
    /// Model-step objective per model step (phase A, then blocks).
    pub model_history: Vec<f64>,
    /// Objective per input step.
    pub input_history: Vec<f64>,
    pub phase_a_steps: usize,
    pub blocks: usize,
    pub final_mse: f64,
    pub magnitudes: Vec<MagnitudeRow>,
    pub stabilizer_before: StabilizerReport,
    pub stabilizer_after: StabilizerReport,
}

impl DiscoveryResult {
    /// Total |value| over components with L > 0.
    pub fn total_magnitude(&self) -> f64 {
        self.magnitudes.iter().filter(|r| r.degree > 0).map(|r| r.value.abs()).sum()
    }
}

fn magnitude_rows(task: &Task, tensors: &[GeometricTensor]) -> Vec<MagnitudeRow> {
    let mut rows = Vec::new();
    for (site, t) in task
        .structure
        .slot_sites()
        .into_iter()
        .zip(task.structure.slot_sites().iter().map(|&i| &tensors[i]))
    {
        let sig = t.signature();
        for (k, v) in t.coefficients().iter().enumerate() {
            let c = sig.locate(k).expect("index inside signature");
            let ir = sig.entries()[c.entry].1;
            rows.push(MagnitudeRow {
                site,
                degree: ir.degree,
                parity: ir.parity,
                m: c.m,
                value: *v,
            });
        }
    }
    rows
}

/// Phase A (model only, slot zero) then alternating model/input blocks.
pub fn discover_order_parameters(model: &mut Model, task: &Task, config: &DiscoveryConfig) -> core::result::Result<DiscoveryResult, Aborted> {
    if !(config.model_learning_rate > 0.0 && config.input_learning_rate > 0.0) {
        return Err(Error::Invalid("learning rates must be positive".into()).into());
    }
    if task.slot_len() == 0 {
        return Err(Error::Invalid("task has no order-parameter slot".into()).into());
    }
    let group = CandidateGroup::for_structure(&task.structure)?;
    let mut tg = TaskGraph::new(model, task)?;
    let limit = DIVERGENCE_FACTOR * task.target_mean_square();
    let scale = if config.normalize_mse {
        1.0 / task.target_mean_square().max(1e-300)
    } else {
        1.0
    };
    let lambda = task.penalty_weights(config.degree_penalty);
    let mut params = model.params.clone();
    let mut slot = vec![0.0; task.slot_len()];
    let mut model_adam = Adam::new(params.len(), config.model_learning_rate);
    let mut input_adam = Adam::new(slot.len(), config.input_learning_rate);
    let mut model_history = Vec::new();
    let mut input_history = Vec::new();

    let penalty = |slot: &[f64]| -> f64 { slot.iter().zip(&lambda).map(|(v, l)| v.abs() * l).sum() };
    let stab_tensors = |slot: &[f64]| task.site_tensors(slot);
    let stabilizer_before = stabilizer(&task.structure, &stab_tensors(&slot)?, &group, config.stabilizer_tolerance)?;

    macro_rules! bail {
        ($e:expr) => {
            match $e {
                Ok(v) => v,
                Err(error) => {
                    return Err(Aborted {
                        error,
                        model_history,
                        input_history,
                    })
                }
            }
        };
    }

    let model_step = |params: &mut Vec<f64>, slot: &[f64], tg: &mut TaskGraph, adam: &mut Adam, hist: &mut Vec<f64>| -> Result<f64> {
        tg.set_params(params)?;
        tg.set_slot(slot)?;
        let (mse, mut gp, _) = tg.evaluate()?;
        check_finite(mse, limit, &gp, hist.len())?;
        hist.push(mse * scale + penalty(slot));
        gp.iter_mut().for_each(|g| *g *= scale);
        adam.step(params, &gp);
        Ok(mse)
    };

    // phase A
    let mut best = f64::INFINITY;
    let mut best_at = Vec::new();
    let mut last_mse = f64::INFINITY;
    let mut phase_a_steps = 0;
    while phase_a_steps < config.max_phase_a_steps {
        let mse = bail!(model_step(&mut params, &slot, &mut tg, &mut model_adam, &mut model_history));
        last_mse = mse;
        phase_a_steps += 1;
        best = best.min(mse);
        best_at.push(best);
        if mse < config.target_mse {
            break;
        }
        let w = config.plateau_window;
        if best_at.len() > w {
            let before = best_at[best_at.len() - 1 - w];
            if before - best <= config.plateau_tolerance * before.abs() {
                break;
            }
        }
    }

    let mut blocks = 0;
    while blocks < config.max_blocks && (blocks < config.min_blocks || last_mse >= config.target_mse) {
        for _ in 0..config.block_model_steps {
            bail!(model_step(&mut params, &slot, &mut tg, &mut model_adam, &mut model_history));
        }
        bail!(tg.set_params(&params));
        for _ in 0..config.block_input_steps {
            bail!(tg.set_slot(&slot));
            let (mse, _, mut gs) = bail!(tg.evaluate());
            bail!(check_finite(mse, limit, &gs, input_history.len()));
            input_history.push(mse * scale + penalty(&slot));
            gs.iter_mut().for_each(|g| *g *= scale);
            input_adam.step_prox(&mut slot, &gs, Some(&lambda));
        }
        blocks += 1;
        bail!(tg.set_slot(&slot));
        last_mse = bail!(tg.mse());
    }
    bail!(model.set_params(&params));
    bail!(tg.set_params(&params));
    bail!(tg.set_slot(&slot));
    let final_mse = bail!(tg.mse());
    let sites = bail!(stab_tensors(&slot));
    let stabilizer_after = bail!(stabilizer(&task.structure, &sites, &group, config.stabilizer_tolerance));
    let magnitudes = magnitude_rows(task, &sites);
    let site_parameters = task.structure.slot_sites().iter().map(|&i| sites[i].clone()).collect();
    Ok(DiscoveryResult {
        order_parameters: slot,
        site_parameters,
        model_history,
        input_history,
        phase_a_steps,
        blocks,
        final_mse,
        magnitudes,
        stabilizer_before,
        stabilizer_after,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::irreps::Irrep;

    fn sig() -> IrrepsSignature {
        IrrepsSignature::new([(1, Irrep::even(0)), (1, Irrep::odd(1)), (1, Irrep::even(4))])
    }

    #[test]
    fn mse_examples() {
        let a = SphereSignal::from_coefficients(1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(mse_loss(&[a.clone()], &[a.clone()]).unwrap(), 0.0);
        let mut c = a.coefficients().to_vec();
        c[2] += 1.0;
        let b = SphereSignal::from_coefficients(1, c).unwrap();
        assert_eq!(mse_loss(&[a.clone(), a.clone()], &[b, a]).unwrap(), 1.0 / 8.0);
    }

    #[test]
    fn penalty_examples() {
        let zero = GeometricTensor::zeros(sig());
        assert_eq!(sparsity_loss(&[zero.clone()], 0.01).unwrap(), 0.0);
        assert_eq!(degree_penalty(&[zero], 0.01).unwrap(), 0.0);
        let mut c = vec![0.0; sig().dim()];
        c[0] = 7.0; // scalar, excluded
        c[2] = 0.5;
        let t = GeometricTensor::new(sig(), c.clone()).unwrap();
        assert!((sparsity_loss(&[t.clone()], 0.01).unwrap() - 0.005).abs() < 1e-15);
        c[2] = -0.5;
        let flipped = GeometricTensor::new(sig(), c.clone()).unwrap();
        assert_eq!(sparsity_loss(&[t], 0.01).unwrap(), sparsity_loss(&[flipped], 0.01).unwrap());
        let mut d = vec![0.0; sig().dim()];
        d[5] = 1.0;
        assert!((degree_penalty(&[GeometricTensor::new(sig(), d.clone()).unwrap()], 0.01).unwrap() - 0.04).abs() < 1e-15);
        let mut e = vec![0.0; sig().dim()];
        e[1] = 1.0;
        let l1 = degree_penalty(&[GeometricTensor::new(sig(), e).unwrap()], 0.01).unwrap();
        let l4 = degree_penalty(&[GeometricTensor::new(sig(), d).unwrap()], 0.01).unwrap();
        assert!((l4 / l1 - 4.0).abs() < 1e-12);
    }

    #[test]
    fn proximal_step_zeroes_small_gradients() {
        let mut adam = Adam::new(2, 0.1);
        let mut x = vec![0.0, 0.0];
        for _ in 0..50 {
            adam.step_prox(&mut x, &[0.005, -1.0], Some(&[0.01, 0.01]));
        }
        assert_eq!(x[0], 0.0);
        assert!(x[1] > 1.0);
    }
}
