//! Equivariant convolution network over point geometries.
//!
//! Each layer is a tensor-product convolution: for every neighbor pair and
//! every coupling path `(l_in, l_filter, l_out)`, the neighbor's feature block
//! is contracted with the filter `R(|r|) Y_{l_filter}(r̂)` through a real 3j
//! tensor. Path outputs are mixed per irrep together with a self-interaction
//! term, and a gate nonlinearity follows. A final linear readout maps to the
//! natural-parity ladder.
//!
//! All parameters live in one flat vector. The graph for a given structure is
//! built once and re-evaluated with new parameters and inputs.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Coupling, Entry, Graph, NodeId, ZERO_INDEX};
use crate::error::{Error, Result};
use crate::geometry::{norm, scale, sub, Vec3};
use crate::harmonics::{sh_values, SphereSignal};
use crate::irreps::{triangle, GroupElement, Representation, Wigner3jTable, MAX_DEGREE};
use crate::irreps::{GeometricTensor, Irrep, IrrepsSignature, Parity};
use crate::scenarios::Structure;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Edge {
    pub center: usize,
    pub neighbor: usize,
    /// `r_neighbor - r_center`, minimum image if periodic.
    pub displacement: Vec3,
}

/// All ordered pairs with `0 < |d| <= r_cut`, sorted by center then neighbor.
pub fn neighbor_list(structure: &Structure, r_cut: f64) -> Result<Vec<Edge>> {
    if !(r_cut > 0.0) {
        return Err(Error::Invalid(format!("cutoff {r_cut} must be positive")));
    }
    if let Some(min_len) = structure.min_lattice_length() {
        if r_cut >= 0.5 * min_len {
            return Err(Error::MinimumImage {
                cutoff: r_cut,
                bound: 0.5 * min_len,
            });
        }
    }
    let mut edges = Vec::new();
    for (i, ri) in structure.positions.iter().enumerate() {
        for (j, rj) in structure.positions.iter().enumerate() {
            if i == j {
                continue;
            }
            let d = structure.minimum_image(sub(*rj, *ri));
            let r = norm(d);
            if r > 0.0 && r <= r_cut {
                edges.push(Edge {
                    center: i,
                    neighbor: j,
                    displacement: d,
                });
            }
        }
    }
    Ok(edges)
}

/// Start of the cosine taper, as a fraction of the cutoff.
const TAPER_START: f64 = 0.8;

/// Gaussians centered at `k r_cut / B` (k = 1..B) of width `r_cut / B`, times
/// a cosine taper that is 1 below `0.8 r_cut` and reaches 0 at `r_cut`.
pub fn radial_basis(r: f64, count: usize, r_cut: f64) -> Result<Vec<f64>> {
    if !(r > 0.0 && r <= r_cut) {
        return Err(Error::RadiusOutOfRange { r, cutoff: r_cut });
    }
    let mut out = vec![0.0; count];
    radial_basis_into(r, r_cut, &mut out);
    Ok(out)
}

fn radial_basis_into(r: f64, r_cut: f64, out: &mut [f64]) {
    let b = out.len() as f64;
    let width = r_cut / b;
    let on = TAPER_START * r_cut;
    let taper = if r <= on {
        1.0
    } else {
        0.5 * (libm::cos(core::f64::consts::PI * (r - on) / (r_cut - on)) + 1.0)
    };
    for (k, o) in out.iter_mut().enumerate() {
        let x = (r - (k + 1) as f64 * width) / width;
        *o = libm::exp(-x * x) * taper;
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_mul: usize,
    pub lmax: u32,
    pub filter_lmax: u32,
    pub output_lmax: u32,
    pub radial_basis: usize,
    pub radial_hidden: usize,
    pub r_cut: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 3,
            hidden_mul: 4,
            lmax: 5,
            filter_lmax: 5,
            output_lmax: 5,
            radial_basis: 10,
            radial_hidden: 16,
            r_cut: 3.5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.hidden_mul == 0 || self.radial_basis == 0 || self.radial_hidden == 0 {
            return Err(Error::Invalid("layer count, multiplicity and radial sizes must be positive".into()));
        }
        if !(self.r_cut > 0.0 && self.r_cut.is_finite()) {
            return Err(Error::Invalid(format!("cutoff {}", self.r_cut)));
        }
        for l in [self.lmax, self.filter_lmax, self.output_lmax] {
            if l > MAX_DEGREE {
                return Err(Error::DegreeTooLarge(l, MAX_DEGREE));
            }
        }
        if self.output_lmax > self.lmax {
            return Err(Error::Invalid("output degree exceeds hidden degree".into()));
        }
        Ok(())
    }

    /// `hidden_mul` copies of every irrep up to `lmax`, both parities.
    pub fn hidden_signature(&self) -> IrrepsSignature {
        let mut e = Vec::new();
        for l in 0..=self.lmax {
            e.push((self.hidden_mul, Irrep::even(l)));
            e.push((self.hidden_mul, Irrep::odd(l)));
        }
        IrrepsSignature::new(e)
    }
}

/// One per-point linear term: `out[w] += scale Σ_v W[w, v] in[v]` over the
/// copies of one irrep.
#[derive(Debug, Clone, PartialEq)]
struct LinearTerm {
    in_off: usize,
    in_mul: usize,
    out_off: usize,
    out_mul: usize,
    dim: usize,
    weights: usize,
    scale: f64,
}

/// Equivariant linear map between per-point signatures: independent weight
/// matrices per irrep, biases on selected `0e` output entries.
#[derive(Debug, Clone, PartialEq)]
struct LinearMap {
    in_dim: usize,
    out_dim: usize,
    terms: Vec<LinearTerm>,
    /// `(component offset, count, parameter offset)`
    biases: Vec<(usize, usize, usize)>,
}

impl LinearMap {
    /// Allocates parameters from `*next`. `fan_in` gives the total number of
    /// input copies feeding each output irrep (sources may be split over
    /// several maps).
    fn new(input: &IrrepsSignature, output: &IrrepsSignature, fan_in: &dyn Fn(Irrep) -> usize, biased: &[bool], next: &mut usize) -> Self {
        let in_offsets = input.offsets();
        let out_offsets = output.offsets();
        let mut terms = Vec::new();
        let mut biases = Vec::new();
        for (oi, (mo, iro)) in output.entries().iter().enumerate() {
            for (ii, (mi, iri)) in input.entries().iter().enumerate() {
                if iri != iro {
                    continue;
                }
                let n = fan_in(*iro).max(1);
                terms.push(LinearTerm {
                    in_off: in_offsets[ii],
                    in_mul: *mi,
                    out_off: out_offsets[oi],
                    out_mul: *mo,
                    dim: iro.dim(),
                    weights: *next,
                    scale: 1.0 / libm::sqrt(n as f64),
                });
                *next += mo * mi;
            }
            if biased.get(oi).copied().unwrap_or(false) && *iro == Irrep::even(0) {
                biases.push((out_offsets[oi], *mo, *next));
                *next += mo;
            }
        }
        Self {
            in_dim: input.dim(),
            out_dim: output.dim(),
            terms,
            biases,
        }
    }

    fn coupling(&self, points: usize) -> Coupling {
        let mut c = Coupling::new(points * self.out_dim);
        for t in &self.terms {
            let mut entries = Vec::with_capacity(t.out_mul * t.in_mul * t.dim);
            for w in 0..t.out_mul {
                for v in 0..t.in_mul {
                    for m in 0..t.dim {
                        entries.push(Entry {
                            i: (w * t.in_mul + v) as u32,
                            j: (v * t.dim + m) as u32,
                            k: (w * t.dim + m) as u32,
                            c: t.scale,
                        });
                    }
                }
            }
            let p = c.add_pattern(entries);
            for pt in 0..points {
                c.add_block(t.weights, pt * self.in_dim + t.in_off, pt * self.out_dim + t.out_off, p, 1.0);
            }
        }
        c
    }

    fn bias_index(&self, points: usize) -> Option<Vec<u32>> {
        if self.biases.is_empty() {
            return None;
        }
        let mut idx = vec![ZERO_INDEX; points * self.out_dim];
        for pt in 0..points {
            for &(off, n, p) in &self.biases {
                for k in 0..n {
                    idx[pt * self.out_dim + off + k] = (p + k) as u32;
                }
            }
        }
        Some(idx)
    }

    fn attach(&self, g: &mut Graph, params: NodeId, x: NodeId, points: usize) -> Result<NodeId> {
        let lin = g.bilinear(params, x, Arc::new(self.coupling(points)))?;
        match self.bias_index(points) {
            Some(idx) => {
                let b = g.gather(params, Arc::new(idx))?;
                g.add(lin, b)
            }
            None => Ok(lin),
        }
    }
}

/// One coupling path of a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Path {
    /// Entry index in the layer input signature.
    pub input: usize,
    pub input_irrep: Irrep,
    pub filter: u32,
    pub output: Irrep,
    /// Copies carried (the input entry's multiplicity).
    pub mul: usize,
    radial_offset: usize,
    message_offset: usize,
}

/// Radial perceptron `B → hidden (tanh) → outputs`, no biases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RadialNet {
    pub basis: usize,
    pub hidden: usize,
    pub outputs: usize,
    w1: usize,
    w2: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub input: IrrepsSignature,
    /// Post-gate output signature.
    pub output: IrrepsSignature,
    /// Pre-gate signature: scalars, then gate scalars, then gated blocks.
    pub pre_gate: IrrepsSignature,
    pub message: IrrepsSignature,
    pub paths: Vec<Path>,
    pub radial: RadialNet,
    pub r_cut: f64,
    mix: LinearMap,
    self_mix: LinearMap,
    n_scalar_entries: usize,
    param_start: usize,
    param_end: usize,
}

impl Layer {
    /// Allocates parameters starting at `*next`.
    pub fn new(
        input: &IrrepsSignature,
        output: &IrrepsSignature,
        filter_lmax: u32,
        radial_basis: usize,
        radial_hidden: usize,
        r_cut: f64,
        next: &mut usize,
    ) -> Result<Self> {
        let param_start = *next;
        let scalars: Vec<(usize, Irrep)> = output.entries().iter().copied().filter(|(_, ir)| ir.is_scalar()).collect();
        let gated: Vec<(usize, Irrep)> = output.entries().iter().copied().filter(|(_, ir)| !ir.is_scalar()).collect();
        let n_gates: usize = gated.iter().map(|(m, _)| m).sum();
        let mut pre = scalars.clone();
        pre.push((n_gates, Irrep::even(0)));
        pre.extend(gated.iter().copied());
        let pre_gate = IrrepsSignature::new(pre);
        let n_scalar_entries = scalars.iter().filter(|(m, _)| *m > 0).count();

        let targets: Vec<Irrep> = pre_gate.entries().iter().map(|(_, ir)| *ir).collect();
        let mut raw = Vec::new();
        for (ii, (mul, ir)) in input.entries().iter().enumerate() {
            for lf in 0..=filter_lmax {
                let parity = ir.parity.product(Parity::natural(lf));
                for lo in ir.degree.abs_diff(lf)..=(ir.degree + lf) {
                    let out = Irrep::new(lo, parity);
                    if triangle(ir.degree, lf, lo) && targets.contains(&out) {
                        raw.push((out, ii, *ir, lf, *mul));
                    }
                }
            }
        }
        // message layout: grouped by output irrep, path order within a group
        raw.sort_by_key(|p| p.0);
        let mut msg_entries: Vec<(usize, Irrep)> = Vec::new();
        let mut paths = Vec::with_capacity(raw.len());
        let (mut radial_off, mut msg_off) = (0, 0);
        for (out, ii, iri, lf, mul) in raw {
            match msg_entries.last_mut() {
                Some((m, ir)) if *ir == out => *m += mul,
                _ => msg_entries.push((mul, out)),
            }
            paths.push(Path {
                input: ii,
                input_irrep: iri,
                filter: lf,
                output: out,
                mul,
                radial_offset: radial_off,
                message_offset: msg_off,
            });
            radial_off += mul;
            msg_off += mul * out.dim();
        }
        let message = IrrepsSignature::new(msg_entries);

        let w1 = *next;
        *next += radial_hidden * radial_basis;
        let w2 = *next;
        *next += radial_off * radial_hidden;
        let radial = RadialNet {
            basis: radial_basis,
            hidden: radial_hidden,
            outputs: radial_off,
            w1,
            w2,
        };

        let fan = |ir: Irrep| message.multiplicity(ir) + input.multiplicity(ir);
        let biased: Vec<bool> = pre_gate.entries().iter().map(|(_, ir)| *ir == Irrep::even(0)).collect();
        let mix = LinearMap::new(&message, &pre_gate, &fan, &biased, next);
        let self_mix = LinearMap::new(input, &pre_gate, &fan, &[], next);
        Ok(Self {
            input: input.clone(),
            output: output.clone(),
            pre_gate,
            message,
            paths,
            radial,
            r_cut,
            mix,
            self_mix,
            n_scalar_entries,
            param_start,
            param_end: *next,
        })
    }

    pub fn num_params(&self) -> usize {
        self.param_end - self.param_start
    }

    /// Parameter indices holding biases.
    pub fn bias_indices(&self) -> Vec<usize> {
        self.mix.biases.iter().flat_map(|&(_, n, p)| p..p + n).collect()
    }

    pub fn param_range(&self) -> core::ops::Range<usize> {
        self.param_start..self.param_end
    }

    /// Builds the layer on `x` (points × input dim) and returns the
    /// points × output dim node.
    pub fn attach(&self, g: &mut Graph, params: NodeId, x: NodeId, edges: &[Edge], points: usize, table: &Wigner3jTable) -> Result<NodeId> {
        if g.node_len(x) != points * self.input.dim() {
            return Err(Error::SignatureMismatch {
                expected: points * self.input.dim(),
                actual: g.node_len(x),
            });
        }
        let rb = &self.radial;
        let ne = edges.len();
        let mut basis = vec![0.0; ne * rb.basis];
        for (e, edge) in edges.iter().enumerate() {
            let r = norm(edge.displacement);
            if !(r > 0.0 && r <= self.r_cut) {
                return Err(Error::RadiusOutOfRange { r, cutoff: self.r_cut });
            }
            radial_basis_into(r, self.r_cut, &mut basis[e * rb.basis..(e + 1) * rb.basis]);
        }
        let basis = g.constant(basis);
        let mut c1 = Coupling::new(ne * rb.hidden);
        // only about two Gaussians overlap any radius; the basis norm is already O(1)
        let p1 = c1.add_pattern(Coupling::matvec_pattern(rb.hidden, rb.basis, 1.0));
        let mut c2 = Coupling::new(ne * rb.outputs);
        let p2 = c2.add_pattern(Coupling::matvec_pattern(rb.outputs, rb.hidden, 1.0 / libm::sqrt(rb.hidden as f64)));
        for e in 0..ne {
            c1.add_block(rb.w1, e * rb.basis, e * rb.hidden, p1, 1.0);
            c2.add_block(rb.w2, e * rb.hidden, e * rb.outputs, p2, 1.0);
        }
        let h = g.bilinear(params, basis, Arc::new(c1))?;
        let h = g.tanh(h);
        let radial = g.bilinear(params, h, Arc::new(c2))?;

        let d_in = self.input.dim();
        let d_msg = self.message.dim();
        let in_offsets = self.input.offsets();
        let avg_degree = if points == 0 { 1.0 } else { (ne as f64 / points as f64).max(1.0) };
        let norm_scale = 1.0 / libm::sqrt(avg_degree);
        let lf_max = self.paths.iter().map(|p| p.filter).max().unwrap_or(0);
        let mut conv = Coupling::new(points * d_msg);
        let mut y = vec![0.0; ((lf_max + 1) * (lf_max + 1)) as usize];
        for (e, edge) in edges.iter().enumerate() {
            let dir = scale(edge.displacement, 1.0 / norm(edge.displacement));
            sh_values(lf_max, dir, &mut y);
            for p in &self.paths {
                let (li, lf, lo) = (p.input_irrep.degree, p.filter, p.output.degree);
                let w3j = table.get(li, lf, lo)?;
                let (n_in, n_f, n_out) = (2 * li as usize + 1, 2 * lf as usize + 1, 2 * lo as usize + 1);
                let yf = &y[(lf * lf) as usize..(lf * lf) as usize + n_f];
                let norm_out = libm::sqrt(n_out as f64);
                let mut entries = Vec::new();
                for i in 0..n_in {
                    for k in 0..n_out {
                        let mut s = 0.0f64;
                        for (j, yj) in yf.iter().enumerate() {
                            s += w3j.get(i, j, k) * yj;
                        }
                        if s.abs() > 1e-15 {
                            entries.push(Entry {
                                i: 0,
                                j: i as u32,
                                k: k as u32,
                                c: s * norm_out,
                            });
                        }
                    }
                }
                if entries.is_empty() {
                    continue;
                }
                let pat = conv.add_pattern(entries);
                for u in 0..p.mul {
                    conv.add_block(
                        e * rb.outputs + p.radial_offset + u,
                        edge.neighbor * d_in + in_offsets[p.input] + u * n_in,
                        edge.center * d_msg + p.message_offset + u * n_out,
                        pat,
                        norm_scale,
                    );
                }
            }
        }
        let msg = g.bilinear(radial, x, Arc::new(conv))?;
        let mixed = self.mix.attach(g, params, msg, points)?;
        let own = self.self_mix.attach(g, params, x, points)?;
        let pre = g.add(mixed, own)?;
        self.gate(g, pre, points)
    }

    fn gate(&self, g: &mut Graph, pre: NodeId, points: usize) -> Result<NodeId> {
        let d_pre = self.pre_gate.dim();
        let d_out = self.output.dim();
        let entries = self.pre_gate.entries();
        let offsets = self.pre_gate.offsets();
        let n_scalar: usize = entries[..self.n_scalar_entries].iter().map(|(m, _)| m).sum();
        let gate_entry = self.n_scalar_entries;
        let gate_off = offsets.get(gate_entry).copied().unwrap_or(0);
        let has_gates = entries.get(gate_entry).is_some_and(|(_, ir)| *ir == Irrep::even(0)) && n_scalar < d_pre;
        let gated_start = if has_gates { gate_off + entries[gate_entry].0 } else { n_scalar };

        let mut s_idx = Vec::with_capacity(points * n_scalar);
        let mut v_idx = Vec::new();
        let mut gate_idx = Vec::new();
        for pt in 0..points {
            let base = pt * d_pre;
            s_idx.extend((0..n_scalar).map(|k| (base + k) as u32));
            let mut gate = 0;
            if has_gates {
                for (m, ir) in &entries[gate_entry + 1..] {
                    for _ in 0..*m {
                        for _ in 0..ir.dim() {
                            gate_idx.push((base + gate_off + gate) as u32);
                        }
                        gate += 1;
                    }
                }
                v_idx.extend((gated_start..d_pre).map(|k| (base + k) as u32));
            }
        }
        let s = g.gather(pre, Arc::new(s_idx))?;
        let s = g.tanh(s);
        let v = g.gather(pre, Arc::new(v_idx))?;
        let gates = g.gather(pre, Arc::new(gate_idx))?;
        let gates = g.sigmoid(gates);
        let gv = g.mul(gates, v)?;
        let both = g.concat(&[s, gv]);
        let n_gated = d_out - n_scalar;
        let mut perm = Vec::with_capacity(points * d_out);
        for pt in 0..points {
            perm.extend((0..n_scalar).map(|k| (pt * n_scalar + k) as u32));
            perm.extend((0..n_gated).map(|k| (points * n_scalar + pt * n_gated + k) as u32));
        }
        g.gather(both, Arc::new(perm))
    }

    /// Standalone evaluation on per-point features.
    pub fn forward(&self, params: &[f64], features: &[GeometricTensor], edges: &[Edge], table: &Wigner3jTable) -> Result<Vec<GeometricTensor>> {
        let mut g = Graph::new();
        let p = g.constant(params.to_vec());
        let mut flat = Vec::with_capacity(features.len() * self.input.dim());
        for f in features {
            if f.signature() != &self.input {
                return Err(Error::SignatureMismatch {
                    expected: self.input.dim(),
                    actual: f.signature().dim(),
                });
            }
            flat.extend_from_slice(f.coefficients());
        }
        let x = g.constant(flat);
        let out = self.attach(&mut g, p, x, edges, features.len(), table)?;
        g.forward()?;
        let d = self.output.dim();
        g.value(out)
            .chunks(d.max(1))
            .take(features.len())
            .map(|c| GeometricTensor::new(self.output.clone(), c.to_vec()))
            .collect()
    }
}

/// Species one-hot scalars followed by the order-parameter slot.
pub fn input_signature(num_species: usize, slot: &IrrepsSignature) -> IrrepsSignature {
    IrrepsSignature::new([(num_species, Irrep::even(0))]).concat(slot)
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub input: IrrepsSignature,
    pub output: IrrepsSignature,
    pub layers: Vec<Layer>,
    readout: LinearMap,
    pub params: Vec<f64>,
    pub seed: u64,
    table: Arc<Wigner3jTable>,
}

impl Model {
    /// Seeded initialization: weights standard normal (the `1/√fan-in`
    /// factor lives in the couplings), biases zero.
    pub fn new(config: &ModelConfig, input: &IrrepsSignature, seed: u64) -> Result<Self> {
        config.validate()?;
        let table = Wigner3jTable::new(config.lmax.max(config.filter_lmax).max(input.lmax()))?;
        let mut m = Self::with_table(config, input, seed, Arc::new(table))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut is_bias = vec![false; m.params.len()];
        for l in &m.layers {
            for &(_, n, p) in &l.mix.biases {
                is_bias[p..p + n].iter_mut().for_each(|b| *b = true);
            }
        }
        for &(_, n, p) in &m.readout.biases {
            is_bias[p..p + n].iter_mut().for_each(|b| *b = true);
        }
        for (w, bias) in m.params.iter_mut().zip(is_bias) {
            let z: f64 = StandardNormal.sample(&mut rng);
            *w = if bias { 0.0 } else { z };
        }
        Ok(m)
    }

    /// Zero parameters with an explicit coupling table.
    pub fn with_table(config: &ModelConfig, input: &IrrepsSignature, seed: u64, table: Arc<Wigner3jTable>) -> Result<Self> {
        config.validate()?;
        let hidden = config.hidden_signature();
        let last = IrrepsSignature::new((0..=config.output_lmax).map(|l| (config.hidden_mul, Irrep::natural(l))));
        let output = IrrepsSignature::natural_ladder(config.output_lmax);
        let mut next = 0;
        let mut layers = Vec::with_capacity(config.num_layers);
        let mut sig = input.clone();
        for k in 0..config.num_layers {
            let out = if k + 1 == config.num_layers { last.clone() } else { hidden.clone() };
            let layer = Layer::new(
                &sig,
                &out,
                config.filter_lmax,
                config.radial_basis,
                config.radial_hidden,
                config.r_cut,
                &mut next,
            )?;
            sig = layer.output.clone();
            layers.push(layer);
        }
        let fan = |ir: Irrep| sig.multiplicity(ir);
        let biased: Vec<bool> = output.entries().iter().map(|(_, ir)| *ir == Irrep::even(0)).collect();
        let readout = LinearMap::new(&sig, &output, &fan, &biased, &mut next);
        Ok(Self {
            config: config.clone(),
            input: input.clone(),
            output,
            layers,
            readout,
            params: vec![0.0; next],
            seed,
            table,
        })
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn table(&self) -> &Wigner3jTable {
        &self.table
    }

    /// Replaces the coupling table (used to load perturbed tables).
    pub fn set_table(&mut self, table: Wigner3jTable) {
        self.table = Arc::new(table);
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Shape(format!("{} parameters, model has {}", params.len(), self.params.len())));
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    /// Attaches the model to `input` (points × input dim); returns the
    /// parameter leaf and the points × output dim node.
    pub fn attach(&self, g: &mut Graph, structure: &Structure, input: NodeId) -> Result<(NodeId, NodeId)> {
        let points = structure.len();
        if g.node_len(input) != points * self.input.dim() {
            return Err(Error::SignatureMismatch {
                expected: points * self.input.dim(),
                actual: g.node_len(input),
            });
        }
        let edges = neighbor_list(structure, self.config.r_cut)?;
        let params = g.leaf(self.params.len());
        g.set(params, &self.params)?;
        let mut x = input;
        for layer in &self.layers {
            x = layer.attach(g, params, x, &edges, points, &self.table)?;
        }
        let out = self.readout.attach(g, params, x, points)?;
        Ok((params, out))
    }

    /// Graph with an input leaf, for repeated evaluation on one structure.
    pub fn build_graph(&self, structure: &Structure) -> Result<ModelGraph> {
        let mut graph = Graph::new();
        let input = graph.leaf(structure.len() * self.input.dim());
        let (params, output) = self.attach(&mut graph, structure, input)?;
        Ok(ModelGraph {
            graph,
            params,
            input,
            output,
            points: structure.len(),
            output_signature: self.output.clone(),
        })
    }

    pub fn forward(&self, structure: &Structure, inputs: &[GeometricTensor]) -> Result<Vec<SphereSignal>> {
        let mut mg = self.build_graph(structure)?;
        mg.evaluate(&self.input, inputs)
    }

    /// Per-point inputs: species one-hot plus optional slot values.
    pub fn inputs(&self, structure: &Structure, slot: Option<&[GeometricTensor]>) -> Result<Vec<GeometricTensor>> {
        let ns = structure.num_species();
        if self.input.entries().first() != Some(&(ns, Irrep::even(0))) {
            return Err(Error::Invalid(format!("model input {} does not start with {ns}x0e", self.input)));
        }
        let d = self.input.dim();
        let mut out = Vec::with_capacity(structure.len());
        for (i, &sp) in structure.species.iter().enumerate() {
            let mut c = vec![0.0; d];
            c[sp] = 1.0;
            if let Some(s) = slot {
                let t = &s[i];
                if t.signature().dim() != d - ns {
                    return Err(Error::SignatureMismatch {
                        expected: d - ns,
                        actual: t.signature().dim(),
                    });
                }
                c[ns..].copy_from_slice(t.coefficients());
            }
            out.push(GeometricTensor::new(self.input.clone(), c)?);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct ModelGraph {
    pub graph: Graph,
    pub params: NodeId,
    pub input: NodeId,
    pub output: NodeId,
    pub points: usize,
    pub output_signature: IrrepsSignature,
}

impl ModelGraph {
    pub fn evaluate(&mut self, input_sig: &IrrepsSignature, inputs: &[GeometricTensor]) -> Result<Vec<SphereSignal>> {
        if inputs.len() != self.points {
            return Err(Error::Shape(format!("{} inputs for {} points", inputs.len(), self.points)));
        }
        let mut flat = Vec::with_capacity(self.graph.node_len(self.input));
        for t in inputs {
            if t.signature() != input_sig {
                return Err(Error::SignatureMismatch {
                    expected: input_sig.dim(),
                    actual: t.signature().dim(),
                });
            }
            flat.extend_from_slice(t.coefficients());
        }
        self.graph.set(self.input, &flat)?;
        self.graph.forward()?;
        Ok(self.outputs())
    }

    pub fn outputs(&self) -> Vec<SphereSignal> {
        let d = self.output_signature.dim();
        let lmax = self.output_signature.lmax();
        self.graph
            .value(self.output)
            .chunks(d)
            .map(|c| SphereSignal::from_coefficients(lmax, c.to_vec()).expect("readout emits the natural ladder"))
            .collect()
    }
}

/// `‖f(gS, gx) − g f(S, x)‖ / ‖f(S, x)‖` over all output signals.
pub fn equivariance_error(model: &Model, structure: &Structure, inputs: &[GeometricTensor], g: &GroupElement) -> Result<f64> {
    let lmax = inputs.iter().map(|t| t.signature().lmax()).max().unwrap_or(0).max(model.output.lmax());
    let rep = Representation::new(*g, lmax);
    let out = model.forward(structure, inputs)?;
    let gx: Vec<_> = inputs.iter().map(|t| rep.apply(t)).collect();
    let out_g = model.forward(&structure.transformed(g)?, &gx)?;
    let (mut num, mut den) = (0.0, 0.0);
    for (a, b) in out.iter().zip(&out_g) {
        let ra = rep.apply(a.tensor());
        for (u, v) in ra.coefficients().iter().zip(b.coefficients()) {
            num += (u - v) * (u - v);
        }
        den += a.coefficients().iter().map(|v| v * v).sum::<f64>();
    }
    Ok(libm::sqrt(num) / libm::sqrt(den).max(f64::MIN_POSITIVE))
}
