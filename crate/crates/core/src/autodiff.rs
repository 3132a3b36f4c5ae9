//! Reverse-mode differentiation over a small vector-valued operation set.
//!
//! A [`Graph`] is built once: nodes are appended in dependency order, so the
//! node list is already topologically sorted. Leaves are rebound and the
//! graph re-evaluated as many times as needed. Each node holds a flat `f64`
//! vector; the network lays out per-point features row-major inside it.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Marker for "no source" in gather indices: the output entry is zero.
pub const ZERO_INDEX: u32 = u32::MAX;

/// One nonzero of a coupling pattern: `out[k] += c * a[i] * b[j]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Entry {
    pub i: u32,
    pub j: u32,
    pub k: u32,
    pub c: f64,
}

/// A pattern placed at offsets into the two operands and the output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Block {
    pub a: u32,
    pub b: u32,
    pub out: u32,
    pub pattern: u32,
    pub scale: f64,
}

/// Constant third-order coefficient tensor for [`Graph::bilinear`], stored as
/// shared sparse patterns placed by blocks. The full tensor is the sum of all
/// blocks, so a block list with overlapping outputs accumulates.
#[derive(Debug, Clone, Default)]
pub struct Coupling {
    patterns: Vec<Vec<Entry>>,
    blocks: Vec<Block>,
    out_len: usize,
}

impl Coupling {
    pub fn new(out_len: usize) -> Self {
        Self {
            patterns: Vec::new(),
            blocks: Vec::new(),
            out_len,
        }
    }

    pub fn add_pattern(&mut self, entries: Vec<Entry>) -> u32 {
        self.patterns.push(entries);
        (self.patterns.len() - 1) as u32
    }

    pub fn add_block(&mut self, a: usize, b: usize, out: usize, pattern: u32, scale: f64) {
        self.blocks.push(Block {
            a: a as u32,
            b: b as u32,
            out: out as u32,
            pattern,
            scale,
        });
    }

    pub fn out_len(&self) -> usize {
        self.out_len
    }

    pub fn num_entries(&self) -> usize {
        self.blocks.iter().map(|b| self.patterns[b.pattern as usize].len()).sum()
    }

    /// Matrix-vector pattern: `out[r] = sum_c W[r, c] x[c]` with `W` row-major
    /// in operand `a` and `x` in operand `b`.
    pub fn matvec_pattern(rows: usize, cols: usize, scale: f64) -> Vec<Entry> {
        let mut e = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                e.push(Entry {
                    i: (r * cols + c) as u32,
                    j: c as u32,
                    k: r as u32,
                    c: scale,
                });
            }
        }
        e
    }

    /// Extent of every operand actually touched: `(a, b, out)`.
    fn extents(&self) -> (usize, usize, usize) {
        let mut pat_ext = vec![(0usize, 0usize, 0usize); self.patterns.len()];
        for (p, entries) in self.patterns.iter().enumerate() {
            for e in entries {
                let x = &mut pat_ext[p];
                x.0 = x.0.max(e.i as usize + 1);
                x.1 = x.1.max(e.j as usize + 1);
                x.2 = x.2.max(e.k as usize + 1);
            }
        }
        let mut ext = (0, 0, 0);
        for b in &self.blocks {
            let p = pat_ext[b.pattern as usize];
            if p.2 == 0 {
                continue;
            }
            ext.0 = ext.0.max(b.a as usize + p.0);
            ext.1 = ext.1.max(b.b as usize + p.1);
            ext.2 = ext.2.max(b.out as usize + p.2);
        }
        ext
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    Mul(NodeId, NodeId),
    Bilinear(NodeId, NodeId, Arc<Coupling>),
    Gather(NodeId, Arc<Vec<u32>>),
    ScatterSum(NodeId, Arc<Vec<u32>>),
    Concat(Vec<NodeId>),
    BlockNorm(NodeId, usize),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Abs(NodeId),
    Square(NodeId),
    Mean(NodeId),
    Sum(NodeId),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Vec<f64>,
    adjoint: Vec<f64>,
    requires_grad: bool,
    bound: bool,
}

/// Gradients of one root with respect to every leaf, indexed by leaf node.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: Vec<(NodeId, Vec<f64>)>,
}

impl Gradients {
    pub fn get(&self, leaf: NodeId) -> Option<&[f64]> {
        self.grads.iter().find(|(id, _)| *id == leaf).map(|(_, g)| g.as_slice())
    }

    pub fn take(&mut self, leaf: NodeId) -> Option<Vec<f64>> {
        let pos = self.grads.iter().position(|(id, _)| *id == leaf)?;
        Some(self.grads.swap_remove(pos).1)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    evaluated: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node_len(&self, id: NodeId) -> usize {
        self.nodes[id.0].value.len()
    }

    fn push(&mut self, op: Op, len: usize, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value: vec![0.0; len],
            adjoint: Vec::new(),
            requires_grad,
            bound: true,
        });
        self.evaluated = false;
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn same_len(&self, a: NodeId, b: NodeId, what: &str) -> Result<usize> {
        let (la, lb) = (self.node_len(a), self.node_len(b));
        if la != lb {
            return Err(Error::Shape(format!("{what}: operand lengths {la} and {lb}")));
        }
        Ok(la)
    }

    /// Differentiable input of length `len`; must be bound before `forward`.
    pub fn leaf(&mut self, len: usize) -> NodeId {
        let id = self.push(Op::Leaf, len, true);
        self.nodes[id.0].bound = false;
        id
    }

    pub fn constant(&mut self, values: Vec<f64>) -> NodeId {
        let len = values.len();
        let id = self.push(Op::Constant, len, false);
        self.nodes[id.0].value = values;
        id
    }

    /// Binds a leaf or replaces a constant.
    pub fn set(&mut self, id: NodeId, values: &[f64]) -> Result<()> {
        let node = &mut self.nodes[id.0];
        if !matches!(node.op, Op::Leaf | Op::Constant) {
            return Err(Error::Shape(format!("node {} is not a leaf", id.0)));
        }
        if node.value.len() != values.len() {
            return Err(Error::Shape(format!("leaf {} expects {} values, got {}", id.0, node.value.len(), values.len())));
        }
        node.value.copy_from_slice(values);
        node.bound = true;
        self.evaluated = false;
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let n = self.same_len(a, b, "add")?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Add(a, b), n, rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let rg = self.rg(a);
        self.push(Op::Scale(a, s), self.node_len(a), rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let n = self.same_len(a, b, "mul")?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Mul(a, b), n, rg))
    }

    /// `out[k] = sum C[i, j, k] a[i] b[j]` for the constant tensor `C`.
    pub fn bilinear(&mut self, a: NodeId, b: NodeId, coupling: Arc<Coupling>) -> Result<NodeId> {
        let (ea, eb, eo) = coupling.extents();
        if ea > self.node_len(a) || eb > self.node_len(b) || eo > coupling.out_len {
            return Err(Error::Shape(format!(
                "bilinear: coupling touches ({ea}, {eb}, {eo}) but operands are ({}, {}, {})",
                self.node_len(a),
                self.node_len(b),
                coupling.out_len
            )));
        }
        let rg = self.rg(a) || self.rg(b);
        let n = coupling.out_len;
        Ok(self.push(Op::Bilinear(a, b, coupling), n, rg))
    }

    /// `out[k] = a[index[k]]`, or zero where `index[k] == ZERO_INDEX`.
    pub fn gather(&mut self, a: NodeId, index: Arc<Vec<u32>>) -> Result<NodeId> {
        let n = self.node_len(a);
        if let Some(bad) = index.iter().find(|&&i| i != ZERO_INDEX && i as usize >= n) {
            return Err(Error::Shape(format!("gather: index {bad} out of range {n}")));
        }
        let rg = self.rg(a);
        let len = index.len();
        Ok(self.push(Op::Gather(a, index), len, rg))
    }

    /// `out[index[i]] += a[i]`, output of length `len`.
    pub fn scatter_sum(&mut self, a: NodeId, index: Arc<Vec<u32>>, len: usize) -> Result<NodeId> {
        if index.len() != self.node_len(a) {
            return Err(Error::Shape(format!("scatter: {} indices for {} values", index.len(), self.node_len(a))));
        }
        if let Some(bad) = index.iter().find(|&&i| i as usize >= len) {
            return Err(Error::Shape(format!("scatter: index {bad} out of range {len}")));
        }
        let rg = self.rg(a);
        Ok(self.push(Op::ScatterSum(a, index), len, rg))
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        let len = parts.iter().map(|p| self.node_len(*p)).sum();
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(Op::Concat(parts.to_vec()), len, rg)
    }

    /// Euclidean norm of consecutive blocks of `block` entries.
    pub fn block_norm(&mut self, a: NodeId, block: usize) -> Result<NodeId> {
        let n = self.node_len(a);
        if block == 0 || n % block != 0 {
            return Err(Error::Shape(format!("block norm: {n} not divisible by {block}")));
        }
        let rg = self.rg(a);
        Ok(self.push(Op::BlockNorm(a, block), n / block, rg))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let rg = self.rg(a);
        self.push(Op::Sigmoid(a), self.node_len(a), rg)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let rg = self.rg(a);
        self.push(Op::Tanh(a), self.node_len(a), rg)
    }

    /// Subgradient at zero is zero.
    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let rg = self.rg(a);
        self.push(Op::Abs(a), self.node_len(a), rg)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let rg = self.rg(a);
        self.push(Op::Square(a), self.node_len(a), rg)
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        if self.node_len(a) == 0 {
            return Err(Error::Shape("mean of an empty node".into()));
        }
        let rg = self.rg(a);
        Ok(self.push(Op::Mean(a), 1, rg))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let rg = self.rg(a);
        self.push(Op::Sum(a), 1, rg)
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> Result<f64> {
        match self.nodes[id.0].value.as_slice() {
            [x] => Ok(*x),
            v => Err(Error::Shape(format!("node {} is not scalar (length {})", id.0, v.len()))),
        }
    }

    pub fn leaves(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Leaf))
            .map(|(i, _)| NodeId(i))
            .collect()
    }

    /// Evaluates every node in order.
    pub fn forward(&mut self) -> Result<()> {
        for (i, n) in self.nodes.iter().enumerate() {
            if !n.bound {
                return Err(Error::UnboundLeaf(i));
            }
        }
        for idx in 0..self.nodes.len() {
            let (before, rest) = self.nodes.split_at_mut(idx);
            let node = &mut rest[0];
            let v = |id: NodeId| -> &[f64] { &before[id.0].value };
            let out = &mut node.value;
            match &node.op {
                Op::Leaf | Op::Constant => {}
                Op::Add(a, b) => {
                    for ((o, x), y) in out.iter_mut().zip(v(*a)).zip(v(*b)) {
                        *o = x + y;
                    }
                }
                Op::Scale(a, s) => {
                    for (o, x) in out.iter_mut().zip(v(*a)) {
                        *o = s * x;
                    }
                }
                Op::Mul(a, b) => {
                    for ((o, x), y) in out.iter_mut().zip(v(*a)).zip(v(*b)) {
                        *o = x * y;
                    }
                }
                Op::Bilinear(a, b, c) => {
                    out.iter_mut().for_each(|o| *o = 0.0);
                    let (av, bv) = (v(*a), v(*b));
                    for blk in &c.blocks {
                        let (ao, bo, oo) = (blk.a as usize, blk.b as usize, blk.out as usize);
                        for e in &c.patterns[blk.pattern as usize] {
                            out[oo + e.k as usize] += blk.scale * e.c * av[ao + e.i as usize] * bv[bo + e.j as usize];
                        }
                    }
                }
                Op::Gather(a, index) => {
                    let av = v(*a);
                    for (o, &i) in out.iter_mut().zip(index.iter()) {
                        *o = if i == ZERO_INDEX { 0.0 } else { av[i as usize] };
                    }
                }
                Op::ScatterSum(a, index) => {
                    out.iter_mut().for_each(|o| *o = 0.0);
                    for (x, &i) in v(*a).iter().zip(index.iter()) {
                        out[i as usize] += x;
                    }
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let pv = v(*p);
                        out[off..off + pv.len()].copy_from_slice(pv);
                        off += pv.len();
                    }
                }
                Op::BlockNorm(a, block) => {
                    for (o, chunk) in out.iter_mut().zip(v(*a).chunks(*block)) {
                        *o = libm::sqrt(chunk.iter().map(|x| x * x).sum());
                    }
                }
                Op::Sigmoid(a) => {
                    for (o, x) in out.iter_mut().zip(v(*a)) {
                        *o = sigmoid(*x);
                    }
                }
                Op::Tanh(a) => {
                    for (o, x) in out.iter_mut().zip(v(*a)) {
                        *o = libm::tanh(*x);
                    }
                }
                Op::Abs(a) => {
                    for (o, x) in out.iter_mut().zip(v(*a)) {
                        *o = x.abs();
                    }
                }
                Op::Square(a) => {
                    for (o, x) in out.iter_mut().zip(v(*a)) {
                        *o = x * x;
                    }
                }
                Op::Mean(a) => {
                    let av = v(*a);
                    out[0] = av.iter().sum::<f64>() / av.len() as f64;
                }
                Op::Sum(a) => {
                    out[0] = v(*a).iter().sum();
                }
            }
        }
        self.evaluated = true;
        Ok(())
    }

    /// Binds leaves, evaluates, and returns the scalar `root`.
    pub fn evaluate(&mut self, root: NodeId, bindings: &[(NodeId, &[f64])]) -> Result<f64> {
        for (id, vals) in bindings {
            self.set(*id, vals)?;
        }
        self.forward()?;
        self.scalar(root)
    }

    /// Gradients of the scalar `root` with respect to all leaves.
    pub fn backward(&mut self, root: NodeId) -> Result<Gradients> {
        if !self.evaluated {
            return Err(Error::NotEvaluated);
        }
        self.scalar(root)?;
        for n in self.nodes.iter_mut().take(root.0 + 1) {
            if n.requires_grad {
                n.adjoint.clear();
                n.adjoint.resize(n.value.len(), 0.0);
            }
        }
        self.nodes[root.0].adjoint[0] = 1.0;
        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let (before, rest) = self.nodes.split_at_mut(idx);
            let node = &rest[0];
            let g = &node.adjoint;
            if g.iter().all(|x| *x == 0.0) {
                continue;
            }
            match &node.op {
                Op::Leaf | Op::Constant => {}
                Op::Add(a, b) => {
                    for id in [a, b] {
                        if let Some(adj) = adjoint_mut(before, *id) {
                            adj.iter_mut().zip(g).for_each(|(d, x)| *d += x);
                        }
                    }
                }
                Op::Scale(a, s) => {
                    if let Some(adj) = adjoint_mut(before, *a) {
                        adj.iter_mut().zip(g).for_each(|(d, x)| *d += s * x);
                    }
                }
                Op::Mul(a, b) => {
                    let av = before[a.0].value.clone();
                    let bv = before[b.0].value.clone();
                    if let Some(adj) = adjoint_mut(before, *a) {
                        for ((d, x), y) in adj.iter_mut().zip(g).zip(&bv) {
                            *d += x * y;
                        }
                    }
                    if let Some(adj) = adjoint_mut(before, *b) {
                        for ((d, x), y) in adj.iter_mut().zip(g).zip(&av) {
                            *d += x * y;
                        }
                    }
                }
                Op::Bilinear(a, b, c) => {
                    let (ra, rb) = (before[a.0].requires_grad, before[b.0].requires_grad);
                    if a == b {
                        // a symmetric use of one operand
                        let av = before[a.0].value.clone();
                        let mut da = vec![0.0; av.len()];
                        for blk in &c.blocks {
                            let (ao, bo, oo) = (blk.a as usize, blk.b as usize, blk.out as usize);
                            for e in &c.patterns[blk.pattern as usize] {
                                let w = blk.scale * e.c * g[oo + e.k as usize];
                                da[ao + e.i as usize] += w * av[bo + e.j as usize];
                                da[bo + e.j as usize] += w * av[ao + e.i as usize];
                            }
                        }
                        if let Some(adj) = adjoint_mut(before, *a) {
                            adj.iter_mut().zip(&da).for_each(|(d, x)| *d += x);
                        }
                        continue;
                    }
                    let (lo, hi) = if a.0 < b.0 { (a.0, b.0) } else { (b.0, a.0) };
                    let (left, right) = before.split_at_mut(hi);
                    let (na, nb) = if a.0 < b.0 {
                        (&mut left[lo], &mut right[0])
                    } else {
                        (&mut right[0], &mut left[lo])
                    };
                    let (av, bv) = (&na.value, &nb.value);
                    let mut ga = if ra { Some(core::mem::take(&mut na.adjoint)) } else { None };
                    let mut gb = if rb { Some(core::mem::take(&mut nb.adjoint)) } else { None };
                    for blk in &c.blocks {
                        let (ao, bo, oo) = (blk.a as usize, blk.b as usize, blk.out as usize);
                        for e in &c.patterns[blk.pattern as usize] {
                            let w = blk.scale * e.c * g[oo + e.k as usize];
                            if w == 0.0 {
                                continue;
                            }
                            if let Some(ga) = ga.as_mut() {
                                ga[ao + e.i as usize] += w * bv[bo + e.j as usize];
                            }
                            if let Some(gb) = gb.as_mut() {
                                gb[bo + e.j as usize] += w * av[ao + e.i as usize];
                            }
                        }
                    }
                    if let Some(ga) = ga {
                        na.adjoint = ga;
                    }
                    if let Some(gb) = gb {
                        nb.adjoint = gb;
                    }
                }
                Op::Gather(a, index) => {
                    if let Some(adj) = adjoint_mut(before, *a) {
                        for (x, &i) in g.iter().zip(index.iter()) {
                            if i != ZERO_INDEX {
                                adj[i as usize] += x;
                            }
                        }
                    }
                }
                Op::ScatterSum(a, index) => {
                    if let Some(adj) = adjoint_mut(before, *a) {
                        for (d, &i) in adj.iter_mut().zip(index.iter()) {
                            *d += g[i as usize];
                        }
                    }
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let len = before[p.0].value.len();
                        if let Some(adj) = adjoint_mut(before, *p) {
                            adj.iter_mut().zip(&g[off..off + len]).for_each(|(d, x)| *d += x);
                        }
                        off += len;
                    }
                }
                Op::BlockNorm(a, block) => {
                    let av = before[a.0].value.clone();
                    let out = &node.value;
                    if let Some(adj) = adjoint_mut(before, *a) {
                        for (k, chunk) in adj.chunks_mut(*block).enumerate() {
                            if out[k] == 0.0 {
                                continue;
                            }
                            for (j, d) in chunk.iter_mut().enumerate() {
                                *d += g[k] * av[k * block + j] / out[k];
                            }
                        }
                    }
                }
                Op::Sigmoid(a) => {
                    let out = &node.value;
                    if let Some(adj) = adjoint_mut(before, *a) {
                        for ((d, x), s) in adj.iter_mut().zip(g).zip(out) {
                            *d += x * s * (1.0 - s);
                        }
                    }
                }
                Op::Tanh(a) => {
                    let out = &node.value;
                    if let Some(adj) = adjoint_mut(before, *a) {
                        for ((d, x), t) in adj.iter_mut().zip(g).zip(out) {
                            *d += x * (1.0 - t * t);
                        }
                    }
                }
                Op::Abs(a) => {
                    let av = before[a.0].value.clone();
                    if let Some(adj) = adjoint_mut(before, *a) {
                        for ((d, x), y) in adj.iter_mut().zip(g).zip(&av) {
                            let s = if *y > 0.0 {
                                1.0
                            } else if *y < 0.0 {
                                -1.0
                            } else {
                                0.0
                            };
                            *d += x * s;
                        }
                    }
                }
                Op::Square(a) => {
                    let av = before[a.0].value.clone();
                    if let Some(adj) = adjoint_mut(before, *a) {
                        for ((d, x), y) in adj.iter_mut().zip(g).zip(&av) {
                            *d += 2.0 * x * y;
                        }
                    }
                }
                Op::Mean(a) => {
                    let n = before[a.0].value.len() as f64;
                    let s = g[0] / n;
                    if let Some(adj) = adjoint_mut(before, *a) {
                        adj.iter_mut().for_each(|d| *d += s);
                    }
                }
                Op::Sum(a) => {
                    let s = g[0];
                    if let Some(adj) = adjoint_mut(before, *a) {
                        adj.iter_mut().for_each(|d| *d += s);
                    }
                }
            }
        }
        let grads = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Leaf))
            .map(|(i, n)| {
                let g = if i <= root.0 && n.adjoint.len() == n.value.len() {
                    n.adjoint.clone()
                } else {
                    vec![0.0; n.value.len()]
                };
                (NodeId(i), g)
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn adjoint_mut(nodes: &mut [Node], id: NodeId) -> Option<&mut Vec<f64>> {
    let n = &mut nodes[id.0];
    if n.requires_grad {
        Some(&mut n.adjoint)
    } else {
        None
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// Worst relative error between `backward` and five-point central differences over
/// `n_coords` random coordinates of `leaf` (denominator `max(|a|, |b|, 1e-12)`).
/// Leaves the graph evaluated at the original point.
pub fn grad_check<R: Rng + ?Sized>(graph: &mut Graph, root: NodeId, leaf: NodeId, n_coords: usize, step: f64, rng: &mut R) -> Result<f64> {
    if !(step > 0.0) {
        return Err(Error::Invalid(format!("finite-difference step {step}")));
    }
    graph.forward()?;
    let analytic = graph
        .backward(root)?
        .take(leaf)
        .ok_or(Error::Invalid(format!("node {} is not a leaf", leaf.0)))?;
    let base = graph.value(leaf).to_vec();
    if base.is_empty() {
        return Ok(0.0);
    }
    let mut x = base.clone();
    let mut worst = 0.0f64;
    for _ in 0..n_coords {
        let k = rng.random_range(0..base.len());
        let mut f = |dx: f64| -> Result<f64> {
            x[k] = base[k] + dx;
            graph.set(leaf, &x)?;
            graph.forward()?;
            graph.scalar(root)
        };
        let numeric = (8.0 * (f(step)? - f(-step)?) - (f(2.0 * step)? - f(-2.0 * step)?)) / (12.0 * step);
        x[k] = base[k];
        let a = analytic[k];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
        worst = worst.max(err);
    }
    graph.set(leaf, &base)?;
    graph.forward()?;
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn product_value_and_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(1);
        let y = g.leaf(1);
        let p = g.mul(x, y).unwrap();
        let s = g.sum(p);
        assert_eq!(g.evaluate(s, &[(x, &[3.0]), (y, &[4.0])]).unwrap(), 12.0);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[4.0]);
        assert_eq!(grads.get(y).unwrap(), &[3.0]);
    }

    #[test]
    fn mse_of_identical_operands_is_zero() {
        let mut g = Graph::new();
        let x = g.leaf(3);
        let d = g.sub(x, x).unwrap();
        let sq = g.square(d);
        let m = g.mean(sq).unwrap();
        assert_eq!(g.evaluate(m, &[(x, &[1.0, -2.0, 5.0])]).unwrap(), 0.0);
    }

    #[test]
    fn mse_gradient_closed_form() {
        let mut g = Graph::new();
        let pred = g.leaf(4);
        let target = g.constant(vec![1.0, 0.0, -1.0, 2.0]);
        let d = g.sub(pred, target).unwrap();
        let sq = g.square(d);
        let m = g.mean(sq).unwrap();
        let p = [0.5, 0.25, 1.0, 2.0];
        g.evaluate(m, &[(pred, &p)]).unwrap();
        let grads = g.backward(m).unwrap();
        let t = [1.0, 0.0, -1.0, 2.0];
        for k in 0..4 {
            assert!((grads.get(pred).unwrap()[k] - 2.0 * (p[k] - t[k]) / 4.0).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_before_forward_fails() {
        let mut g = Graph::new();
        let x = g.leaf(1);
        let s = g.sum(x);
        assert_eq!(g.backward(s).unwrap_err(), Error::NotEvaluated);
        assert_eq!(g.forward().unwrap_err(), Error::UnboundLeaf(0));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(2);
        let y = g.leaf(3);
        assert!(matches!(g.add(x, y), Err(Error::Shape(_))));
        let mut c = Coupling::new(1);
        let p = c.add_pattern(vec![Entry { i: 5, j: 0, k: 0, c: 1.0 }]);
        c.add_block(0, 0, 0, p, 1.0);
        assert!(matches!(g.bilinear(x, y, Arc::new(c)), Err(Error::Shape(_))));
    }

    #[test]
    fn abs_subgradient_at_zero() {
        let mut g = Graph::new();
        let x = g.leaf(3);
        let a = g.abs(x);
        let s = g.sum(a);
        g.evaluate(s, &[(x, &[0.0, -2.0, 3.0])]).unwrap();
        assert_eq!(g.backward(s).unwrap().get(x).unwrap(), &[0.0, -1.0, 1.0]);
    }

    #[test]
    fn dead_leaf_has_exactly_zero_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(2);
        let unused = g.leaf(3);
        let s = g.square(x);
        let m = g.sum(s);
        g.evaluate(m, &[(x, &[1.0, 2.0]), (unused, &[1.0, 1.0, 1.0])]).unwrap();
        assert_eq!(g.backward(m).unwrap().get(unused).unwrap(), &[0.0, 0.0, 0.0]);
    }

    fn nonlinear_graph() -> (Graph, NodeId, NodeId, NodeId) {
        let mut g = Graph::new();
        let x = g.leaf(6);
        let w = g.leaf(4);
        let mut c = Coupling::new(4);
        let pat = c.add_pattern(Coupling::matvec_pattern(2, 3, 0.7));
        c.add_block(0, 0, 0, pat, 1.0);
        c.add_block(0, 3, 2, pat, -1.3);
        let c = Arc::new(c);
        let wx = g.leaf(6);
        let lin = g.bilinear(wx, x, c).unwrap();
        let gate = g.sigmoid(lin);
        let h = g.tanh(lin);
        let gh = g.mul(gate, h).unwrap();
        let hw = g.mul(gh, w).unwrap();
        let nrm = g.block_norm(hw, 2).unwrap();
        let total = g.sum(nrm);
        g.set(x, &[0.3, -0.2, 0.9, 1.1, -0.4, 0.25]).unwrap();
        g.set(w, &[0.5, 1.5, -0.7, 0.2]).unwrap();
        g.set(wx, &[0.1, 0.2, -0.3, 0.4, 0.5, -0.6]).unwrap();
        (g, total, x, wx)
    }

    #[test]
    fn gate_graph_matches_finite_differences() {
        let (mut g, total, x, wx) = nonlinear_graph();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(grad_check(&mut g, total, x, 20, 1e-5, &mut rng).unwrap() < 1e-5);
        assert!(grad_check(&mut g, total, wx, 20, 1e-5, &mut rng).unwrap() < 1e-5);
    }

    #[test]
    fn linear_graph_has_exact_adjoint() {
        let mut g = Graph::new();
        let x = g.leaf(5);
        let idx = Arc::new(alloc::vec![4, 0, ZERO_INDEX, 2, 2]);
        let gathered = g.gather(x, idx).unwrap();
        let sc = g.scatter_sum(gathered, Arc::new(alloc::vec![0, 1, 1, 0, 2]), 3).unwrap();
        let cc = g.concat(&[sc, x]);
        let s2 = g.scale(cc, 3.0);
        let m = g.mean(s2).unwrap();
        g.set(x, &[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(grad_check(&mut g, m, x, 10, 1e-3, &mut rng).unwrap() < 1e-10);
    }

    #[test]
    fn gradients_are_linear_in_the_loss() {
        let (mut g, total, x, _) = nonlinear_graph();
        let sq = g.square(x);
        let l2 = g.sum(sq);
        let a = g.scale(total, 0.3);
        let b = g.scale(l2, -2.0);
        let comb = g.add(a, b).unwrap();
        g.forward().unwrap();
        let g1 = g.backward(total).unwrap().take(x).unwrap();
        let g2 = g.backward(l2).unwrap().take(x).unwrap();
        let gc = g.backward(comb).unwrap().take(x).unwrap();
        for k in 0..6 {
            assert!((gc[k] - (0.3 * g1[k] - 2.0 * g2[k])).abs() < 1e-12);
        }
    }

    #[test]
    fn repeated_evaluation_is_bitwise_identical() {
        let (mut g, total, x, _) = nonlinear_graph();
        g.forward().unwrap();
        let v1 = g.scalar(total).unwrap();
        let d1 = g.backward(total).unwrap().take(x).unwrap();
        g.forward().unwrap();
        let v2 = g.scalar(total).unwrap();
        let d2 = g.backward(total).unwrap().take(x).unwrap();
        assert_eq!(v1.to_bits(), v2.to_bits());
        assert!(d1.iter().zip(&d2).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
