//! Brute-force symmetry of configurations against a finite candidate group.
//!
//! An element stabilizes a configuration when it maps every point onto a
//! point of the same species (up to a lattice translation when periodic) and
//! the transformed per-point tensor matches the tensor found there.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::geometry::{add, mat_mul, mat_vec, norm, sub, transpose, Mat3, Vec3};
use crate::irreps::{GeometricTensor, GroupElement, Representation};
use crate::scenarios::Structure;

/// A point operation followed by a Cartesian translation.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SymOp {
    pub element: GroupElement,
    pub translation: Vec3,
}

impl SymOp {
    pub fn apply(&self, r: Vec3) -> Vec3 {
        add(self.element.apply(r), self.translation)
    }
}

#[derive(Debug, Clone)]
pub struct CandidateGroup {
    ops: Vec<SymOp>,
    matrices: Vec<Mat3>,
    lattice: Option<Mat3>,
}

impl CandidateGroup {
    /// Validates closure, identity and inverses up front.
    pub fn new(ops: Vec<SymOp>, lattice: Option<Mat3>) -> Result<Self> {
        let matrices = ops.iter().map(|o| o.element.matrix()).collect();
        let g = Self { ops, matrices, lattice };
        g.validate()?;
        Ok(g)
    }

    /// The 48 signed permutation matrices (full cubic point group).
    pub fn cubic() -> Self {
        Self::new(
            cubic_elements()
                .into_iter()
                .map(|element| SymOp {
                    element,
                    translation: [0.0; 3],
                })
                .collect(),
            None,
        )
        .expect("cubic group is closed")
    }

    /// Cubic point operations composed with the 8 half-cell translations of
    /// `lattice` (384 candidates for the 2×2×2 supercell).
    pub fn cubic_with_half_translations(lattice: Mat3) -> Result<Self> {
        let lt = transpose(&lattice);
        let mut ops = Vec::with_capacity(384);
        for element in cubic_elements() {
            for k in 0..8 {
                let f = [(k & 1) as f64 * 0.5, ((k >> 1) & 1) as f64 * 0.5, ((k >> 2) & 1) as f64 * 0.5];
                ops.push(SymOp {
                    element,
                    translation: mat_vec(&lt, f),
                });
            }
        }
        Self::new(ops, Some(lattice))
    }

    /// Default probe set for a structure.
    pub fn for_structure(s: &Structure) -> Result<Self> {
        match s.lattice {
            Some(l) => Self::cubic_with_half_translations(l),
            None => Ok(Self::cubic()),
        }
    }

    pub fn ops(&self) -> &[SymOp] {
        &self.ops
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn lattice(&self) -> Option<Mat3> {
        self.lattice
    }

    fn reduce(&self, t: Vec3) -> Vec3 {
        match self.lattice.and_then(|l| crate::geometry::inverse(&transpose(&l)).map(|inv| (l, inv))) {
            Some((l, inv)) => {
                let f = mat_vec(&inv, t).map(|x| {
                    let y = x - libm::floor(x + 1e-9);
                    if y.abs() < 1e-9 {
                        0.0
                    } else {
                        y
                    }
                });
                mat_vec(&transpose(&l), f)
            }
            None => t,
        }
    }

    fn key(&self, m: &Mat3, t: Vec3) -> [i64; 12] {
        let t = self.reduce(t);
        let mut k = [0i64; 12];
        for i in 0..3 {
            for j in 0..3 {
                k[3 * i + j] = libm::round(m[i][j] * 1e6) as i64;
            }
            k[9 + i] = libm::round(t[i] * 1e6) as i64;
        }
        k
    }

    pub fn validate(&self) -> Result<()> {
        let mut index = BTreeMap::new();
        for (i, (op, m)) in self.ops.iter().zip(&self.matrices).enumerate() {
            if index.insert(self.key(m, op.translation), i).is_some() {
                return Err(Error::GroupNotClosed(format!("element {i} is a duplicate")));
            }
        }
        if !index.contains_key(&self.key(&crate::geometry::IDENTITY3, [0.0; 3])) {
            return Err(Error::GroupNotClosed("identity missing".into()));
        }
        for (a, (oa, ma)) in self.ops.iter().zip(&self.matrices).enumerate() {
            for (b, (ob, mb)) in self.ops.iter().zip(&self.matrices).enumerate() {
                // (Ma, ta)(Mb, tb) = (Ma Mb, Ma tb + ta)
                let m = mat_mul(ma, mb);
                let t = add(mat_vec(ma, ob.translation), oa.translation);
                if !index.contains_key(&self.key(&m, t)) {
                    return Err(Error::GroupNotClosed(format!("product of elements {a} and {b} is missing")));
                }
            }
        }
        Ok(())
    }
}

fn cubic_elements() -> Vec<GroupElement> {
    let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let mut out = Vec::with_capacity(48);
    for p in perms {
        for s in 0..8 {
            let mut m = [[0.0; 3]; 3];
            for i in 0..3 {
                m[i][p[i]] = if (s >> i) & 1 == 1 { -1.0 } else { 1.0 };
            }
            out.push(GroupElement::from_matrix(&m));
        }
    }
    // identity first
    out.sort_by_key(|g| (g.inversion, libm::round(g.angle() * 1e9) as i64));
    out
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StabilizerReport {
    pub elements: Vec<usize>,
    /// Residual of every listed element, same order.
    pub residuals: Vec<f64>,
    pub tolerance: f64,
    pub candidates: usize,
}

impl StabilizerReport {
    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.elements.binary_search(&i).is_ok()
    }

    pub fn is_subset_of(&self, other: &Self) -> bool {
        self.elements.iter().all(|e| other.contains(*e))
    }
}

/// How far `op` is from stabilizing the configuration; `None` if some point
/// has no partner at all.
pub fn op_residual(structure: &Structure, tensors: &[GeometricTensor], op: &SymOp, rep: Option<&Representation>, tol: f64) -> Option<f64> {
    let n = structure.len();
    let mut used = vec![false; n];
    let mut worst = 0.0f64;
    let mut buf = Vec::new();
    for i in 0..n {
        let p = op.apply(structure.positions[i]);
        let mut best: Option<(usize, f64)> = None;
        for j in 0..n {
            if used[j] || structure.species[j] != structure.species[i] {
                continue;
            }
            let d = norm(structure.minimum_image(sub(p, structure.positions[j])));
            if d <= tol && best.is_none_or(|(_, bd)| d < bd) {
                best = Some((j, d));
            }
        }
        let (j, d) = best?;
        used[j] = true;
        worst = worst.max(d);
        if let (Some(rep), false) = (rep, tensors.is_empty()) {
            let (ti, tj) = (&tensors[i], &tensors[j]);
            buf.clear();
            buf.resize(ti.coefficients().len(), 0.0);
            rep.apply_raw(ti.signature(), ti.coefficients(), &mut buf);
            for (a, b) in buf.iter().zip(tj.coefficients()) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    Some(worst)
}

/// Elements of `group` leaving `(structure, tensors)` invariant within `tol`.
/// `tensors` may be empty (geometry and species only).
pub fn stabilizer(structure: &Structure, tensors: &[GeometricTensor], group: &CandidateGroup, tol: f64) -> Result<StabilizerReport> {
    if !(tol > 0.0) {
        return Err(Error::Invalid(format!("tolerance {tol} must be positive")));
    }
    if !tensors.is_empty() && tensors.len() != structure.len() {
        return Err(Error::Shape(format!("{} tensors for {} points", tensors.len(), structure.len())));
    }
    let lmax = tensors.iter().map(|t| t.signature().lmax()).max().unwrap_or(0);
    let mut elements = Vec::new();
    let mut residuals = Vec::new();
    // one representation per point operation; translations share it
    let mut reps: BTreeMap<[i64; 4], Representation> = BTreeMap::new();
    for (k, op) in group.ops().iter().enumerate() {
        let key = [
            libm::round(op.element.rotation[0] * 1e9) as i64,
            libm::round(op.element.rotation[1] * 1e9) as i64,
            libm::round(op.element.rotation[2] * 1e9) as i64,
            op.element.inversion as i64,
        ];
        let rep = if tensors.is_empty() {
            None
        } else {
            Some(&*reps.entry(key).or_insert_with(|| Representation::new(op.element, lmax)))
        };
        if let Some(r) = op_residual(structure, tensors, op, rep, tol) {
            if r <= tol {
                elements.push(k);
                residuals.push(r);
            }
        }
    }
    Ok(StabilizerReport {
        elements,
        residuals,
        tolerance: tol,
        candidates: group.len(),
    })
}

/// Stabilizer of a single tensor placed at the origin.
pub fn tensor_stabilizer(t: &GeometricTensor, group: &CandidateGroup, tol: f64) -> Result<StabilizerReport> {
    let s = Structure::new(vec![[0.0; 3]], vec![0], vec!["T".into()], None)?;
    let point_ops = CandidateGroup {
        ops: group
            .ops
            .iter()
            .map(|o| SymOp {
                element: o.element,
                translation: [0.0; 3],
            })
            .collect(),
        matrices: group.matrices.clone(),
        lattice: None,
    };
    let full = stabilizer(&s, core::slice::from_ref(t), &point_ops, tol)?;
    // report indices of the original group; collapse duplicates from translations
    let mut elements = Vec::new();
    let mut residuals = Vec::new();
    for (e, r) in full.elements.iter().zip(&full.residuals) {
        if norm(group.ops[*e].translation) == 0.0 {
            elements.push(*e);
            residuals.push(*r);
        }
    }
    Ok(StabilizerReport {
        elements,
        residuals,
        tolerance: tol,
        candidates: group.len(),
    })
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CurieReport {
    pub input: StabilizerReport,
    pub output: StabilizerReport,
    /// Elements of Sym(input) missing from Sym(output).
    pub violations: Vec<usize>,
}

/// Sym(input) ⊆ Sym(f(input)). Inputs are compared with `tol_in`, outputs
/// with `tol_out`.
pub fn check_curie<F>(f: F, structure: &Structure, inputs: &[GeometricTensor], group: &CandidateGroup, tol_in: f64, tol_out: f64) -> Result<CurieReport>
where
    F: FnOnce(&Structure, &[GeometricTensor]) -> Result<Vec<GeometricTensor>>,
{
    let input = stabilizer(structure, inputs, group, tol_in)?;
    let outputs = f(structure, inputs)?;
    let output = stabilizer(structure, &outputs, group, tol_out)?;
    let violations = input.elements.iter().copied().filter(|e| !output.contains(*e)).collect();
    Ok(CurieReport { input, output, violations })
}

/// Sym(x) ∩ Sym(y) ⊆ Sym(αx + βy).
pub fn check_combination(x: &GeometricTensor, y: &GeometricTensor, alpha: f64, beta: f64, group: &CandidateGroup, tol: f64) -> Result<bool> {
    let z = x.linear_combination(alpha, y, beta)?;
    let sx = tensor_stabilizer(x, group, tol)?;
    let sy = tensor_stabilizer(y, group, tol)?;
    // the sum of two residuals ≤ tol each can reach (|α| + |β|) tol
    let sz = tensor_stabilizer(&z, group, tol * (alpha.abs() + beta.abs()).max(1.0))?;
    Ok(sx.elements.iter().filter(|e| sy.contains(**e)).all(|e| sz.contains(*e)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GradientEquivariance {
    pub error: f64,
    /// The reference gradient vanished, so `error` is absolute.
    pub absolute: bool,
}

/// Loss gradient with respect to its first argument.
pub type LossGradient<'a> = dyn FnMut(&[GeometricTensor], &[GeometricTensor]) -> Result<(f64, Vec<GeometricTensor>)> + 'a;

/// `‖∇L(gx; gy) − g∇L(x; y)‖ / ‖∇L(x; y)‖`.
pub fn check_gradient_equivariance(
    loss: &mut LossGradient<'_>,
    x: &[GeometricTensor],
    y: &[GeometricTensor],
    g: &GroupElement,
) -> Result<GradientEquivariance> {
    let lmax = x.iter().chain(y).map(|t| t.signature().lmax()).max().unwrap_or(0);
    let rep = Representation::new(*g, lmax);
    let gx: Vec<_> = x.iter().map(|t| rep.apply(t)).collect();
    let gy: Vec<_> = y.iter().map(|t| rep.apply(t)).collect();
    let (_, grad) = loss(x, y)?;
    let (_, grad_g) = loss(&gx, &gy)?;
    if grad.len() != grad_g.len() {
        return Err(Error::Shape("gradient lengths differ".into()));
    }
    let (mut num, mut den) = (0.0, 0.0);
    for (a, b) in grad.iter().zip(&grad_g) {
        let ra = rep.apply(a);
        for (u, v) in ra.coefficients().iter().zip(b.coefficients()) {
            num += (u - v) * (u - v);
        }
        den += a.coefficients().iter().map(|v| v * v).sum::<f64>();
    }
    let (num, den) = (libm::sqrt(num), libm::sqrt(den));
    if den == 0.0 {
        Ok(GradientEquivariance { error: num, absolute: true })
    } else {
        Ok(GradientEquivariance {
            error: num / den,
            absolute: false,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harmonics::project_points;
    use crate::irreps::IrrepsSignature;
    use crate::scenarios::{make_perovskite_structure, rectangle_vertices, square_vertices};
    use alloc::string::ToString;

    fn pts(p: Vec<Vec3>) -> Structure {
        let n = p.len();
        Structure::new(p, vec![0; n], vec!["P".to_string()], None).unwrap()
    }

    #[test]
    fn cubic_group_shape() {
        let g = CandidateGroup::cubic();
        assert_eq!(g.len(), 48);
        assert_eq!(g.ops()[0].element, GroupElement::identity());
        assert_eq!(g.ops().iter().filter(|o| o.element.inversion).count(), 24);
    }

    #[test]
    fn broken_group_is_rejected() {
        let mut ops = CandidateGroup::cubic().ops().to_vec();
        ops.truncate(47);
        assert!(matches!(CandidateGroup::new(ops, None), Err(Error::GroupNotClosed(_))));
    }

    #[test]
    fn point_at_origin_has_full_symmetry() {
        let s = pts(vec![[0.0; 3]]);
        let t = GeometricTensor::new(IrrepsSignature::new([(1, crate::irreps::Irrep::even(0))]), vec![1.0]).unwrap();
        assert_eq!(stabilizer(&s, &[t], &CandidateGroup::cubic(), 1e-6).unwrap().len(), 48);
    }

    #[test]
    fn square_and_rectangle_orders() {
        let g = CandidateGroup::cubic();
        assert_eq!(stabilizer(&pts(square_vertices()), &[], &g, 1e-6).unwrap().len(), 16);
        let rect = stabilizer(&pts(rectangle_vertices()), &[], &g, 1e-6).unwrap();
        assert_eq!(rect.len(), 8);
        assert!(rect.is_subset_of(&stabilizer(&pts(square_vertices()), &[], &g, 1e-6).unwrap()));
    }

    #[test]
    fn tolerance_monotone() {
        let mut p = rectangle_vertices();
        p[0][0] += 1e-4;
        let g = CandidateGroup::cubic();
        let s = pts(p);
        let mut last = 0;
        for tol in [1e-6, 1e-5, 1e-3, 1e-1] {
            let n = stabilizer(&s, &[], &g, tol).unwrap().len();
            assert!(n >= last);
            last = n;
        }
        assert_eq!(last, 8);
    }

    #[test]
    fn perovskite_parent_keeps_all_candidates() {
        let s = make_perovskite_structure();
        let g = CandidateGroup::for_structure(&s).unwrap();
        assert_eq!(g.len(), 384);
        assert_eq!(stabilizer(&s, &[], &g, 1e-6).unwrap().len(), 384);
    }

    #[test]
    fn combination_of_square_and_rectangle() {
        let g = CandidateGroup::cubic();
        let x = project_points(&square_vertices(), 5).into_tensor();
        let y = project_points(&rectangle_vertices(), 5).into_tensor();
        let sx = tensor_stabilizer(&x, &g, 1e-6).unwrap();
        let sy = tensor_stabilizer(&y, &g, 1e-6).unwrap();
        assert_eq!((sx.len(), sy.len()), (16, 8));
        assert!(check_combination(&x, &y, 1.0, 1.0, &g, 1e-6).unwrap());
        let zero = GeometricTensor::zeros(x.signature().clone());
        assert!(check_combination(&x, &zero, 2.5, 0.0, &g, 1e-6).unwrap());
    }
}
