//! The two experiment families: a square deformed into a rectangle (and
//! back), and octahedral tilting in a 2×2×2 cubic perovskite supercell.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::geometry::{add, cross, inverse, mat_vec, norm, scale, sub, transpose, Mat3, Vec3};
use crate::harmonics::{project_points, SphereSignal};
use crate::irreps::{GroupElement, Irrep, IrrepsSignature, Parity};
use crate::training::{OrderParameterSlot, Sharing, Task};

/// Output ladder degree used for every target signal.
pub const TARGET_LMAX: u32 = 5;
pub const LAMBDA_SPARSITY: f64 = 1e-3;
pub const LAMBDA_DEGREE: f64 = 5e-4;

/// A finite or periodic arrangement of labeled points.
///
/// `lattice` rows are the lattice vectors. Periodic positions are kept
/// reduced to the cell.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Structure {
    pub positions: Vec<Vec3>,
    pub species: Vec<usize>,
    pub species_names: Vec<String>,
    pub lattice: Option<Mat3>,
    /// Sites that carry an order-parameter slot.
    pub site_mask: Vec<bool>,
}

impl Structure {
    pub fn new(positions: Vec<Vec3>, species: Vec<usize>, species_names: Vec<String>, lattice: Option<Mat3>) -> Result<Self> {
        if positions.len() != species.len() {
            return Err(Error::Shape(format!("{} positions but {} species labels", positions.len(), species.len())));
        }
        if positions.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::Invalid("non-finite position".into()));
        }
        if let Some(&s) = species.iter().find(|&&s| s >= species_names.len()) {
            return Err(Error::Invalid(format!("species index {s} has no name")));
        }
        let n = positions.len();
        let mut s = Self {
            positions,
            species,
            species_names,
            lattice,
            site_mask: vec![false; n],
        };
        if let Some(lat) = lattice {
            if inverse(&lat).is_none() {
                return Err(Error::Invalid("singular lattice".into()));
            }
            for i in 0..n {
                s.positions[i] = s.wrap(s.positions[i]);
            }
        }
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn num_species(&self) -> usize {
        self.species_names.len()
    }

    pub fn with_site_mask(mut self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.len() {
            return Err(Error::Shape(format!("site mask of length {} for {} sites", mask.len(), self.len())));
        }
        self.site_mask = mask;
        Ok(self)
    }

    pub fn slot_sites(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.site_mask[i]).collect()
    }

    /// Fractional coordinates (periodic structures only).
    pub fn fractional(&self, r: Vec3) -> Option<Vec3> {
        let lat = self.lattice?;
        // r = f · L  (rows are lattice vectors)
        let inv_t = inverse(&transpose(&lat))?;
        Some(mat_vec(&inv_t, r))
    }

    /// Reduces `r` into the cell; identity for finite structures.
    pub fn wrap(&self, r: Vec3) -> Vec3 {
        match (self.lattice, self.fractional(r)) {
            (Some(lat), Some(f)) => {
                let f = f.map(|x| {
                    let y = x - libm::floor(x);
                    // values like 1 - 1e-17 wrap to exactly zero
                    if (1.0 - y).abs() < 1e-12 {
                        0.0
                    } else {
                        y
                    }
                });
                mat_vec(&transpose(&lat), f)
            }
            _ => r,
        }
    }

    /// Shortest periodic image of `d` (identity for finite structures).
    pub fn minimum_image(&self, d: Vec3) -> Vec3 {
        match (self.lattice, self.fractional(d)) {
            (Some(lat), Some(f)) => {
                let f = f.map(|x| x - libm::round(x));
                mat_vec(&transpose(&lat), f)
            }
            _ => d,
        }
    }

    /// Shortest lattice-vector length, or `None` if finite.
    pub fn min_lattice_length(&self) -> Option<f64> {
        self.lattice.map(|l| l.iter().map(|v| norm(*v)).fold(f64::INFINITY, f64::min))
    }

    /// Image under a point operation: positions and lattice vectors both
    /// move, so neighbor geometry is carried along exactly.
    pub fn transformed(&self, g: &GroupElement) -> Result<Self> {
        let positions = self.positions.iter().map(|&p| g.apply(p)).collect();
        let lattice = self.lattice.map(|l| l.map(|v| g.apply(v)));
        let mut s = Structure::new(positions, self.species.clone(), self.species_names.clone(), lattice)?;
        s.site_mask = self.site_mask.clone();
        Ok(s)
    }

    /// Extended XYZ block for external viewers.
    pub fn to_extended_xyz(&self, comment: &str) -> String {
        let mut s = format!("{}\n", self.len());
        if let Some(l) = self.lattice {
            s += &format!(
                "Lattice=\"{} {} {} {} {} {} {} {} {}\" Properties=species:S:1:pos:R:3 pbc=\"T T T\" {}\n",
                l[0][0], l[0][1], l[0][2], l[1][0], l[1][1], l[1][2], l[2][0], l[2][1], l[2][2], comment
            );
        } else {
            s += &format!("Properties=species:S:1:pos:R:3 {comment}\n");
        }
        for (p, &sp) in self.positions.iter().zip(&self.species) {
            s += &format!("{} {:.10} {:.10} {:.10}\n", self.species_names[sp], p[0], p[1], p[2]);
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Deformation {
    SquareToRect,
    RectToSquare,
}

pub fn square_vertices() -> Vec<Vec3> {
    vec![[1.0, 1.0, 0.0], [-1.0, 1.0, 0.0], [-1.0, -1.0, 0.0], [1.0, -1.0, 0.0]]
}

pub fn rectangle_vertices() -> Vec<Vec3> {
    vec![[1.5, 0.5, 0.0], [-1.5, 0.5, 0.0], [-1.5, -0.5, 0.0], [1.5, -0.5, 0.0]]
}

/// Every degree `1..=lmax` in both parities, one copy each.
pub fn full_slot(lmax: u32) -> IrrepsSignature {
    let mut e = Vec::new();
    for l in 1..=lmax {
        e.push((1, Irrep::new(l, Parity::Even)));
        e.push((1, Irrep::new(l, Parity::Odd)));
    }
    IrrepsSignature::new(e)
}

/// `1e + 1o + 2e + 2o`.
pub fn restricted_slot() -> IrrepsSignature {
    full_slot(2)
}

pub fn make_square_rect_task(direction: Deformation) -> Result<Task> {
    let (from, to, name) = match direction {
        Deformation::SquareToRect => (square_vertices(), rectangle_vertices(), "square_to_rect"),
        Deformation::RectToSquare => (rectangle_vertices(), square_vertices(), "rect_to_square"),
    };
    let structure = Structure::new(from.clone(), vec![0; 4], vec!["P".to_string()], None)?.with_site_mask(vec![true; 4])?;
    let targets = from.iter().zip(&to).map(|(a, b)| project_points(&[sub(*b, *a)], TARGET_LMAX)).collect();
    Task::new(
        name,
        structure,
        OrderParameterSlot {
            signature: full_slot(TARGET_LMAX),
            sharing: Sharing::Global,
        },
        targets,
        LAMBDA_SPARSITY,
        0.0,
    )
}

/// Per-vertex displacements of a square/rectangle task.
pub fn square_rect_displacements(direction: Deformation) -> Vec<Vec3> {
    let (from, to) = match direction {
        Deformation::SquareToRect => (square_vertices(), rectangle_vertices()),
        Deformation::RectToSquare => (rectangle_vertices(), square_vertices()),
    };
    from.iter().zip(&to).map(|(a, b)| sub(*b, *a)).collect()
}

pub const SPECIES_A: usize = 0;
pub const SPECIES_B: usize = 1;
pub const SPECIES_X: usize = 2;

/// Integer cell coordinates of the 8 B sites, in structure order.
pub fn b_site_cells() -> Vec<[i32; 3]> {
    let mut cells = Vec::with_capacity(8);
    for n1 in 0..2 {
        for n2 in 0..2 {
            for n3 in 0..2 {
                cells.push([n1, n2, n3]);
            }
        }
    }
    cells
}

/// 2×2×2 supercell of the cubic perovskite with unit lattice constant.
/// Order: 8 B at integer corners, 8 A at cell centers, 24 X at edge
/// midpoints (grouped by B cell, then bond axis).
pub fn make_perovskite_structure() -> Structure {
    let cells = b_site_cells();
    let c = |n: [i32; 3]| -> Vec3 { [n[0] as f64, n[1] as f64, n[2] as f64] };
    let mut positions = Vec::with_capacity(40);
    let mut species = Vec::with_capacity(40);
    for n in &cells {
        positions.push(c(*n));
        species.push(SPECIES_B);
    }
    for n in &cells {
        positions.push(add(c(*n), [0.5, 0.5, 0.5]));
        species.push(SPECIES_A);
    }
    for n in &cells {
        for axis in 0..3 {
            let mut p = c(*n);
            p[axis] += 0.5;
            positions.push(p);
            species.push(SPECIES_X);
        }
    }
    let names = vec!["A".to_string(), "B".to_string(), "X".to_string()];
    let lattice = [[2.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 2.0]];
    let mask = species.iter().map(|&s| s == SPECIES_B).collect();
    Structure::new(positions, species, names, Some(lattice))
        .and_then(|s| s.with_site_mask(mask))
        .expect("perovskite construction is valid")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum TiltPattern {
    /// a⁺b⁻b⁻
    #[cfg_attr(feature = "serde", serde(rename = "a+b-b-"))]
    APlusBMinusBMinus,
    /// a⁰b⁻b⁻
    #[cfg_attr(feature = "serde", serde(rename = "a0b-b-"))]
    AZeroBMinusBMinus,
}

impl core::str::FromStr for TiltPattern {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "a+b-b-" => Ok(Self::APlusBMinusBMinus),
            "a0b-b-" => Ok(Self::AZeroBMinusBMinus),
            other => Err(Error::Invalid(format!("unknown tilt pattern {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TiltSpec {
    pub pattern: TiltPattern,
    pub theta_a: f64,
    pub theta_b: f64,
    pub supercell: [u32; 3],
}

impl TiltSpec {
    pub fn new(pattern: TiltPattern, theta_a: f64, theta_b: f64) -> Self {
        Self {
            pattern,
            theta_a,
            theta_b,
            supercell: [2, 2, 2],
        }
    }

    pub fn pnma(theta: f64) -> Self {
        Self::new(TiltPattern::APlusBMinusBMinus, theta, theta)
    }

    pub fn imma(theta: f64) -> Self {
        Self::new(TiltPattern::AZeroBMinusBMinus, theta, theta)
    }

    pub fn validate(&self) -> Result<()> {
        if self.supercell != [2, 2, 2] {
            return Err(Error::Invalid(format!("supercell {:?}; only 2x2x2 is supported", self.supercell)));
        }
        for t in [self.theta_a, self.theta_b] {
            if !t.is_finite() || t.abs() > 0.2 {
                return Err(Error::Invalid(format!("tilt angle {t} outside the small-rotation range |θ| ≤ 0.2")));
            }
        }
        Ok(())
    }

    /// Rotation pseudovector of the octahedron at B cell `n`.
    pub fn rotation(&self, n: [i32; 3]) -> Vec3 {
        let sign = |k: i32| if k.rem_euclid(2) == 0 { 1.0 } else { -1.0 };
        let anti = self.theta_b * sign(n[0] + n[1] + n[2]);
        let a = match self.pattern {
            TiltPattern::APlusBMinusBMinus => self.theta_a * sign(n[1] + n[2]),
            TiltPattern::AZeroBMinusBMinus => 0.0,
        };
        [a, anti, anti]
    }
}

impl Default for TiltSpec {
    fn default() -> Self {
        Self::pnma(0.1)
    }
}

/// Small-rotation displacements of every atom in [`make_perovskite_structure`]
/// order, plus the worst disagreement between the two octahedra sharing an X.
pub fn tilt_displacements(spec: &TiltSpec) -> Result<(Vec<Vec3>, f64)> {
    spec.validate()?;
    let cells = b_site_cells();
    let mut disp = vec![[0.0; 3]; 40];
    let mut worst = 0.0f64;
    for (b, n) in cells.iter().enumerate() {
        for axis in 0..3 {
            let mut m = *n;
            m[axis] = (m[axis] + 1) % 2;
            let mut bond = [0.0; 3];
            bond[axis] = 0.5;
            // X sits at +bond from B(n) and at -bond from its neighbor B(m)
            let from_n = cross(spec.rotation(*n), bond);
            let from_m = cross(spec.rotation(m), scale(bond, -1.0));
            worst = worst.max(norm(sub(from_n, from_m)));
            disp[16 + 3 * b + axis] = scale(add(from_n, from_m), 0.5);
        }
    }
    Ok((disp, worst))
}

/// Octahedral tilting task. Unconstrained: one independent slot per B site.
/// Constrained: the 1e x-component is masked out and B sites with equal
/// parity of `n1+n2+n3` share one order parameter.
pub fn make_perovskite_task(spec: &TiltSpec, constrained: bool) -> Result<Task> {
    let (disp, _) = tilt_displacements(spec)?;
    let structure = make_perovskite_structure();
    let targets = disp
        .iter()
        .map(|d| {
            if norm(*d) == 0.0 {
                SphereSignal::zeros(TARGET_LMAX)
            } else {
                project_points(&[*d], TARGET_LMAX)
            }
        })
        .collect();
    let signature = full_slot(TARGET_LMAX);
    let sharing = if constrained {
        let groups = b_site_cells().iter().map(|n| ((n[0] + n[1] + n[2]) % 2) as usize).collect();
        let mut mask = vec![true; signature.dim()];
        // first entry is 1e, components ordered (y, z, x)
        mask[2] = false;
        Sharing::Custom { groups, mask }
    } else {
        Sharing::PerSite
    };
    let name = match (spec.pattern, constrained) {
        (TiltPattern::APlusBMinusBMinus, false) => "perovskite_pnma",
        (TiltPattern::APlusBMinusBMinus, true) => "perovskite_pnma_constrained",
        (TiltPattern::AZeroBMinusBMinus, false) => "perovskite_imma",
        (TiltPattern::AZeroBMinusBMinus, true) => "perovskite_imma_constrained",
    };
    Task::new(
        name,
        structure,
        OrderParameterSlot { signature, sharing },
        targets,
        LAMBDA_SPARSITY,
        LAMBDA_DEGREE,
    )
}
