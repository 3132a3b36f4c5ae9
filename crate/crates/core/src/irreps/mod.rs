//! Irreducible representations of O(3) in a real basis.
//!
//! Components of a degree-`L` block are ordered `m = -L..=L`. For `L = 1`
//! that is `(y, z, x)`, so `m = 0` is the z axis. A [`GeometricTensor`] of
//! signature `[(mul, irrep), ...]` stores, for each entry in order, `mul`
//! consecutive copies of the `2L + 1` components.

mod rotation;
mod wigner_3j;
mod wigner_d;

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

pub use rotation::{random_group_element, GroupElement};
pub use wigner_3j::{triangle, wigner_3j, Wigner3j, Wigner3jTable, MAX_DEGREE};
pub use wigner_d::{wigner_d, wigner_d_all, wigner_d_all_from_matrix, DMatrix};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Parity {
    Even,
    Odd,
}

impl Parity {
    /// Parity carried by spherical harmonics of degree `l`.
    pub fn natural(l: u32) -> Self {
        if l % 2 == 0 {
            Parity::Even
        } else {
            Parity::Odd
        }
    }

    pub fn sign(self) -> f64 {
        match self {
            Parity::Even => 1.0,
            Parity::Odd => -1.0,
        }
    }

    pub fn product(self, other: Self) -> Self {
        if self == other {
            Parity::Even
        } else {
            Parity::Odd
        }
    }

    pub fn suffix(self) -> char {
        match self {
            Parity::Even => 'e',
            Parity::Odd => 'o',
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Irrep {
    pub degree: u32,
    pub parity: Parity,
}

impl Irrep {
    pub const fn new(degree: u32, parity: Parity) -> Self {
        Self { degree, parity }
    }

    pub const fn even(degree: u32) -> Self {
        Self::new(degree, Parity::Even)
    }

    pub const fn odd(degree: u32) -> Self {
        Self::new(degree, Parity::Odd)
    }

    pub fn natural(degree: u32) -> Self {
        Self::new(degree, Parity::natural(degree))
    }

    pub fn dim(&self) -> usize {
        2 * self.degree as usize + 1
    }

    pub fn is_scalar(&self) -> bool {
        self.degree == 0
    }
}

impl fmt::Display for Irrep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.degree, self.parity.suffix())
    }
}

impl core::str::FromStr for Irrep {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (num, p) = s.split_at(s.len().saturating_sub(1));
        let parity = match p {
            "e" => Parity::Even,
            "o" => Parity::Odd,
            _ => return Err(Error::Invalid(alloc::format!("bad irrep '{s}'"))),
        };
        let degree = num.parse().map_err(|_| Error::Invalid(alloc::format!("bad irrep '{s}'")))?;
        Ok(Irrep { degree, parity })
    }
}

/// Ordered direct sum of irreps with multiplicities.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct IrrepsSignature {
    entries: Vec<(usize, Irrep)>,
}

/// Where a flat component index lives inside a signature.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ComponentIndex {
    pub entry: usize,
    pub copy: usize,
    pub m: i32,
}

impl IrrepsSignature {
    /// Entries with multiplicity zero are dropped.
    pub fn new(entries: impl IntoIterator<Item = (usize, Irrep)>) -> Self {
        Self {
            entries: entries.into_iter().filter(|(mul, _)| *mul > 0).collect(),
        }
    }

    /// `0e + 1o + 2e + ... + lmax`, multiplicity one each.
    pub fn natural_ladder(lmax: u32) -> Self {
        Self::new((0..=lmax).map(|l| (1, Irrep::natural(l))))
    }

    pub fn entries(&self) -> &[(usize, Irrep)] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.entries.iter().map(|(mul, ir)| mul * ir.dim()).sum()
    }

    pub fn num_channels(&self) -> usize {
        self.entries.iter().map(|(mul, _)| mul).sum()
    }

    pub fn lmax(&self) -> u32 {
        self.entries.iter().map(|(_, ir)| ir.degree).max().unwrap_or(0)
    }

    /// Flat offset of each entry.
    pub fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.entries
            .iter()
            .map(|(mul, ir)| {
                let o = acc;
                acc += mul * ir.dim();
                o
            })
            .collect()
    }

    pub fn concat(&self, other: &Self) -> Self {
        Self::new(self.entries.iter().chain(other.entries.iter()).copied())
    }

    /// Multiplicity of `irrep` summed over all entries.
    pub fn multiplicity(&self, irrep: Irrep) -> usize {
        self.entries.iter().filter(|(_, ir)| *ir == irrep).map(|(mul, _)| mul).sum()
    }

    pub fn locate(&self, index: usize) -> Option<ComponentIndex> {
        let mut base = 0;
        for (entry, (mul, ir)) in self.entries.iter().enumerate() {
            let size = mul * ir.dim();
            if index < base + size {
                let local = index - base;
                let copy = local / ir.dim();
                let m = (local % ir.dim()) as i32 - ir.degree as i32;
                return Some(ComponentIndex { entry, copy, m });
            }
            base += size;
        }
        None
    }

    pub fn index_of(&self, c: ComponentIndex) -> Option<usize> {
        let (mul, ir) = *self.entries.get(c.entry)?;
        if c.copy >= mul || c.m.unsigned_abs() > ir.degree {
            return None;
        }
        let base = self.offsets()[c.entry];
        Some(base + c.copy * ir.dim() + (c.m + ir.degree as i32) as usize)
    }

    /// Irrep of every flat component.
    pub fn component_irreps(&self) -> Vec<Irrep> {
        let mut out = Vec::with_capacity(self.dim());
        for (mul, ir) in &self.entries {
            for _ in 0..mul * ir.dim() {
                out.push(*ir);
            }
        }
        out
    }
}

impl fmt::Display for IrrepsSignature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (mul, ir)) in self.entries.iter().enumerate() {
            if i > 0 {
                f.write_str(" + ")?;
            }
            if *mul == 1 {
                write!(f, "{ir}")?;
            } else {
                write!(f, "{mul}x{ir}")?;
            }
        }
        Ok(())
    }
}

impl core::str::FromStr for IrrepsSignature {
    type Err = Error;

    /// Parses `"2x0e + 1o + 3x2e"`.
    fn from_str(s: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for part in s.split('+') {
            let part = part.trim();
            if part.is_empty() {
                continue;
            }
            let (mul, ir) = match part.split_once('x') {
                Some((m, ir)) => (m.trim().parse().map_err(|_| Error::Invalid(String::from(part)))?, ir),
                None => (1, part),
            };
            entries.push((mul, ir.parse()?));
        }
        Ok(Self::new(entries))
    }
}

/// Coefficients of a direct sum of irreps.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GeometricTensor {
    signature: IrrepsSignature,
    coefficients: Vec<f64>,
}

impl GeometricTensor {
    pub fn new(signature: IrrepsSignature, coefficients: Vec<f64>) -> Result<Self> {
        if signature.dim() != coefficients.len() {
            return Err(Error::SignatureMismatch {
                expected: signature.dim(),
                actual: coefficients.len(),
            });
        }
        Ok(Self { signature, coefficients })
    }

    pub fn zeros(signature: IrrepsSignature) -> Self {
        let n = signature.dim();
        Self {
            signature,
            coefficients: vec![0.0; n],
        }
    }

    pub fn signature(&self) -> &IrrepsSignature {
        &self.signature
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn coefficients_mut(&mut self) -> &mut [f64] {
        &mut self.coefficients
    }

    pub fn into_coefficients(self) -> Vec<f64> {
        self.coefficients
    }

    pub fn norm(&self) -> f64 {
        libm::sqrt(self.coefficients.iter().map(|x| x * x).sum())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.coefficients
            .iter()
            .zip(&other.coefficients)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// `alpha * self + beta * other`.
    pub fn linear_combination(&self, alpha: f64, other: &Self, beta: f64) -> Result<Self> {
        if self.signature != other.signature {
            return Err(Error::SignatureMismatch {
                expected: self.signature.dim(),
                actual: other.signature.dim(),
            });
        }
        let c = self.coefficients.iter().zip(&other.coefficients).map(|(a, b)| alpha * a + beta * b).collect();
        Ok(Self {
            signature: self.signature.clone(),
            coefficients: c,
        })
    }

    /// Coefficients of the block `(entry, copy)`.
    pub fn block(&self, entry: usize, copy: usize) -> &[f64] {
        let (_, ir) = self.signature.entries()[entry];
        let start = self.signature.offsets()[entry] + copy * ir.dim();
        &self.coefficients[start..start + ir.dim()]
    }

    pub fn is_zero(&self) -> bool {
        self.coefficients.iter().all(|x| *x == 0.0)
    }
}

/// Precomputed block action of one group element, reusable across tensors.
#[derive(Debug, Clone)]
pub struct Representation {
    element: GroupElement,
    d: Vec<DMatrix>,
}

impl Representation {
    pub fn new(element: GroupElement, lmax: u32) -> Self {
        Self {
            element,
            d: wigner_d_all(lmax, &element),
        }
    }

    pub fn element(&self) -> &GroupElement {
        &self.element
    }

    pub fn lmax(&self) -> u32 {
        self.d.len() as u32 - 1
    }

    pub fn d(&self, l: u32) -> &DMatrix {
        &self.d[l as usize]
    }

    /// Applies the action to raw coefficients laid out by `sig`.
    pub fn apply_raw(&self, sig: &IrrepsSignature, input: &[f64], out: &mut [f64]) {
        let mut offset = 0;
        for (mul, ir) in sig.entries() {
            let n = ir.dim();
            let sign = if self.element.inversion { ir.parity.sign() } else { 1.0 };
            let d = &self.d[ir.degree as usize];
            for _ in 0..*mul {
                let src = &input[offset..offset + n];
                let dst = &mut out[offset..offset + n];
                d.apply(src, dst);
                if sign < 0.0 {
                    dst.iter_mut().for_each(|x| *x = -*x);
                }
                offset += n;
            }
        }
    }

    pub fn apply(&self, t: &GeometricTensor) -> GeometricTensor {
        let sig = t.signature();
        let mut out = vec![0.0; sig.dim()];
        if sig.lmax() > self.lmax() {
            return Representation::new(self.element, sig.lmax()).apply(t);
        }
        self.apply_raw(sig, t.coefficients(), &mut out);
        GeometricTensor {
            signature: sig.clone(),
            coefficients: out,
        }
    }
}

/// Block-diagonal action `D(g) t`: each block is rotated by `D^L` and negated
/// when `g` includes inversion and the block has odd parity.
pub fn rep_apply(sig: &IrrepsSignature, g: &GroupElement, t: &GeometricTensor) -> Result<GeometricTensor> {
    if t.signature() != sig {
        return Err(Error::SignatureMismatch {
            expected: sig.dim(),
            actual: t.signature().dim(),
        });
    }
    Ok(Representation::new(*g, sig.lmax()).apply(t))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn signature_layout_and_parsing() {
        let sig: IrrepsSignature = "2x0e + 1o + 3x2e".parse().unwrap();
        assert_eq!(sig.dim(), 2 + 3 + 15);
        assert_eq!(sig.offsets(), vec![0, 2, 5]);
        assert_eq!(alloc::format!("{sig}"), "2x0e + 1o + 3x2e");
        for i in 0..sig.dim() {
            let c = sig.locate(i).unwrap();
            assert_eq!(sig.index_of(c), Some(i));
        }
        assert_eq!(sig.locate(6), Some(ComponentIndex { entry: 2, copy: 0, m: -1 }));
        assert!(sig.locate(sig.dim()).is_none());
    }

    #[test]
    fn scalar_unchanged_vector_negated_pseudovector_kept() {
        let sig: IrrepsSignature = "0e + 1o + 1e".parse().unwrap();
        let t = GeometricTensor::new(sig.clone(), vec![2.0, 1.0, 2.0, 3.0, 1.0, 2.0, 3.0]).unwrap();
        let out = rep_apply(&sig, &GroupElement::inversion(), &t).unwrap();
        assert_eq!(out.coefficients(), &[2.0, -1.0, -2.0, -3.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn signature_mismatch_is_rejected() {
        let sig: IrrepsSignature = "1o".parse().unwrap();
        let other: IrrepsSignature = "1e".parse().unwrap();
        let t = GeometricTensor::zeros(other);
        assert!(rep_apply(&sig, &GroupElement::identity(), &t).is_err());
        assert!(GeometricTensor::new(sig, vec![0.0; 2]).is_err());
    }
}
