//! Real spherical harmonics, spherical-harmonic projection of point sets,
//! sphere sampling and peak extraction.
//!
//! Harmonics use Racah normalization, `Y_L^0(z) = 1`, so that
//! `sum_m Y_L^m(x)^2 = 1` for every unit `x`. There is no Condon–Shortley
//! phase: `Y_1 = (y, z, x)`.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::error::{Error, Result};
use crate::geometry::{self, Vec3};
use crate::irreps::{GeometricTensor, IrrepsSignature};

/// Fills `out` (length `(lmax + 1)^2`) with `Y_0 .. Y_lmax` at the unit
/// vector `dir`. No normalization check.
pub fn sh_values(lmax: u32, dir: Vec3, out: &mut [f64]) {
    let lmax = lmax as usize;
    let [x, y, z] = dir;
    debug_assert_eq!(out.len(), (lmax + 1) * (lmax + 1));
    // cos/sin terms times sin^m(theta): Re/Im of (x + iy)^m
    let mut c = [0.0f64; 32];
    let mut s = [0.0f64; 32];
    c[0] = 1.0;
    for m in 1..=lmax {
        c[m] = c[m - 1] * x - s[m - 1] * y;
        s[m] = s[m - 1] * x + c[m - 1] * y;
    }
    // q[l][m] = d^m P_l / dz^m, via the stable upward recurrence in l
    let mut q = [[0.0f64; 32]; 32];
    let mut dfact = 1.0;
    for m in 0..=lmax {
        if m > 0 {
            dfact *= (2 * m - 1) as f64;
        }
        q[m][m] = dfact;
        if m < lmax {
            q[m + 1][m] = (2 * m + 1) as f64 * z * q[m][m];
        }
        for l in m + 2..=lmax {
            q[l][m] = ((2 * l - 1) as f64 * z * q[l - 1][m] - (l + m - 1) as f64 * q[l - 2][m]) / (l - m) as f64;
        }
    }
    for l in 0..=lmax {
        let base = l * l + l;
        out[base] = q[l][0];
        // sqrt(2 (l-m)! / (l+m)!)
        let mut ratio = 1.0;
        for m in 1..=l {
            ratio /= ((l + m) * (l - m + 1)) as f64;
            let n = libm::sqrt(2.0 * ratio);
            out[base + m] = n * q[l][m] * c[m];
            out[base - m] = n * q[l][m] * s[m];
        }
    }
}

/// `[Y_0(dir), ..., Y_lmax(dir)]` as a natural-parity ladder tensor.
pub fn eval_sh(lmax: u32, dir: Vec3) -> Result<GeometricTensor> {
    let n = geometry::norm(dir);
    if (n - 1.0).abs() > 1e-9 {
        return Err(Error::NonUnitDirection(n));
    }
    let mut out = vec![0.0; ((lmax + 1) * (lmax + 1)) as usize];
    sh_values(lmax, dir, &mut out);
    GeometricTensor::new(IrrepsSignature::natural_ladder(lmax), out)
}

/// A function on the sphere stored as natural-parity harmonic coefficients.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SphereSignal {
    lmax: u32,
    tensor: GeometricTensor,
}

impl SphereSignal {
    pub fn zeros(lmax: u32) -> Self {
        Self {
            lmax,
            tensor: GeometricTensor::zeros(IrrepsSignature::natural_ladder(lmax)),
        }
    }

    /// Accepts tensors whose signature is exactly the natural ladder.
    pub fn from_tensor(tensor: GeometricTensor) -> Result<Self> {
        let lmax = tensor.signature().lmax();
        let ladder = IrrepsSignature::natural_ladder(lmax);
        if tensor.signature() != &ladder {
            return Err(Error::SignatureMismatch {
                expected: ladder.dim(),
                actual: tensor.signature().dim(),
            });
        }
        Ok(Self { lmax, tensor })
    }

    pub fn from_coefficients(lmax: u32, coefficients: Vec<f64>) -> Result<Self> {
        Self::from_tensor(GeometricTensor::new(IrrepsSignature::natural_ladder(lmax), coefficients)?)
    }

    pub fn lmax(&self) -> u32 {
        self.lmax
    }

    pub fn tensor(&self) -> &GeometricTensor {
        &self.tensor
    }

    pub fn coefficients(&self) -> &[f64] {
        self.tensor.coefficients()
    }

    pub fn into_tensor(self) -> GeometricTensor {
        self.tensor
    }

    /// `sum_J F_J . Y_J(dir)` at a unit direction.
    pub fn evaluate(&self, dir: Vec3) -> f64 {
        let mut y = [0.0; 144];
        let n = ((self.lmax + 1) * (self.lmax + 1)) as usize;
        sh_values(self.lmax, dir, &mut y[..n]);
        self.coefficients().iter().zip(&y[..n]).map(|(a, b)| a * b).sum()
    }

    /// Coefficient of `(degree, m)`.
    pub fn component(&self, degree: u32, m: i32) -> f64 {
        let l = degree as i32;
        self.coefficients()[(l * l + l + m) as usize]
    }
}

/// Gauss–Legendre nodes in `cos(theta)` times `2n` equally spaced azimuths.
#[derive(Debug, Clone)]
pub struct SphereGrid {
    n: usize,
    thetas: Vec<f64>,
    phis: Vec<f64>,
    directions: Vec<Vec3>,
    weights: Vec<f64>,
}

impl SphereGrid {
    pub fn new(n: usize) -> Self {
        let n = n.max(2);
        let (zs, zw) = gauss_legendre(n);
        let nphi = 2 * n;
        let dphi = 2.0 * PI / nphi as f64;
        let thetas: Vec<f64> = zs.iter().map(|z| libm::acos(*z)).collect();
        let phis: Vec<f64> = (0..nphi).map(|k| k as f64 * dphi).collect();
        let mut directions = Vec::with_capacity(n * nphi);
        let mut weights = Vec::with_capacity(n * nphi);
        for (i, z) in zs.iter().enumerate() {
            let st = libm::sqrt((1.0 - z * z).max(0.0));
            for phi in &phis {
                directions.push([st * libm::cos(*phi), st * libm::sin(*phi), *z]);
                weights.push(zw[i] * dphi);
            }
        }
        Self {
            n,
            thetas,
            phis,
            directions,
            weights,
        }
    }

    /// Latitude rows.
    pub fn rows(&self) -> usize {
        self.n
    }

    pub fn cols(&self) -> usize {
        2 * self.n
    }

    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }

    pub fn directions(&self) -> &[Vec3] {
        &self.directions
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `(theta, phi)` of flat grid index `k`.
    pub fn angles(&self, k: usize) -> (f64, f64) {
        (self.thetas[k / self.cols()], self.phis[k % self.cols()])
    }
}

impl Default for SphereGrid {
    fn default() -> Self {
        Self::new(64)
    }
}

/// Nodes (descending) and weights of `n`-point Gauss–Legendre quadrature.
fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n {
        let mut z = libm::cos(PI * (i as f64 + 0.75) / (n as f64 + 0.5));
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 1 { z } else { p1 };
            let pn1 = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (z * pn - pn1) / (z * z - 1.0);
            let dz = pn / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
    }
    (x, w)
}

/// Values of the signal at every grid direction.
pub fn sample_signal(signal: &SphereSignal, grid: &SphereGrid) -> Vec<(Vec3, f64)> {
    let lmax = signal.lmax();
    let n = ((lmax + 1) * (lmax + 1)) as usize;
    let mut y = vec![0.0; n];
    grid.directions()
        .iter()
        .map(|d| {
            sh_values(lmax, *d, &mut y);
            (*d, signal.coefficients().iter().zip(&y).map(|(a, b)| a * b).sum())
        })
        .collect()
}

/// Local maximization on the sphere by shrinking compass steps in the
/// tangent plane.
fn refine_peak(signal: &SphereSignal, start: Vec3, step: f64) -> (Vec3, f64) {
    let mut u = start;
    let mut best = signal.evaluate(u);
    let mut s = step;
    while s > 1e-11 {
        let helper = if u[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
        let e1 = normalized(geometry::cross(u, helper));
        let e2 = geometry::cross(u, e1);
        let mut moved = false;
        for (a, b) in [(1.0, 0.0), (-1.0, 0.0), (0.0, 1.0), (0.0, -1.0)] {
            let cand = normalized(geometry::add(u, geometry::add(geometry::scale(e1, a * s), geometry::scale(e2, b * s))));
            let v = signal.evaluate(cand);
            if v > best {
                best = v;
                u = cand;
                moved = true;
                break;
            }
        }
        if !moved {
            s *= 0.5;
        }
    }
    (u, best)
}

fn normalized(v: Vec3) -> Vec3 {
    geometry::scale(v, 1.0 / geometry::norm(v))
}

/// Maximum of the signal over the sphere: best of a coarse grid and the
/// supplied hint directions, then locally refined.
pub fn signal_max(signal: &SphereSignal, hints: &[Vec3]) -> (Vec3, f64) {
    let grid = SphereGrid::new(24);
    let mut candidates: Vec<(Vec3, f64)> = sample_signal(signal, &grid);
    candidates.extend(hints.iter().map(|h| (*h, signal.evaluate(*h))));
    candidates.sort_by(|a, b| b.1.total_cmp(&a.1));
    candidates
        .iter()
        .take(4)
        .map(|(d, _)| refine_peak(signal, *d, 0.05))
        .fold(([0.0, 0.0, 1.0], f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc })
}

/// Projection of a point set onto harmonics up to `lmax`, each point weighted
/// by its distance from the origin, then rescaled by one global factor so the
/// maximum of the reconstructed function equals the largest distance.
/// Zero-length vectors are skipped; an empty set gives the zero signal.
pub fn project_points(points: &[Vec3], lmax: u32) -> SphereSignal {
    let n = ((lmax + 1) * (lmax + 1)) as usize;
    let mut coeffs = vec![0.0; n];
    let mut y = vec![0.0; n];
    let mut hints = Vec::new();
    let mut rmax = 0.0f64;
    for p in points {
        let r = geometry::norm(*p);
        if r == 0.0 {
            continue;
        }
        let dir = geometry::scale(*p, 1.0 / r);
        sh_values(lmax, dir, &mut y);
        for (c, v) in coeffs.iter_mut().zip(&y) {
            *c += r * v;
        }
        hints.push(dir);
        rmax = rmax.max(r);
    }
    let mut signal = SphereSignal::from_coefficients(lmax, coeffs).expect("ladder layout");
    if hints.is_empty() {
        return signal;
    }
    let (_, fmax) = signal_max(&signal, &hints);
    let factor = rmax / fmax;
    signal.tensor.coefficients_mut().iter_mut().for_each(|c| *c *= factor);
    signal
}

/// Local maxima of the sampled signal that reach `rel_threshold` times the
/// global maximum, refined off-grid, as `direction * value`. Sorted by
/// decreasing magnitude.
pub fn peak_vectors(signal: &SphereSignal, grid: &SphereGrid, rel_threshold: f64) -> Vec<Vec3> {
    let values: Vec<f64> = sample_signal(signal, grid).into_iter().map(|(_, v)| v).collect();
    let global = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(global > 0.0) || signal.tensor().is_zero() {
        return Vec::new();
    }
    let (rows, cols) = (grid.rows(), grid.cols());
    let at = |i: usize, j: usize| values[i * cols + j];
    let mut seeds = Vec::new();
    for i in 0..rows {
        for j in 0..cols {
            let v = at(i, j);
            if v < rel_threshold * global {
                continue;
            }
            let mut is_max = true;
            'nb: for di in -1i64..=1 {
                for dj in -1i64..=1 {
                    if di == 0 && dj == 0 {
                        continue;
                    }
                    let ii = i as i64 + di;
                    let (ii, jj) = if ii < 0 || ii >= rows as i64 {
                        // across the pole: same row, opposite azimuth
                        (i, (j + cols / 2 + (dj + cols as i64) as usize) % cols)
                    } else {
                        (ii as usize, ((j as i64 + dj + cols as i64) as usize) % cols)
                    };
                    if at(ii, jj) > v {
                        is_max = false;
                        break 'nb;
                    }
                }
            }
            if is_max {
                seeds.push(grid.directions()[i * cols + j]);
            }
        }
    }
    let step = PI / rows as f64;
    let mut peaks: Vec<(Vec3, f64)> = Vec::new();
    for s in seeds {
        let (d, v) = refine_peak(signal, s, step);
        if v < rel_threshold * global {
            continue;
        }
        if peaks.iter().any(|(q, _)| geometry::dot(*q, d) > 1.0 - 1e-6) {
            continue;
        }
        peaks.push((d, v));
    }
    peaks.sort_by(|a, b| b.1.total_cmp(&a.1));
    peaks.into_iter().map(|(d, v)| geometry::scale(d, v)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn z_axis_is_m0_only_and_one() {
        let t = eval_sh(2, [0.0, 0.0, 1.0]).unwrap();
        assert_eq!(t.coefficients().len(), 9);
        for (i, v) in t.coefficients().iter().enumerate() {
            let expected = if matches!(i, 0 | 2 | 6) { 1.0 } else { 0.0 };
            assert!((v - expected).abs() < 1e-15, "{i}: {v}");
        }
    }

    #[test]
    fn x_axis_l1_and_l2() {
        let t = eval_sh(2, [1.0, 0.0, 0.0]).unwrap();
        let c = t.coefficients();
        assert_eq!(&c[1..4], &[0.0, 0.0, 1.0]);
        let l2 = &c[4..9];
        assert!((l2[2] + 0.5).abs() < 1e-15);
        assert!((l2[4] - libm::sqrt(3.0) / 2.0).abs() < 1e-15);
        assert!(l2[0].abs() < 1e-15 && l2[1].abs() < 1e-15 && l2[3].abs() < 1e-15);
    }

    #[test]
    fn non_unit_direction_rejected() {
        assert!(matches!(eval_sh(2, [0.0, 0.0, 1.1]), Err(Error::NonUnitDirection(_))));
    }

    #[test]
    fn racah_norm_sums_to_one_per_degree() {
        let d = normalized([0.3, -0.7, 0.2]);
        let t = eval_sh(8, d).unwrap();
        for l in 0..=8usize {
            let s: f64 = t.coefficients()[l * l..(l + 1) * (l + 1)].iter().map(|x| x * x).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn grid_weights_and_units() {
        let g = SphereGrid::new(64);
        let total: f64 = g.weights().iter().sum();
        assert!((total - 4.0 * PI).abs() < 1e-9);
        assert!(g.directions().iter().all(|d| (geometry::norm(*d) - 1.0).abs() < 1e-12));
    }

    #[test]
    fn empty_projection_is_zero() {
        assert!(project_points(&[], 5).tensor().is_zero());
        assert!(project_points(&[[0.0; 3]], 5).tensor().is_zero());
    }

    #[test]
    fn single_point_projection() {
        let s = project_points(&[[0.0, 0.0, 2.0]], 2);
        for l in 0..=2u32 {
            for m in -(l as i32)..=(l as i32) {
                let expected = if m == 0 { 2.0 / 3.0 } else { 0.0 };
                assert!((s.component(l, m) - expected).abs() < 1e-12);
            }
        }
        assert!((s.evaluate([0.0, 0.0, 1.0]) - 2.0).abs() < 1e-9);
    }

    #[test]
    fn zero_signal_has_no_peaks() {
        assert!(peak_vectors(&SphereSignal::zeros(5), &SphereGrid::new(32), 0.9).is_empty());
        let g = SphereGrid::new(16);
        assert!(sample_signal(&SphereSignal::zeros(3), &g).iter().all(|(_, v)| *v == 0.0));
    }

    #[test]
    fn single_point_peak_round_trip() {
        let s = project_points(&[[0.0, 0.0, 2.0]], 5);
        let peaks = peak_vectors(&s, &SphereGrid::new(64), 0.9);
        assert_eq!(peaks.len(), 1);
        let p = peaks[0];
        assert!(geometry::norm(geometry::sub(p, [0.0, 0.0, 2.0])) < 0.04, "{p:?}");
    }
}
