//! Real-basis Wigner 3j coupling tensors.
//!
//! Complex-basis symbols come from the Racah formula evaluated in exact
//! rational arithmetic; only the final square root is taken in floating
//! point. The real tensor is obtained by changing basis on all three indices
//! and is normalized to unit Frobenius norm. Its global sign is chosen so
//! that the first entry (row-major) with magnitude above `1e-12` is positive.

use alloc::collections::BTreeMap;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};

use crate::error::{Error, Result};

/// Largest supported degree.
pub const MAX_DEGREE: u32 = 12;

/// Dense coupling tensor of shape `(2l1+1, 2l2+1, 2l3+1)`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Wigner3j {
    pub degrees: [u32; 3],
    pub data: Vec<f64>,
}

impl Wigner3j {
    pub fn dims(&self) -> [usize; 3] {
        self.degrees.map(|l| 2 * l as usize + 1)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        let [_, n2, n3] = self.dims();
        self.data[(i * n2 + j) * n3 + k]
    }

    /// Nonzero entries `(i, j, k, value)` in row-major order.
    pub fn nonzeros(&self) -> Vec<(usize, usize, usize, f64)> {
        let [n1, n2, n3] = self.dims();
        let mut out = Vec::new();
        for i in 0..n1 {
            for j in 0..n2 {
                for k in 0..n3 {
                    let v = self.get(i, j, k);
                    if v.abs() > 1e-14 {
                        out.push((i, j, k, v));
                    }
                }
            }
        }
        out
    }
}

pub fn triangle(l1: u32, l2: u32, l3: u32) -> bool {
    l3 >= l1.abs_diff(l2) && l3 <= l1 + l2
}

/// Real-basis 3j tensor for `(l1, l2, l3)`.
pub fn wigner_3j(l1: u32, l2: u32, l3: u32) -> Result<Wigner3j> {
    for l in [l1, l2, l3] {
        if l > MAX_DEGREE {
            return Err(Error::DegreeTooLarge(l, MAX_DEGREE));
        }
    }
    if !triangle(l1, l2, l3) {
        return Err(Error::IncompatibleDegrees(l1, l2, l3));
    }
    let facts = factorials((l1 + l2 + l3 + 1) as usize);
    let (a, b, c) = (l1 as i32, l2 as i32, l3 as i32);
    let (n1, n2, n3) = (2 * l1 as usize + 1, 2 * l2 as usize + 1, 2 * l3 as usize + 1);

    // complex symbols, indexed by (m1 + l1, m2 + l2); m3 = -m1 - m2
    let mut complex = vec![0.0; n1 * n2];
    for m1 in -a..=a {
        for m2 in -b..=b {
            let m3 = -m1 - m2;
            if m3.abs() > c {
                continue;
            }
            complex[(m1 + a) as usize * n2 + (m2 + b) as usize] = racah(a, b, c, m1, m2, m3, &facts);
        }
    }
    let cplx = |m1: i32, m2: i32| -> f64 {
        if m1.abs() > a || m2.abs() > b || (m1 + m2).abs() > c {
            0.0
        } else {
            complex[(m1 + a) as usize * n2 + (m2 + b) as usize]
        }
    };

    let mut re = vec![0.0; n1 * n2 * n3];
    let mut im = vec![0.0; n1 * n2 * n3];
    for r1 in -a..=a {
        for r2 in -b..=b {
            for r3 in -c..=c {
                let (mut sr, mut si) = (0.0, 0.0);
                for (m1, u1) in real_to_complex(r1) {
                    for (m2, u2) in real_to_complex(r2) {
                        for (m3, u3) in real_to_complex(r3) {
                            if m1 + m2 + m3 != 0 {
                                continue;
                            }
                            let v = cplx(m1, m2);
                            if v == 0.0 {
                                continue;
                            }
                            let (pr, pi) = cmul(cmul(u1, u2), u3);
                            sr += pr * v;
                            si += pi * v;
                        }
                    }
                }
                let idx = ((r1 + a) as usize * n2 + (r2 + b) as usize) * n3 + (r3 + c) as usize;
                re[idx] = sr;
                im[idx] = si;
            }
        }
    }
    let norm_re: f64 = re.iter().map(|x| x * x).sum();
    let norm_im: f64 = im.iter().map(|x| x * x).sum();
    let mut data = if norm_re >= norm_im { re } else { im };
    let norm = libm::sqrt(norm_re.max(norm_im));
    let sign = data.iter().find(|x| x.abs() > 1e-12).map_or(1.0, |x| x.signum());
    for x in data.iter_mut() {
        *x *= sign / norm;
    }
    Ok(Wigner3j { degrees: [l1, l2, l3], data })
}

#[inline]
fn cmul(a: (f64, f64), b: (f64, f64)) -> (f64, f64) {
    (a.0 * b.0 - a.1 * b.1, a.0 * b.1 + a.1 * b.0)
}

/// Row `m_real` of the conjugated complex-to-real change of basis, as
/// `(m_complex, coefficient)` pairs.
fn real_to_complex(m: i32) -> [(i32, (f64, f64)); 2] {
    let h = core::f64::consts::FRAC_1_SQRT_2;
    let parity = if m.abs() % 2 == 0 { 1.0 } else { -1.0 };
    if m == 0 {
        [(0, (1.0, 0.0)), (0, (0.0, 0.0))]
    } else if m > 0 {
        [(-m, (h, 0.0)), (m, (parity * h, 0.0))]
    } else {
        // conjugate of (i/sqrt2) Y^m - (i/sqrt2)(-1)^m Y^{-m}
        [(m, (0.0, -h)), (-m, (0.0, parity * h))]
    }
}

fn factorials(n: usize) -> Vec<BigInt> {
    let mut f = Vec::with_capacity(n + 1);
    f.push(BigInt::one());
    for i in 1..=n {
        let next = &f[i - 1] * BigInt::from(i as u64);
        f.push(next);
    }
    f
}

/// Complex-basis 3j symbol by the Racah formula.
fn racah(j1: i32, j2: i32, j3: i32, m1: i32, m2: i32, m3: i32, f: &[BigInt]) -> f64 {
    if m1 + m2 + m3 != 0 {
        return 0.0;
    }
    let fact = |n: i32| -> &BigInt { &f[n as usize] };
    let delta_num = fact(j1 + j2 - j3) * fact(j1 - j2 + j3) * fact(-j1 + j2 + j3);
    let delta_den = fact(j1 + j2 + j3 + 1).clone();
    let prefactor_num = delta_num * fact(j1 + m1) * fact(j1 - m1) * fact(j2 + m2) * fact(j2 - m2) * fact(j3 + m3) * fact(j3 - m3);
    let prefactor = BigRational::new(prefactor_num, delta_den);

    let kmin = 0.max(j2 - j3 - m1).max(j1 - j3 + m2);
    let kmax = (j1 + j2 - j3).min(j1 - m1).min(j2 + m2);
    let mut sum = BigRational::zero();
    for k in kmin..=kmax {
        let den = fact(k) * fact(j3 - j2 + k + m1) * fact(j3 - j1 + k - m2) * fact(j1 + j2 - j3 - k) * fact(j1 - k - m1) * fact(j2 - k + m2);
        let term = BigRational::new(BigInt::one(), den);
        if k % 2 == 0 {
            sum += term;
        } else {
            sum -= term;
        }
    }
    if sum.is_zero() {
        return 0.0;
    }
    let phase = if (j1 - j2 - m3).rem_euclid(2) == 0 { 1.0 } else { -1.0 };
    let sign = if sum.is_negative() { -phase } else { phase };
    let squared = &sum * &sum * prefactor;
    sign * libm::sqrt(squared.to_f64().unwrap_or(f64::NAN))
}

/// Cache of coupling tensors keyed by degree triple.
///
/// Built once and shared read-only. Entries can be replaced with
/// [`Wigner3jTable::override_entry`], which exists for loading external
/// tables and for negative-control fixtures.
#[derive(Debug, Clone, Default)]
pub struct Wigner3jTable {
    entries: BTreeMap<[u32; 3], Arc<Wigner3j>>,
}

impl Wigner3jTable {
    /// All valid triples with every degree at most `lmax`.
    pub fn new(lmax: u32) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for l1 in 0..=lmax {
            for l2 in 0..=lmax {
                for l3 in l1.abs_diff(l2)..=(l1 + l2).min(lmax) {
                    entries.insert([l1, l2, l3], Arc::new(wigner_3j(l1, l2, l3)?));
                }
            }
        }
        Ok(Self { entries })
    }

    pub fn get(&self, l1: u32, l2: u32, l3: u32) -> Result<Arc<Wigner3j>> {
        if !triangle(l1, l2, l3) {
            return Err(Error::IncompatibleDegrees(l1, l2, l3));
        }
        match self.entries.get(&[l1, l2, l3]) {
            Some(t) => Ok(t.clone()),
            None => Ok(Arc::new(wigner_3j(l1, l2, l3)?)),
        }
    }

    pub fn override_entry(&mut self, table: Wigner3j) -> Result<()> {
        let [l1, l2, l3] = table.degrees;
        if !triangle(l1, l2, l3) {
            return Err(Error::IncompatibleDegrees(l1, l2, l3));
        }
        let expected = table.dims().iter().product::<usize>();
        if table.data.len() != expected {
            return Err(Error::SignatureMismatch {
                expected,
                actual: table.data.len(),
            });
        }
        self.entries.insert(table.degrees, Arc::new(table));
        Ok(())
    }

    /// Entries that differ from a freshly computed table, by degree triple.
    pub fn overridden(&self) -> Vec<[u32; 3]> {
        self.entries
            .iter()
            .filter(|(k, v)| wigner_3j(k[0], k[1], k[2]).map_or(true, |fresh| fresh.data != v.data))
            .map(|(k, _)| *k)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_coupling_is_one() {
        let t = wigner_3j(0, 0, 0).unwrap();
        assert_eq!(t.data.len(), 1);
        assert!((t.data[0].abs() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn triangle_violation_is_an_error() {
        assert_eq!(wigner_3j(1, 2, 4), Err(Error::IncompatibleDegrees(1, 2, 4)));
        assert!(matches!(wigner_3j(13, 0, 13), Err(Error::DegreeTooLarge(13, 12))));
    }

    #[test]
    fn unit_frobenius_norm() {
        for (a, b, c) in [(1, 1, 2), (2, 3, 4), (5, 5, 10), (12, 12, 0), (6, 6, 12)] {
            let t = wigner_3j(a, b, c).unwrap();
            let n: f64 = t.data.iter().map(|x| x * x).sum();
            assert!((n - 1.0).abs() < 1e-12, "{a} {b} {c}: {n}");
        }
    }

    #[test]
    fn complex_symbol_known_value() {
        // (1 1 0; 1 -1 0) = 1/sqrt(3)
        let f = factorials(10);
        let v = racah(1, 1, 0, 1, -1, 0, &f);
        assert!((v - 1.0 / libm::sqrt(3.0)).abs() < 1e-15);
        // (2 2 2; 0 0 0) = -sqrt(2/35)
        let v = racah(2, 2, 2, 0, 0, 0, &f);
        assert!((v + libm::sqrt(2.0 / 35.0)).abs() < 1e-15);
    }

    #[test]
    fn override_is_reported() {
        let mut table = Wigner3jTable::new(2).unwrap();
        assert!(table.overridden().is_empty());
        let mut t = wigner_3j(1, 1, 2).unwrap();
        t.data[0] += 0.1;
        table.override_entry(t).unwrap();
        assert_eq!(table.overridden(), alloc::vec![[1, 1, 2]]);
    }
}
