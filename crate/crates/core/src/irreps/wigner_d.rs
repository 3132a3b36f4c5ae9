//! Real-basis rotation matrices `D^L(R)` built with the Ivanic–Ruedenberg
//! recursion from the `L = 1` block.

use alloc::vec;
use alloc::vec::Vec;

use super::GroupElement;
use crate::geometry::Mat3;

/// Square matrix of side `2L + 1`, row-major, indexed by `(m, m')` with
/// `m, m'` in `-L..=L`.
#[derive(Debug, Clone, PartialEq)]
pub struct DMatrix {
    pub degree: u32,
    pub data: Vec<f64>,
}

impl DMatrix {
    pub fn dim(&self) -> usize {
        2 * self.degree as usize + 1
    }

    #[inline]
    pub fn get(&self, m: i32, mp: i32) -> f64 {
        let l = self.degree as i32;
        let n = self.dim();
        self.data[(m + l) as usize * n + (mp + l) as usize]
    }

    // zero outside the index range; the recursion relies on this
    #[inline]
    fn centered(&self, m: i32, mp: i32) -> f64 {
        let l = self.degree as i32;
        if m.abs() > l || mp.abs() > l {
            0.0
        } else {
            self.get(m, mp)
        }
    }

    /// `out = D v` for one block of `2L + 1` components.
    pub fn apply(&self, v: &[f64], out: &mut [f64]) {
        let n = self.dim();
        for (i, o) in out.iter_mut().enumerate().take(n) {
            let row = &self.data[i * n..(i + 1) * n];
            *o = row.iter().zip(v).map(|(a, b)| a * b).sum();
        }
    }
}

/// `D^0 .. D^lmax` for the proper part of `g`.
pub fn wigner_d_all(lmax: u32, g: &GroupElement) -> Vec<DMatrix> {
    wigner_d_all_from_matrix(lmax, &g.rotation_matrix())
}

pub fn wigner_d_all_from_matrix(lmax: u32, r: &Mat3) -> Vec<DMatrix> {
    let mut out = Vec::with_capacity(lmax as usize + 1);
    out.push(DMatrix { degree: 0, data: vec![1.0] });
    if lmax == 0 {
        return out;
    }
    // real L = 1 components are ordered (y, z, x)
    let perm = [1usize, 2, 0];
    let mut d1 = vec![0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            d1[i * 3 + j] = r[perm[i]][perm[j]];
        }
    }
    out.push(DMatrix { degree: 1, data: d1 });
    for l in 2..=lmax {
        let next = recurse(l, &out[1], &out[l as usize - 1]);
        out.push(next);
    }
    out
}

/// Rotation part only; parity is applied by [`super::rep_apply`].
pub fn wigner_d(degree: u32, g: &GroupElement) -> DMatrix {
    wigner_d_all(degree, g).pop().expect("at least D^0")
}

fn recurse(l: u32, d1: &DMatrix, prev: &DMatrix) -> DMatrix {
    let li = l as i32;
    let n = 2 * l as usize + 1;
    let mut data = vec![0.0; n * n];
    let p = |i: i32, a: i32, b: i32| -> f64 {
        if b == li {
            d1.centered(i, 1) * prev.centered(a, li - 1) - d1.centered(i, -1) * prev.centered(a, -li + 1)
        } else if b == -li {
            d1.centered(i, 1) * prev.centered(a, -li + 1) + d1.centered(i, -1) * prev.centered(a, li - 1)
        } else {
            d1.centered(i, 0) * prev.centered(a, b)
        }
    };
    let delta = |a: i32, b: i32| if a == b { 1.0 } else { 0.0 };
    for m in -li..=li {
        for mp in -li..=li {
            let d0 = delta(m, 0);
            let denom = if mp.abs() == li {
                (2 * li * (2 * li - 1)) as f64
            } else {
                ((li + mp) * (li - mp)) as f64
            };
            let am = m.abs();
            let u = libm::sqrt(((li + m) * (li - m)) as f64 / denom);
            let v = 0.5 * libm::sqrt((1.0 + d0) * ((li + am - 1) * (li + am)) as f64 / denom) * (1.0 - 2.0 * d0);
            let w = -0.5 * libm::sqrt(((li - am - 1) * (li - am)).max(0) as f64 / denom) * (1.0 - d0);
            let mut val = 0.0;
            if u != 0.0 {
                val += u * p(0, m, mp);
            }
            if v != 0.0 {
                let vv = if m == 0 {
                    p(1, 1, mp) + p(-1, -1, mp)
                } else if m > 0 {
                    p(1, m - 1, mp) * libm::sqrt(1.0 + delta(m, 1)) - p(-1, -m + 1, mp) * (1.0 - delta(m, 1))
                } else {
                    p(1, m + 1, mp) * (1.0 - delta(m, -1)) + p(-1, -m - 1, mp) * libm::sqrt(1.0 + delta(m, -1))
                };
                val += v * vv;
            }
            if w != 0.0 {
                let ww = if m > 0 {
                    p(1, m + 1, mp) + p(-1, -m - 1, mp)
                } else {
                    p(1, m - 1, mp) - p(-1, -m + 1, mp)
                };
                val += w * ww;
            }
            data[(m + li) as usize * n + (mp + li) as usize] = val;
        }
    }
    DMatrix { degree: l, data }
}
