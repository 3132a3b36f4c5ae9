//! JSON dumps of the coupling and rotation tables for cross-checking against
//! external references.
//!
//! A 3j tensor is a nested array indexed `[m1][m2][m3]`, a D matrix is
//! indexed `[row][col]`; both run `m = -l..=l` in the real basis (for l = 1
//! that is y, z, x).

use serde_json::{json, Value};

use curie_core::irreps::{wigner_3j, wigner_d, GroupElement, MAX_DEGREE};

use crate::CliError;

fn degree(l: u32) -> Result<u32, CliError> {
    if l > MAX_DEGREE {
        return Err(CliError::Validation(format!("degree {l} exceeds {MAX_DEGREE}")));
    }
    Ok(l)
}

pub fn three_j(l1: u32, l2: u32, l3: u32) -> Result<Value, CliError> {
    let t = wigner_3j(degree(l1)?, degree(l2)?, degree(l3)?).map_err(|e| CliError::Validation(e.to_string()))?;
    let [n1, n2, n3] = t.dims();
    Ok(Value::from(
        (0..n1)
            .map(|i| (0..n2).map(|j| (0..n3).map(|k| t.get(i, j, k)).collect::<Vec<_>>()).collect::<Vec<_>>())
            .collect::<Vec<_>>(),
    ))
}

pub fn d_matrix(l: u32, g: &GroupElement) -> Result<Value, CliError> {
    let d = wigner_d(degree(l)?, g);
    let l = l as i32;
    Ok(Value::from(
        (-l..=l).map(|m| (-l..=l).map(|mp| d.get(m, mp)).collect::<Vec<_>>()).collect::<Vec<_>>(),
    ))
}

/// Every triangle-valid 3j triple with degrees at most `lmax`, in
/// lexicographic order, plus D matrices of `g` for `0..=lmax`.
pub fn all(lmax: u32, g: &GroupElement) -> Result<Value, CliError> {
    degree(lmax)?;
    let mut three = Vec::new();
    for l1 in 0..=lmax {
        for l2 in 0..=lmax {
            for l3 in l1.abs_diff(l2)..=(l1 + l2).min(lmax) {
                three.push(json!({ "degrees": [l1, l2, l3], "data": three_j(l1, l2, l3)? }));
            }
        }
    }
    let d = (0..=lmax)
        .map(|l| Ok(json!({ "degree": l, "data": d_matrix(l, g)? })))
        .collect::<Result<Vec<_>, CliError>>()?;
    Ok(json!({
        "index_order": "3j: [m1][m2][m3]; D: [row][col]; m = -l..l, l=1 as (y, z, x)",
        "element": { "rotation": g.rotation, "inversion": g.inversion },
        "wigner_3j": three,
        "wigner_d": d,
    }))
}
