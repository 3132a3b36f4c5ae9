use curie_core::geometry;
use curie_core::harmonics::{eval_sh, sh_values};
use curie_core::irreps::*;
use nalgebra::{DMatrix as NMat, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn random_unit(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let g = random_group_element(rng, false);
    g.apply([0.0, 0.0, 1.0])
}

/// Least-squares fit of `D` from `Y_L(R x) = D Y_L(x)` over random directions.
fn fitted_d(l: u32, g: &GroupElement, rng: &mut ChaCha8Rng) -> NMat<f64> {
    let n = 2 * l as usize + 1;
    let samples = 4 * n;
    let mut x = NMat::zeros(n, samples);
    let mut y = NMat::zeros(n, samples);
    let full = ((l + 1) * (l + 1)) as usize;
    let mut buf = vec![0.0; full];
    for s in 0..samples {
        let d = random_unit(rng);
        sh_values(l, d, &mut buf);
        for i in 0..n {
            x[(i, s)] = buf[(l * l) as usize + i];
        }
        sh_values(l, g.rotation_matrix().map(|r| geometry::dot(r, d)), &mut buf);
        for i in 0..n {
            y[(i, s)] = buf[(l * l) as usize + i];
        }
    }
    // D = Y X^T (X X^T)^-1
    let xxt = &x * x.transpose();
    &y * x.transpose() * xxt.try_inverse().unwrap()
}

fn to_nmat(d: &DMatrix) -> NMat<f64> {
    let n = d.dim();
    NMat::from_row_slice(n, n, &d.data)
}

#[test]
fn identity_and_scalar_blocks() {
    let e = GroupElement::identity();
    for l in 0..=10 {
        let d = to_nmat(&wigner_d(l, &e));
        assert!((d - NMat::identity(2 * l as usize + 1, 2 * l as usize + 1)).amax() < 1e-14);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let g = random_group_element(&mut rng, true);
    assert_eq!(wigner_d(0, &g).data, vec![1.0]);
}

#[test]
fn quarter_turn_about_z_matches_fitted_matrix() {
    let g = GroupElement::from_axis_angle([0.0, 0.0, 1.0], core::f64::consts::FRAC_PI_2);
    let d = to_nmat(&wigner_d(1, &g));
    let fit = fitted_d(1, &g, &mut ChaCha8Rng::seed_from_u64(2));
    assert!((&d - &fit).amax() < 1e-12);
    // (y, z, x) -> (x, z, -y): a signed permutation
    let expected = NMat::from_row_slice(3, 3, &[0.0, 0.0, 1.0, 0.0, 1.0, 0.0, -1.0, 0.0, 0.0]);
    assert!((d - expected).amax() < 1e-15);
}

#[test]
fn d_matches_least_squares_fit_up_to_l10() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for l in 0..=10 {
        let g = random_group_element(&mut rng, false);
        let d = to_nmat(&wigner_d(l, &g));
        let fit = fitted_d(l, &g, &mut rng);
        assert!((d - fit).amax() < 1e-9, "L={l}");
    }
}

#[test]
fn d_is_orthogonal_homomorphism() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let g1 = random_group_element(&mut rng, true);
        let g2 = random_group_element(&mut rng, true);
        let a = wigner_d_all(10, &g1);
        let b = wigner_d_all(10, &g2);
        let ab = wigner_d_all(10, &g1.compose(&g2));
        for l in 0..=10usize {
            let (a, b, ab) = (to_nmat(&a[l]), to_nmat(&b[l]), to_nmat(&ab[l]));
            worst = worst.max((&a * &b - ab).amax());
            worst = worst.max((&a * a.transpose() - NMat::identity(2 * l + 1, 2 * l + 1)).amax());
        }
    }
    assert!(worst < 1e-10, "worst {worst}");
}

#[test]
fn harmonics_are_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let g = random_group_element(&mut rng, false);
        let x = random_unit(&mut rng);
        let y = eval_sh(10, x).unwrap();
        let rotated = eval_sh(10, g.apply(x)).unwrap();
        let expected = rep_apply(y.signature(), &g, &y).unwrap();
        assert!(rotated.max_abs_diff(&expected) < 1e-10);
    }
}

fn contract3(t: &Wigner3j, d: [&DMatrix; 3]) -> Vec<f64> {
    let [n1, n2, n3] = t.dims();
    let mut out = vec![0.0; t.data.len()];
    for (i, j, k, v) in t.nonzeros() {
        for a in 0..n1 {
            let da = d[0].data[a * n1 + i] * v;
            if da == 0.0 {
                continue;
            }
            for b in 0..n2 {
                let db = da * d[1].data[b * n2 + j];
                for c in 0..n3 {
                    out[(a * n2 + b) * n3 + c] += db * d[2].data[c * n3 + k];
                }
            }
        }
    }
    out
}

#[test]
fn three_j_invariant_under_simultaneous_rotation() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    for l1 in 0u32..=5 {
        for l2 in 0u32..=5 {
            for l3 in l1.abs_diff(l2)..=(l1 + l2).min(10) {
                let t = wigner_3j(l1, l2, l3).unwrap();
                let g = random_group_element(&mut rng, false);
                let d = wigner_d_all(10, &g);
                let rotated = contract3(&t, [&d[l1 as usize], &d[l2 as usize], &d[l3 as usize]]);
                let diff = rotated.iter().zip(&t.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                worst = worst.max(diff);
            }
        }
    }
    assert!(worst < 1e-10, "worst {worst}");
}

/// Invariant tensor as the nullspace of `(D1⊗D2⊗D3 - I)` stacked over random
/// rotations.
fn nullspace_3j(l1: u32, l2: u32, l3: u32) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let dims = [l1, l2, l3].map(|l| 2 * l as usize + 1);
    let n = dims[0] * dims[1] * dims[2];
    let mut rows = Vec::new();
    for _ in 0..4 {
        let g = random_group_element(&mut rng, false);
        let d = [wigner_d(l1, &g), wigner_d(l2, &g), wigner_d(l3, &g)];
        let mut m = NMat::zeros(n, n);
        for a in 0..dims[0] {
            for b in 0..dims[1] {
                for c in 0..dims[2] {
                    let row = (a * dims[1] + b) * dims[2] + c;
                    for i in 0..dims[0] {
                        for j in 0..dims[1] {
                            for k in 0..dims[2] {
                                let col = (i * dims[1] + j) * dims[2] + k;
                                m[(row, col)] = d[0].data[a * dims[0] + i] * d[1].data[b * dims[1] + j] * d[2].data[c * dims[2] + k];
                            }
                        }
                    }
                    m[(row, row)] -= 1.0;
                }
            }
        }
        rows.push(m);
    }
    let mut stacked = NMat::zeros(4 * n, n);
    for (r, m) in rows.iter().enumerate() {
        stacked.view_mut((r * n, 0), (n, n)).copy_from(m);
    }
    let svd = stacked.svd(false, true);
    let v_t = svd.v_t.unwrap();
    let (idx, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, s)| if *s < acc.1 { (i, *s) } else { acc });
    let v: DVector<f64> = v_t.row(idx).transpose();
    v.iter().copied().collect()
}

fn agree_up_to_sign(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let s = dot.signum();
    a.iter().zip(b).map(|(x, y)| (x - s * y).abs()).fold(0.0, f64::max)
}

#[test]
fn three_j_111_is_levi_civita_and_matches_nullspace() {
    let t = wigner_3j(1, 1, 1).unwrap();
    let inv6 = 1.0 / 6.0f64.sqrt();
    for (i, j, k, v) in t.nonzeros() {
        assert!(i != j && j != k && i != k);
        assert!((v.abs() - inv6).abs() < 1e-14);
    }
    assert_eq!(t.nonzeros().len(), 6);
    // antisymmetric
    assert!((t.get(0, 1, 2) + t.get(1, 0, 2)).abs() < 1e-15);
    assert!(agree_up_to_sign(&t.data, &nullspace_3j(1, 1, 1)) < 1e-10);
}

#[test]
fn three_j_matches_nullspace_oracle() {
    for (a, b, c) in [(1, 1, 2), (1, 2, 2), (2, 2, 2), (1, 2, 3)] {
        let t = wigner_3j(a, b, c).unwrap();
        assert!(agree_up_to_sign(&t.data, &nullspace_3j(a, b, c)) < 1e-9, "({a},{b},{c})");
    }
}

#[test]
fn exchange_symmetry_is_a_global_sign() {
    for (a, b, c) in [(1, 1, 2), (1, 2, 3), (2, 2, 2), (2, 3, 4), (1, 1, 1)] {
        let t = wigner_3j(a, b, c).unwrap();
        let s = wigner_3j(b, a, c).unwrap();
        let [n1, n2, n3] = t.dims();
        let mut swapped = vec![0.0; t.data.len()];
        for i in 0..n1 {
            for j in 0..n2 {
                for k in 0..n3 {
                    swapped[(j * n1 + i) * n3 + k] = t.get(i, j, k);
                }
            }
        }
        assert!(agree_up_to_sign(&swapped, &s.data) < 1e-14);
    }
}

/// Frozen values of the construction; guards the sign convention.
#[test]
fn three_j_112_regression() {
    let t = wigner_3j(1, 1, 2).unwrap();
    let nz: Vec<(usize, usize, usize, f64)> = t.nonzeros();
    let expected = [
        (0, 0, 2, 0.18257418583505539),
        (0, 0, 4, 0.316227766016838),
        (0, 1, 1, -0.316227766016838),
        (0, 2, 0, -0.316227766016838),
        (1, 0, 1, -0.316227766016838),
        (1, 1, 2, -0.3651483716701107),
        (1, 2, 3, -0.316227766016838),
        (2, 0, 0, -0.316227766016838),
        (2, 1, 3, -0.316227766016838),
        (2, 2, 2, 0.18257418583505539),
        (2, 2, 4, -0.316227766016838),
    ];
    assert_eq!(nz.len(), expected.len(), "{nz:?}");
    for (got, want) in nz.iter().zip(expected.iter()) {
        assert_eq!((got.0, got.1, got.2), (want.0, want.1, want.2));
        assert!((got.3 - want.3).abs() < 1e-14, "{got:?} vs {want:?}");
    }
}

proptest! {
    #[test]
    fn rep_apply_preserves_block_norms(seed in 0u64..1000, coeffs in proptest::collection::vec(-2.0f64..2.0, 29)) {
        let sig: IrrepsSignature = "0e + 2x1o + 1e + 2e + 3o + 3e".parse().unwrap();
        let t = GeometricTensor::new(sig.clone(), coeffs).unwrap();
        let g = random_group_element(&mut ChaCha8Rng::seed_from_u64(seed), true);
        let out = rep_apply(&sig, &g, &t).unwrap();
        for (entry, (mul, _)) in sig.entries().iter().enumerate() {
            for c in 0..*mul {
                let a: f64 = t.block(entry, c).iter().map(|x| x * x).sum();
                let b: f64 = out.block(entry, c).iter().map(|x| x * x).sum();
                prop_assert!((a.sqrt() - b.sqrt()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rep_apply_composes(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sig: IrrepsSignature = "0o + 1o + 1e + 2o + 4e".parse().unwrap();
        let coeffs: Vec<f64> = (0..sig.dim()).map(|i| (i as f64 * 0.37).sin()).collect();
        let t = GeometricTensor::new(sig.clone(), coeffs).unwrap();
        let g1 = random_group_element(&mut rng, true);
        let g2 = random_group_element(&mut rng, true);
        let lhs = rep_apply(&sig, &g1.compose(&g2), &t).unwrap();
        let rhs = rep_apply(&sig, &g1, &rep_apply(&sig, &g2, &t).unwrap()).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    }
}
