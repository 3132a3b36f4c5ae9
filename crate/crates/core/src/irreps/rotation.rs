//! Elements of O(3): a proper rotation stored as a rotation vector together
//! with an inversion flag.

use rand::Rng;

use crate::geometry::{self, Mat3, Vec3};

/// An element of O(3).
///
/// The proper part is stored as a rotation vector (unit axis times angle,
/// angle in `[0, pi]`). Composition goes through 3x3 matrices. The action on
/// Cartesian positions is `x -> s R x` with `s = -1` when `inversion` is set.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GroupElement {
    pub rotation: Vec3,
    pub inversion: bool,
}

impl Default for GroupElement {
    fn default() -> Self {
        Self::identity()
    }
}

impl GroupElement {
    pub const fn identity() -> Self {
        Self {
            rotation: [0.0; 3],
            inversion: false,
        }
    }

    pub const fn inversion() -> Self {
        Self {
            rotation: [0.0; 3],
            inversion: true,
        }
    }

    /// Rotation by `angle` radians about `axis` (any nonzero length).
    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Self {
        let n = geometry::norm(axis);
        if n == 0.0 || angle == 0.0 {
            return Self::identity();
        }
        Self::from_matrix(&rodrigues(geometry::scale(axis, 1.0 / n), angle))
    }

    /// Builds the element from a proper rotation matrix. Matrices with
    /// determinant -1 are split into inversion times a proper rotation.
    pub fn from_matrix(m: &Mat3) -> Self {
        if geometry::det(m) < 0.0 {
            let mut p = *m;
            for row in p.iter_mut() {
                for x in row.iter_mut() {
                    *x = -*x;
                }
            }
            Self {
                rotation: rotation_vector(&p),
                inversion: true,
            }
        } else {
            Self {
                rotation: rotation_vector(m),
                inversion: false,
            }
        }
    }

    pub fn with_inversion(mut self, inversion: bool) -> Self {
        self.inversion = inversion;
        self
    }

    pub fn angle(&self) -> f64 {
        geometry::norm(self.rotation)
    }

    /// Proper rotation part as a matrix.
    pub fn rotation_matrix(&self) -> Mat3 {
        let angle = self.angle();
        if angle == 0.0 {
            return geometry::IDENTITY3;
        }
        rodrigues(geometry::scale(self.rotation, 1.0 / angle), angle)
    }

    /// Full Cartesian action, including the inversion sign.
    pub fn matrix(&self) -> Mat3 {
        let mut m = self.rotation_matrix();
        if self.inversion {
            for row in m.iter_mut() {
                for x in row.iter_mut() {
                    *x = -*x;
                }
            }
        }
        m
    }

    pub fn apply(&self, x: Vec3) -> Vec3 {
        geometry::mat_vec(&self.matrix(), x)
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        let r = geometry::mat_mul(&self.rotation_matrix(), &other.rotation_matrix());
        Self {
            rotation: rotation_vector(&r),
            inversion: self.inversion ^ other.inversion,
        }
    }

    pub fn inverse(&self) -> Self {
        Self {
            rotation: geometry::scale(self.rotation, -1.0),
            inversion: self.inversion,
        }
    }

    /// Distance to `other` measured on the Cartesian matrices; infinite if the
    /// inversion flags differ.
    pub fn distance(&self, other: &Self) -> f64 {
        if self.inversion != other.inversion {
            return f64::INFINITY;
        }
        geometry::mat_max_diff(&self.rotation_matrix(), &other.rotation_matrix())
    }
}

fn rodrigues(axis: Vec3, angle: f64) -> Mat3 {
    let (s, c) = (libm::sin(angle), libm::cos(angle));
    let t = 1.0 - c;
    let [x, y, z] = axis;
    [
        [c + x * x * t, x * y * t - z * s, x * z * t + y * s],
        [y * x * t + z * s, c + y * y * t, y * z * t - x * s],
        [z * x * t - y * s, z * y * t + x * s, c + z * z * t],
    ]
}

/// Rotation vector of a proper rotation matrix, via a unit quaternion
/// (Shepperd's branch selection keeps it stable near angle pi).
fn rotation_vector(m: &Mat3) -> Vec3 {
    let trace = m[0][0] + m[1][1] + m[2][2];
    let (w, x, y, z);
    if trace > m[0][0].max(m[1][1]).max(m[2][2]) {
        let s = libm::sqrt(1.0 + trace) * 2.0;
        w = 0.25 * s;
        x = (m[2][1] - m[1][2]) / s;
        y = (m[0][2] - m[2][0]) / s;
        z = (m[1][0] - m[0][1]) / s;
    } else if m[0][0] >= m[1][1] && m[0][0] >= m[2][2] {
        let s = libm::sqrt((1.0 + m[0][0] - m[1][1] - m[2][2]).max(0.0)) * 2.0;
        w = (m[2][1] - m[1][2]) / s;
        x = 0.25 * s;
        y = (m[0][1] + m[1][0]) / s;
        z = (m[0][2] + m[2][0]) / s;
    } else if m[1][1] >= m[2][2] {
        let s = libm::sqrt((1.0 + m[1][1] - m[0][0] - m[2][2]).max(0.0)) * 2.0;
        w = (m[0][2] - m[2][0]) / s;
        x = (m[0][1] + m[1][0]) / s;
        y = 0.25 * s;
        z = (m[1][2] + m[2][1]) / s;
    } else {
        let s = libm::sqrt((1.0 + m[2][2] - m[0][0] - m[1][1]).max(0.0)) * 2.0;
        w = (m[1][0] - m[0][1]) / s;
        x = (m[0][2] + m[2][0]) / s;
        y = (m[1][2] + m[2][1]) / s;
        z = 0.25 * s;
    }
    let (w, x, y, z) = if w < 0.0 { (-w, -x, -y, -z) } else { (w, x, y, z) };
    let vnorm = libm::sqrt(x * x + y * y + z * z);
    if vnorm < 1e-300 {
        return [0.0; 3];
    }
    let angle = 2.0 * libm::atan2(vnorm, w);
    [x / vnorm * angle, y / vnorm * angle, z / vnorm * angle]
}

/// Haar-uniform rotation (Shoemake's quaternion construction), with the
/// inversion flag drawn with probability 1/2 when `include_inversion` is set.
pub fn random_group_element<R: Rng + ?Sized>(rng: &mut R, include_inversion: bool) -> GroupElement {
    let u1: f64 = rng.random();
    let u2: f64 = rng.random();
    let u3: f64 = rng.random();
    let tau = 2.0 * core::f64::consts::PI;
    let a = libm::sqrt(1.0 - u1);
    let b = libm::sqrt(u1);
    let (w, x, y, z) = (
        a * libm::sin(tau * u2),
        a * libm::cos(tau * u2),
        b * libm::sin(tau * u3),
        b * libm::cos(tau * u3),
    );
    let m = [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - z * w), 2.0 * (x * z + y * w)],
        [2.0 * (x * y + z * w), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - x * w)],
        [2.0 * (x * z - y * w), 2.0 * (y * z + x * w), 1.0 - 2.0 * (x * x + y * y)],
    ];
    let inversion = include_inversion && rng.random::<bool>();
    GroupElement {
        rotation: rotation_vector(&m),
        inversion,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn axis_angle_round_trip_near_pi() {
        for angle in [0.3, 1.0, 3.0, core::f64::consts::PI] {
            let g = GroupElement::from_axis_angle([1.0, 1.0, 0.0], angle);
            assert!((g.angle() - angle).abs() < 1e-12);
            let h = GroupElement::from_matrix(&g.rotation_matrix());
            assert!(g.distance(&h) < 1e-12);
        }
    }

    #[test]
    fn quarter_turn_about_z() {
        let g = GroupElement::from_axis_angle([0.0, 0.0, 1.0], core::f64::consts::FRAC_PI_2);
        let v = g.apply([1.0, 0.0, 0.0]);
        assert!((v[0]).abs() < 1e-15 && (v[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn seeded_draws_are_reproducible() {
        let a = random_group_element(&mut ChaCha8Rng::seed_from_u64(7), false);
        let b = random_group_element(&mut ChaCha8Rng::seed_from_u64(7), false);
        assert_eq!(a, b);
        assert!(!a.inversion);
    }

    #[test]
    fn inversion_flag_is_fair() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 10_000;
        let count = (0..n).filter(|_| random_group_element(&mut rng, true).inversion).count();
        let frac = count as f64 / n as f64;
        assert!((frac - 0.5).abs() < 0.02, "fraction {frac}");
    }

    #[test]
    fn composing_with_inverse_gives_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let g = random_group_element(&mut rng, true);
            let e = g.compose(&g.inverse());
            assert!(!e.inversion);
            assert!(e.distance(&GroupElement::identity()) < 1e-12);
        }
    }

    #[test]
    fn composition_matches_matrix_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let g = random_group_element(&mut rng, true);
            let h = random_group_element(&mut rng, true);
            let prod = geometry::mat_mul(&g.matrix(), &h.matrix());
            assert!(geometry::mat_max_diff(&prod, &g.compose(&h).matrix()) < 1e-12);
        }
    }
}
