//! Rotation kernel: axis-angle vectors, rotation matrices, and the maps
//! between them (Rodrigues exponential, matrix logarithm, skew operator,
//! left-perturbation derivative).
//!
//! Rotation vectors are kept canonical with angle in [0, pi]; the sign
//! ambiguity at exactly pi is resolved by making the first nonzero axis
//! component positive.

use nalgebra::{Matrix3, Vector3};

use crate::error::CalibError;

/// Below this angle (radians) `exp` and `log` switch to series expansions.
pub const SMALL_ANGLE: f64 = 1e-8;

/// Within this distance of pi, `log` recovers the axis from the symmetric
/// part of the matrix instead of the vanishing antisymmetric part.
const NEAR_PI: f64 = 1e-6;

/// Within this distance of pi the sign convention for the axis applies.
const PI_BOUNDARY: f64 = 1e-12;

/// Skew-symmetric matrix of `v`, so that `hat(v) * w == v.cross(w)`.
pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(
        0.0, -v.z, v.y, //
        v.z, 0.0, -v.x, //
        -v.y, v.x, 0.0,
    )
}

fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Rodrigues exponential of a rotation vector (any magnitude).
pub fn exp(phi: &Vector3<f64>) -> RotMat {
    let theta2 = phi.norm_squared();
    if theta2 < SMALL_ANGLE * SMALL_ANGLE {
        let k = hat(phi);
        return RotMat(Matrix3::identity() + k + k * k * 0.5);
    }
    let theta = theta2.sqrt();
    let axis = phi / theta;
    let (sin, cos) = theta.sin_cos();
    let outer = axis * axis.transpose();
    RotMat(Matrix3::identity() * cos + outer * (1.0 - cos) + hat(&axis) * sin)
}

/// Derivative of `exp(d) * r * v` with respect to `d` at `d = 0`,
/// i.e. the Jacobian of a rotated vector under a left perturbation.
/// Equals `-hat(r * v)`.
pub fn left_perturb_jacobian(r: &RotMat, v: &Vector3<f64>) -> Matrix3<f64> {
    -hat(&(r.apply(v)))
}

/// Canonical axis-angle rotation vector, angle always in [0, pi].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotVec(Vector3<f64>);

impl RotVec {
    /// Wraps an arbitrary rotation vector into canonical form.
    pub fn new(v: Vector3<f64>) -> Self {
        let theta = v.norm();
        if theta <= std::f64::consts::PI {
            return RotVec(Self::fix_pi_sign(v, theta));
        }
        let wrapped = theta % std::f64::consts::TAU;
        let axis = v / theta;
        let (angle, axis) = if wrapped > std::f64::consts::PI {
            (std::f64::consts::TAU - wrapped, -axis)
        } else {
            (wrapped, axis)
        };
        RotVec(Self::fix_pi_sign(axis * angle, angle))
    }

    fn fix_pi_sign(v: Vector3<f64>, theta: f64) -> Vector3<f64> {
        if (theta - std::f64::consts::PI).abs() <= PI_BOUNDARY {
            for k in 0..3 {
                if v[k] != 0.0 {
                    return if v[k] < 0.0 { -v } else { v };
                }
            }
        }
        v
    }

    pub fn zero() -> Self {
        RotVec(Vector3::zeros())
    }

    pub fn vector(&self) -> Vector3<f64> {
        self.0
    }

    pub fn angle(&self) -> f64 {
        self.0.norm()
    }

    pub fn exp(&self) -> RotMat {
        exp(&self.0)
    }
}

/// Orthonormal, det +1 rotation matrix. External matrices enter through
/// `from_matrix`, which enforces the invariants; internal constructions
/// (`exp`, composition, transpose) preserve them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotMat(Matrix3<f64>);

impl RotMat {
    const ORTHO_TOL: f64 = 1e-12;

    pub fn identity() -> Self {
        RotMat(Matrix3::identity())
    }

    /// Validates orthonormality (per entry) and determinant +1.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self, CalibError> {
        let gram = m.transpose() * m;
        let defect = (gram - Matrix3::identity()).abs().max();
        if defect > Self::ORTHO_TOL {
            return Err(CalibError::InvalidRotation(format!(
                "orthonormality defect {defect:.3e} exceeds {:.1e}",
                Self::ORTHO_TOL
            )));
        }
        let det = m.determinant();
        if (det - 1.0).abs() > Self::ORTHO_TOL {
            return Err(CalibError::InvalidRotation(format!(
                "determinant {det:.12} is not +1"
            )));
        }
        Ok(RotMat(m))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    /// `R * v`.
    pub fn apply(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    /// `R^T * v` (rotate into the body frame).
    pub fn inverse_apply(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0.tr_mul(v)
    }

    pub fn transpose(&self) -> RotMat {
        RotMat(self.0.transpose())
    }

    pub fn compose(&self, other: &RotMat) -> RotMat {
        RotMat(self.0 * other.0)
    }

    /// Geodesic angle between two rotations, `|log(self^T other)|`.
    pub fn angle_to(&self, other: &RotMat) -> f64 {
        RotMat(self.0.tr_mul(&other.0)).log().angle()
    }

    /// Matrix logarithm as a canonical rotation vector.
    ///
    /// Uses the antisymmetric part away from pi and recovers the axis from
    /// the symmetric part within `NEAR_PI` of a half turn, where the
    /// antisymmetric part degenerates.
    pub fn log(&self) -> RotVec {
        let m = &self.0;
        let w = vee(&((m - m.transpose()) * 0.5));
        let sin_norm = w.norm();
        let cos = (m.trace() - 1.0) * 0.5;
        let theta = sin_norm.atan2(cos);
        if theta < SMALL_ANGLE {
            return RotVec(w);
        }
        if std::f64::consts::PI - theta < NEAR_PI {
            let theta = std::f64::consts::PI - sin_norm.clamp(-1.0, 1.0).asin();
            let cos = theta.cos();
            let outer = ((m + m.transpose()) * 0.5 - Matrix3::identity() * cos) / (1.0 - cos);
            let k = (0..3)
                .max_by(|&a, &b| outer[(a, a)].total_cmp(&outer[(b, b)]))
                .unwrap();
            let mut axis: Vector3<f64> =
                outer.column(k) / outer[(k, k)].max(f64::MIN_POSITIVE).sqrt();
            axis.normalize_mut();
            if sin_norm > PI_BOUNDARY && axis.dot(&w) < 0.0 {
                axis = -axis;
            }
            return RotVec::new(axis * theta);
        }
        RotVec(w * (theta / sin_norm))
    }
}

impl std::ops::Mul for RotMat {
    type Output = RotMat;

    fn mul(self, rhs: RotMat) -> RotMat {
        self.compose(&rhs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent oracle: unit quaternion from a rotation vector, then the
    /// standard quaternion-to-matrix formula.
    fn quat_matrix(phi: &Vector3<f64>) -> Matrix3<f64> {
        let theta = phi.norm();
        let (w, v) = if theta < 1e-300 {
            (1.0, Vector3::zeros())
        } else {
            ((theta / 2.0).cos(), phi / theta * (theta / 2.0).sin())
        };
        let (x, y, z) = (v.x, v.y, v.z);
        Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        )
    }

    fn random_rotvec(rng: &mut ChaCha8Rng, max_angle: f64) -> Vector3<f64> {
        let v = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = v.norm();
        if n < 1e-6 {
            return Vector3::zeros();
        }
        v / n * rng.random_range(0.0..max_angle)
    }

    #[test]
    fn exp_of_zero_is_identity() {
        assert_eq!(exp(&Vector3::zeros()).matrix(), &Matrix3::identity());
    }

    #[test]
    fn quarter_turn_about_z_maps_x_to_y() {
        let r = exp(&Vector3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2));
        let y = r.apply(&Vector3::x());
        assert!((y - Vector3::y()).norm() < 1e-15);
    }

    #[test]
    fn exp_matches_quaternion_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut cases = vec![
            Vector3::new(0.3, -0.2, 0.5),
            Vector3::new(0.0, 0.0, 1e-9),
            Vector3::new(3.0, 0.0, 0.0),
        ];
        for _ in 0..50 {
            cases.push(random_rotvec(&mut rng, std::f64::consts::PI));
        }
        for phi in &cases {
            let diff = (exp(phi).matrix() - quat_matrix(phi)).abs().max();
            assert!(diff < 1e-10, "entrywise gap {diff:.3e} for {phi:?}");
        }
    }

    #[test]
    fn compose_matches_quaternion_oracle() {
        let a = Vector3::new(0.4, -1.1, 0.7);
        let b = Vector3::new(-0.9, 0.2, 1.3);
        let ours = (exp(&a) * exp(&b)).matrix().clone();
        let oracle = quat_matrix(&a) * quat_matrix(&b);
        assert!((ours - oracle).abs().max() < 1e-12);
    }

    #[test]
    fn log_of_identity_is_zero() {
        assert_eq!(RotMat::identity().log().vector(), Vector3::zeros());
    }

    #[test]
    fn log_roundtrip_near_half_turn() {
        let phi = Vector3::new(2.0, 1.5, 1.0).normalize() * 3.1;
        let back = exp(&phi).log().vector();
        assert!((back - phi).norm() < 1e-8, "gap {:.3e}", (back - phi).norm());
    }

    #[test]
    fn log_at_exactly_pi_uses_sign_convention() {
        let r = exp(&Vector3::new(std::f64::consts::PI, 0.0, 0.0));
        let phi = r.log().vector();
        assert!(phi.x > 0.0);
        assert!((phi.norm() - std::f64::consts::PI).abs() < 1e-12);
        let r_neg = exp(&Vector3::new(-std::f64::consts::PI, 0.0, 0.0));
        let phi_neg = r_neg.log().vector();
        assert!((phi - phi_neg).norm() < 1e-12);
    }

    #[test]
    fn rotvec_wraps_long_vectors() {
        let axis = Vector3::new(1.0, 2.0, -0.5).normalize();
        let long = axis * (1.5 * std::f64::consts::PI);
        let canon = RotVec::new(long);
        assert!((canon.angle() - std::f64::consts::FRAC_PI_2) < 1e-12);
        assert!((canon.vector() + axis * std::f64::consts::FRAC_PI_2).norm() < 1e-12);
        let gap = (exp(&long).matrix() - canon.exp().matrix()).abs().max();
        assert!(gap < 1e-12);
    }

    #[test]
    fn rotvec_pi_boundary_sign() {
        let v = Vector3::new(0.0, -std::f64::consts::PI, 0.0);
        let canon = RotVec::new(v);
        assert!(canon.vector().y > 0.0);
    }

    #[test]
    fn from_matrix_rejects_non_orthonormal() {
        assert!(RotMat::from_matrix(Matrix3::identity() * 1.1).is_err());
        let reflection = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(RotMat::from_matrix(reflection).is_err());
        assert!(RotMat::from_matrix(Matrix3::identity()).is_ok());
    }

    #[test]
    fn left_perturb_jacobian_basic_cases() {
        let id = RotMat::identity();
        assert_eq!(
            left_perturb_jacobian(&id, &Vector3::x()),
            -hat(&Vector3::x())
        );
        assert_eq!(
            left_perturb_jacobian(&id, &Vector3::zeros()),
            Matrix3::zeros()
        );
    }

    #[test]
    fn left_perturb_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let step = 1e-6;
        for _ in 0..1000 {
            let r = exp(&random_rotvec(&mut rng, 3.0));
            let v = Vector3::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            );
            let analytic = left_perturb_jacobian(&r, &v);
            let mut fd = Matrix3::zeros();
            for k in 0..3 {
                let mut d = Vector3::zeros();
                d[k] = step;
                let plus = (exp(&d) * r).apply(&v);
                let minus = (exp(&-d) * r).apply(&v);
                fd.set_column(k, &((plus - minus) / (2.0 * step)));
            }
            let scale = 1.0 + analytic.abs().max().max(fd.abs().max());
            let gap = (analytic - fd).abs().max();
            assert!(gap / scale < 1e-5, "gap {gap:.3e} at scale {scale:.3e}");
        }
    }

    proptest! {
        #[test]
        fn hat_reproduces_cross_product(
            vx in -5.0..5.0f64, vy in -5.0..5.0f64, vz in -5.0..5.0f64,
            wx in -5.0..5.0f64, wy in -5.0..5.0f64, wz in -5.0..5.0f64,
        ) {
            let v = Vector3::new(vx, vy, vz);
            let w = Vector3::new(wx, wy, wz);
            prop_assert!((hat(&v) * w - v.cross(&w)).norm() < 1e-12);
        }

        #[test]
        fn exp_output_is_a_rotation(
            x in -10.0..10.0f64, y in -10.0..10.0f64, z in -10.0..10.0f64,
        ) {
            let r = exp(&Vector3::new(x, y, z));
            let gram_defect = (r.matrix().transpose() * r.matrix() - Matrix3::identity()).abs().max();
            prop_assert!(gram_defect < 1e-12);
            prop_assert!((r.matrix().determinant() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn exp_log_roundtrip(
            x in -1.0..1.0f64, y in -1.0..1.0f64, z in -1.0..1.0f64,
            angle in 0.0..(std::f64::consts::PI - 1e-6),
        ) {
            let dir = Vector3::new(x, y, z);
            prop_assume!(dir.norm() > 1e-3);
            let phi = dir.normalize() * angle;
            let back = exp(&phi).log().vector();
            prop_assert!((back - phi).norm() < 1e-8);
        }
    }
}
