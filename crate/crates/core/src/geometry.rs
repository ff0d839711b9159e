//! Rigid-body transforms on SE(3), twists, and dual quaternions.
//!
//! Rotations are stored as 3x3 matrices internally; quaternions appear only
//! at serialization boundaries. Translations are in centimeters.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use thiserror::Error;

/// Threshold below which exp/log switch to their series branches.
pub const SMALL_ANGLE: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum GeometryError {
    /// log of a rotation whose angle is at or beyond pi.
    #[error("rotation angle {angle} is too close to pi for a stable logarithm")]
    SingularRotation { angle: f64 },
    /// Dual quaternion with a real part too far from unit norm to normalize.
    #[error("dual quaternion real part has norm {norm}, cannot normalize")]
    NonUnitReal { norm: f64 },
}

/// Rigid-body transform: `x_out = rotation * x_in + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

/// Element of se(3): rotational part `omega` (rad) and translational part
/// `nu` (cm).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Twist {
    pub omega: Vector3<f64>,
    pub nu: Vector3<f64>,
}

impl Twist {
    pub fn zero() -> Self {
        Twist {
            omega: Vector3::zeros(),
            nu: Vector3::zeros(),
        }
    }

    pub fn new(omega: Vector3<f64>, nu: Vector3<f64>) -> Self {
        Twist { omega, nu }
    }

    /// Pack as (omega, nu) into a 6-vector.
    pub fn to_vector(&self) -> nalgebra::Vector6<f64> {
        nalgebra::Vector6::new(
            self.omega.x,
            self.omega.y,
            self.omega.z,
            self.nu.x,
            self.nu.y,
            self.nu.z,
        )
    }

    pub fn from_vector(v: &nalgebra::Vector6<f64>) -> Self {
        Twist {
            omega: Vector3::new(v[0], v[1], v[2]),
            nu: Vector3::new(v[3], v[4], v[5]),
        }
    }

    pub fn norm(&self) -> f64 {
        (self.omega.norm_squared() + self.nu.norm_squared()).sqrt()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        debug_assert!(
            (rotation * rotation.transpose() - Matrix3::identity()).norm() < 1e-7,
            "rotation must be orthonormal"
        );
        Pose {
            rotation,
            translation,
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Apply the transform to a point.
    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Rotate a direction (no translation).
    pub fn rotate(&self, d: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * d
    }

    /// Rotation angle in [0, pi].
    pub fn rotation_angle(&self) -> f64 {
        let c = ((self.rotation.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        c.acos()
    }

    /// Project the rotation back onto SO(3); use after long composition
    /// chains or when constructing from noisy data.
    pub fn orthonormalized(&self) -> Pose {
        Pose {
            rotation: project_so3(&self.rotation),
            translation: self.translation,
        }
    }

    /// Unit quaternion for the rotation part (serialization boundary).
    pub fn rotation_quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_matrix(&self.rotation)
    }

    pub fn from_quaternion(q: &UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Pose {
            rotation: q.to_rotation_matrix().into_inner(),
            translation,
        }
    }
}

/// Skew-symmetric matrix such that `skew(a) * b == a.cross(b)`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Nearest rotation matrix in Frobenius norm (SVD projection).
pub fn project_so3(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.unwrap();
    let vt = svd.v_t.unwrap();
    let mut r = u * vt;
    if r.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        r = u * vt;
    }
    r
}

/// Exponential map se(3) -> SE(3).
///
/// Uses the second-order series branch for rotation angles below
/// [`SMALL_ANGLE`].
pub fn exp_se3(xi: &Twist) -> Pose {
    let theta = xi.omega.norm();
    let w = skew(&xi.omega);
    let w2 = w * w;
    let (rotation, v) = if theta < SMALL_ANGLE {
        // I + W + W^2/2 and I + W/2 + W^2/6, exact to O(theta^3)
        let r = Matrix3::identity() + w + w2 * 0.5;
        let v = Matrix3::identity() + w * 0.5 + w2 * (1.0 / 6.0);
        (r, v)
    } else {
        let t2 = theta * theta;
        let a = theta.sin() / theta;
        let b = (1.0 - theta.cos()) / t2;
        let c = (theta - theta.sin()) / (t2 * theta);
        let r = Matrix3::identity() + w * a + w2 * b;
        let v = Matrix3::identity() + w * b + w2 * c;
        (r, v)
    };
    Pose {
        rotation,
        translation: v * xi.nu,
    }
}

/// Logarithm map SE(3) -> se(3).
///
/// Fails for rotation angles at or beyond `pi - 1e-6` where the axis is not
/// uniquely recoverable.
pub fn log_se3(p: &Pose) -> Result<Twist, GeometryError> {
    let angle = p.rotation_angle();
    if angle >= std::f64::consts::PI - 1e-6 {
        return Err(GeometryError::SingularRotation { angle });
    }
    let omega = if angle < SMALL_ANGLE {
        // R - R^T = 2*W + O(theta^3)
        Vector3::new(
            (p.rotation[(2, 1)] - p.rotation[(1, 2)]) * 0.5,
            (p.rotation[(0, 2)] - p.rotation[(2, 0)]) * 0.5,
            (p.rotation[(1, 0)] - p.rotation[(0, 1)]) * 0.5,
        )
    } else {
        let scale = angle / (2.0 * angle.sin());
        Vector3::new(
            (p.rotation[(2, 1)] - p.rotation[(1, 2)]) * scale,
            (p.rotation[(0, 2)] - p.rotation[(2, 0)]) * scale,
            (p.rotation[(1, 0)] - p.rotation[(0, 1)]) * scale,
        )
    };
    let w = skew(&omega);
    let w2 = w * w;
    let v_inv = if angle < SMALL_ANGLE {
        Matrix3::identity() - w * 0.5 + w2 * (1.0 / 12.0)
    } else {
        let t2 = angle * angle;
        let coeff = (1.0 / t2) - (1.0 + angle.cos()) / (2.0 * angle * angle.sin());
        Matrix3::identity() - w * 0.5 + w2 * coeff
    };
    Ok(Twist {
        omega,
        nu: v_inv * p.translation,
    })
}

/// Group composition: `compose(a, b)` maps `x` to `a(b(x))`.
pub fn compose(a: &Pose, b: &Pose) -> Pose {
    Pose {
        rotation: a.rotation * b.rotation,
        translation: a.rotation * b.translation + a.translation,
    }
}

pub fn invert(p: &Pose) -> Pose {
    let rt = p.rotation.transpose();
    Pose {
        rotation: rt,
        translation: -(rt * p.translation),
    }
}

/// Relative twist taking `from` to `to`: `to = from * exp(xi)`.
pub fn relative_twist(from: &Pose, to: &Pose) -> Result<Twist, GeometryError> {
    log_se3(&compose(&invert(from), to))
}

/// Unit dual quaternion: `real` encodes the rotation, `dual = 0.5 t ⊗ real`
/// encodes the translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualQuaternion {
    pub real: Quaternion<f64>,
    pub dual: Quaternion<f64>,
}

impl DualQuaternion {
    pub fn identity() -> Self {
        DualQuaternion {
            real: Quaternion::new(1.0, 0.0, 0.0, 0.0),
            dual: Quaternion::new(0.0, 0.0, 0.0, 0.0),
        }
    }

    /// Enforce |real| = 1 and real.dual = 0.
    pub fn normalized(&self) -> Result<DualQuaternion, GeometryError> {
        let n = self.real.norm();
        if n < 1e-9 {
            return Err(GeometryError::NonUnitReal { norm: n });
        }
        let real = self.real / n;
        let mut dual = self.dual / n;
        // remove any component of dual along real
        let d = real.coords.dot(&dual.coords);
        dual.coords -= real.coords * d;
        Ok(DualQuaternion { real, dual })
    }

    pub fn negated(&self) -> DualQuaternion {
        DualQuaternion {
            real: -self.real,
            dual: -self.dual,
        }
    }
}

pub fn pose_to_dq(p: &Pose) -> DualQuaternion {
    let real = UnitQuaternion::from_matrix(&p.rotation).into_inner();
    let t = Quaternion::new(0.0, p.translation.x, p.translation.y, p.translation.z);
    DualQuaternion {
        real,
        dual: (t * real) * 0.5,
    }
}

pub fn dq_to_pose(q: &DualQuaternion) -> Result<Pose, GeometryError> {
    let q = q.normalized()?;
    let real_unit = UnitQuaternion::new_unchecked(q.real);
    let t = (q.dual * q.real.conjugate()) * 2.0;
    Ok(Pose {
        rotation: real_unit.to_rotation_matrix().into_inner(),
        translation: Vector3::new(t.i, t.j, t.k),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    pub(crate) fn random_pose(rng: &mut impl Rng, max_angle: f64) -> Pose {
        let axis = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let axis = if axis.norm() < 1e-12 {
            Vector3::x()
        } else {
            axis.normalize()
        };
        let angle: f64 = rng.gen::<f64>() * max_angle;
        let nu = Vector3::new(
            rng.gen_range(-5.0..5.0),
            rng.gen_range(-5.0..5.0),
            rng.gen_range(-5.0..5.0),
        );
        exp_se3(&Twist::new(axis * angle, nu))
    }

    #[test]
    fn exp_of_zero_is_identity() {
        let p = exp_se3(&Twist::zero());
        assert_relative_eq!(p.rotation, Matrix3::identity(), epsilon = 1e-15);
        assert_relative_eq!(p.translation, Vector3::zeros(), epsilon = 1e-15);
    }

    #[test]
    fn exp_quarter_turn_about_z() {
        let p = exp_se3(&Twist::new(Vector3::new(0.0, 0.0, FRAC_PI_2), Vector3::zeros()));
        // Rodrigues evaluated directly for a 90 degree z-rotation
        let expected = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert_relative_eq!(p.rotation, expected, epsilon = 1e-12);
        assert_relative_eq!(p.translation, Vector3::zeros(), epsilon = 1e-12);
    }

    #[test]
    fn exp_pure_translation() {
        let p = exp_se3(&Twist::new(Vector3::zeros(), Vector3::new(1.0, 2.0, 3.0)));
        assert_relative_eq!(p.rotation, Matrix3::identity(), epsilon = 1e-15);
        assert_relative_eq!(p.translation, Vector3::new(1.0, 2.0, 3.0), epsilon = 1e-15);
    }

    #[test]
    fn log_of_identity_is_zero() {
        let xi = log_se3(&Pose::identity()).unwrap();
        assert!(xi.norm() < 1e-15);
    }

    #[test]
    fn log_recovers_axis_angle() {
        let p = exp_se3(&Twist::new(Vector3::new(0.0, 0.0, FRAC_PI_2), Vector3::zeros()));
        let xi = log_se3(&p).unwrap();
        assert_relative_eq!(xi.omega, Vector3::new(0.0, 0.0, FRAC_PI_2), epsilon = 1e-12);
    }

    #[test]
    fn log_rejects_near_pi() {
        let p = exp_se3(&Twist::new(Vector3::new(PI - 1e-9, 0.0, 0.0), Vector3::zeros()));
        assert!(matches!(
            log_se3(&p),
            Err(GeometryError::SingularRotation { .. })
        ));
    }

    #[test]
    fn exp_log_round_trip_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let p = random_pose(&mut rng, PI - 1e-3);
            let xi = log_se3(&p).unwrap();
            let q = exp_se3(&xi);
            assert!((q.rotation - p.rotation).norm() < 1e-9);
            assert!((q.translation - p.translation).norm() < 1e-9);
        }
    }

    #[test]
    fn compose_identity_and_inverse_laws() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let p = random_pose(&mut rng, 3.0);
            let id = compose(&Pose::identity(), &p);
            assert!((id.rotation - p.rotation).norm() < 1e-12);
            let pinv = invert(&p);
            let e = compose(&p, &pinv);
            assert!((e.rotation - Matrix3::identity()).norm() < 1e-9);
            assert!(e.translation.norm() < 1e-9);
            let pinvinv = invert(&pinv);
            assert!((pinvinv.rotation - p.rotation).norm() < 1e-9);
            assert!((pinvinv.translation - p.translation).norm() < 1e-9);
        }
    }

    #[test]
    fn compose_is_associative() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..100 {
            let a = random_pose(&mut rng, 3.0);
            let b = random_pose(&mut rng, 3.0);
            let c = random_pose(&mut rng, 3.0);
            let left = compose(&compose(&a, &b), &c);
            let right = compose(&a, &compose(&b, &c));
            assert!((left.rotation - right.rotation).norm() < 1e-9);
            assert!((left.translation - right.translation).norm() < 1e-9);
        }
    }

    #[test]
    fn z_rotations_add_angles() {
        let r30 = exp_se3(&Twist::new(Vector3::new(0.0, 0.0, PI / 6.0), Vector3::zeros()));
        let r60 = exp_se3(&Twist::new(Vector3::new(0.0, 0.0, PI / 3.0), Vector3::zeros()));
        let r90 = exp_se3(&Twist::new(Vector3::new(0.0, 0.0, FRAC_PI_2), Vector3::zeros()));
        let sum = compose(&r30, &r60);
        assert_relative_eq!(sum.rotation, r90.rotation, epsilon = 1e-12);
    }

    #[test]
    fn dq_identity() {
        let q = pose_to_dq(&Pose::identity());
        assert_relative_eq!(q.real.w, 1.0, epsilon = 1e-12);
        assert!(q.real.imag().norm() < 1e-12);
        assert!(q.dual.coords.norm() < 1e-12);
    }

    #[test]
    fn dq_pure_translation_x2() {
        let q = pose_to_dq(&Pose::from_translation(Vector3::new(2.0, 0.0, 0.0)));
        // dual = 0.5 * (0, t) ⊗ (1, 0) = (0, 1, 0, 0)
        assert_relative_eq!(q.dual.w, 0.0, epsilon = 1e-12);
        assert_relative_eq!(q.dual.i, 1.0, epsilon = 1e-12);
        assert_relative_eq!(q.dual.j, 0.0, epsilon = 1e-12);
        assert_relative_eq!(q.dual.k, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn dq_round_trip_and_double_cover() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let p = random_pose(&mut rng, 3.0);
            let q = pose_to_dq(&p);
            let back = dq_to_pose(&q).unwrap();
            assert!((back.rotation - p.rotation).norm() < 1e-9);
            assert!((back.translation - p.translation).norm() < 1e-9);
            let back_neg = dq_to_pose(&q.negated()).unwrap();
            assert!((back_neg.rotation - p.rotation).norm() < 1e-9);
            assert!((back_neg.translation - p.translation).norm() < 1e-9);
        }
    }

    #[test]
    fn dq_orthogonality_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for _ in 0..100 {
            let q = pose_to_dq(&random_pose(&mut rng, 3.0));
            assert!((q.real.norm() - 1.0).abs() < 1e-9);
            assert!(q.real.coords.dot(&q.dual.coords).abs() < 1e-9);
        }
    }
}
