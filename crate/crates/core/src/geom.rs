//! Rotation and pose primitives shared by every Jacobian in the crate.
//!
//! Conventions, used everywhere:
//!
//! * Quaternions are stored scalar-first `[w, x, y, z]`, Hamilton product,
//!   canonical sign `w >= 0`.
//! * An attitude `q` written `q_IG` maps global-frame vectors into the body
//!   frame: `v_I = R(q_IG) v_G`.
//! * The attitude error `dθ` is a left-multiplicative small-angle rotation on
//!   the global-to-body rotation: `R_true = Exp(dθ) · R_est`. It is therefore
//!   expressed in the body frame.
//! * Position errors are additive in the global frame.

use nalgebra::{Matrix3, UnitQuaternion as NaQuat, Vector3, Vector6};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Vec6 = Vector6<f64>;

/// Unit quaternion with scalar-first storage and non-negative scalar part.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnitQuaternion(NaQuat<f64>);

impl UnitQuaternion {
    pub fn identity() -> Self {
        Self(NaQuat::identity())
    }

    /// Builds from `[w, x, y, z]`, normalizing.
    pub fn from_wxyz(w: f64, x: f64, y: f64, z: f64) -> Self {
        let q = nalgebra::Quaternion::new(w, x, y, z);
        Self::canonical(NaQuat::from_quaternion(q))
    }

    /// `Exp` of a rotation vector.
    pub fn exp(rotvec: &Vec3) -> Self {
        Self::canonical(NaQuat::from_scaled_axis(*rotvec))
    }

    pub fn from_rotation_matrix(m: &Mat3) -> Self {
        let rot = nalgebra::Rotation3::from_matrix_unchecked(*m);
        Self::canonical(NaQuat::from_rotation_matrix(&rot))
    }

    fn canonical(q: NaQuat<f64>) -> Self {
        let q = if q.w < 0.0 {
            NaQuat::new_unchecked(-q.into_inner())
        } else {
            q
        };
        Self(NaQuat::new_normalize(q.into_inner()))
    }

    /// `Log`: rotation vector with norm in `[0, π]`.
    pub fn log(&self) -> Vec3 {
        self.0.scaled_axis()
    }

    pub fn wxyz(&self) -> [f64; 4] {
        let q = self.0.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn inverse(&self) -> Self {
        Self::canonical(self.0.inverse())
    }

    pub fn to_rotation_matrix(&self) -> Mat3 {
        self.0.to_rotation_matrix().into_inner()
    }

    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        self.0.transform_vector(v)
    }

    pub fn norm(&self) -> f64 {
        self.0.quaternion().norm()
    }

    /// Angle between two rotations, radians.
    pub fn angle_to(&self, other: &Self) -> f64 {
        quat_compose(other, &self.inverse()).log().norm()
    }
}

impl Default for UnitQuaternion {
    fn default() -> Self {
        Self::identity()
    }
}

/// Hamilton product `a ⊗ b`; `R(a ⊗ b) = R(a) R(b)`.
pub fn quat_compose(a: &UnitQuaternion, b: &UnitQuaternion) -> UnitQuaternion {
    UnitQuaternion::canonical(a.0 * b.0)
}

/// Rigid pose: `orientation` is `q_IG` (global to body), `position` is the
/// body origin in the global frame.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Pose {
    pub orientation: UnitQuaternion,
    pub position: Vec3,
}

impl Pose {
    pub fn new(orientation: UnitQuaternion, position: Vec3) -> Self {
        Self {
            orientation,
            position,
        }
    }

    pub fn identity() -> Self {
        Self::default()
    }
}

/// Retraction on a pose. `delta = [dθ, dp]`.
pub fn boxplus(pose: &Pose, delta: &Vec6) -> Pose {
    let dtheta = delta.fixed_rows::<3>(0).into_owned();
    let dp = delta.fixed_rows::<3>(3).into_owned();
    if dtheta == Vec3::zeros() && dp == Vec3::zeros() {
        return *pose;
    }
    Pose {
        orientation: quat_compose(&UnitQuaternion::exp(&dtheta), &pose.orientation),
        position: pose.position + dp,
    }
}

/// Local chart inverse: `boxplus(b, boxminus(a, b)) == a`.
pub fn boxminus(a: &Pose, b: &Pose) -> Vec6 {
    let dtheta = attitude_error(&a.orientation, &b.orientation);
    let dp = a.position - b.position;
    Vec6::new(dtheta.x, dtheta.y, dtheta.z, dp.x, dp.y, dp.z)
}

/// `dθ` such that `R(a) = Exp(dθ) R(b)`.
pub fn attitude_error(a: &UnitQuaternion, b: &UnitQuaternion) -> Vec3 {
    quat_compose(a, &b.inverse()).log()
}

/// Cross-product matrix: `skew(v) * w == v × w`.
pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn quat_strategy() -> impl Strategy<Value = UnitQuaternion> {
        (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64)
            .prop_filter("non-degenerate", |(w, x, y, z)| w * w + x * x + y * y + z * z > 1e-3)
            .prop_map(|(w, x, y, z)| UnitQuaternion::from_wxyz(w, x, y, z))
    }

    fn vec3_strategy(scale: f64) -> impl Strategy<Value = Vec3> {
        (-scale..scale, -scale..scale, -scale..scale).prop_map(|(x, y, z)| Vec3::new(x, y, z))
    }

    #[test]
    fn compose_identity_and_inverse() {
        let q = UnitQuaternion::exp(&Vec3::new(0.3, -0.2, 1.1));
        let id = UnitQuaternion::identity();
        assert_eq!(quat_compose(&id, &q).wxyz(), q.wxyz());
        let back = quat_compose(&q, &q.inverse());
        assert!(back.angle_to(&id) < 1e-15);
        assert!((back.wxyz()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn canonical_sign() {
        let q = UnitQuaternion::from_wxyz(-0.5, 0.5, 0.5, 0.5);
        assert!(q.wxyz()[0] >= 0.0);
        assert_eq!(q.wxyz(), [0.5, -0.5, -0.5, -0.5]);
    }

    #[test]
    fn boxplus_zero_is_exact() {
        let p = Pose::new(UnitQuaternion::exp(&Vec3::new(0.1, 0.2, 0.3)), Vec3::new(1.0, 2.0, 3.0));
        assert_eq!(boxplus(&p, &Vec6::zeros()), p);
    }

    #[test]
    fn quarter_turn_roll() {
        let p = boxplus(&Pose::identity(), &Vec6::new(FRAC_PI_2, 0.0, 0.0, 0.0, 0.0, 0.0));
        let r = p.orientation.to_rotation_matrix();
        // Closed-form rotation about x by π/2.
        let expected = Mat3::new(1.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0);
        assert!((r - expected).amax() < 1e-15);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let q = p.orientation.wxyz();
        assert!((q[0] - h).abs() < 1e-15 && (q[1] - h).abs() < 1e-15);
    }

    #[test]
    fn skew_basics() {
        assert_eq!(skew(&Vec3::zeros()), Mat3::zeros());
        assert_eq!(skew(&Vec3::x()) * Vec3::y(), Vec3::z());
    }

    proptest! {
        #[test]
        fn compose_matches_matrix_product(a in quat_strategy(), b in quat_strategy()) {
            let c = quat_compose(&a, &b);
            let diff = c.to_rotation_matrix() - a.to_rotation_matrix() * b.to_rotation_matrix();
            prop_assert!(diff.amax() < 1e-12);
            prop_assert!((c.norm() - 1.0).abs() < 1e-12);
            prop_assert!(c.wxyz()[0] >= 0.0);
        }

        #[test]
        fn exp_is_unit(v in vec3_strategy(3.0)) {
            prop_assert!((UnitQuaternion::exp(&v).norm() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn boxminus_inverts_boxplus(q in quat_strategy(), p in vec3_strategy(100.0),
                                    dth in vec3_strategy(1e-3), dp in vec3_strategy(1e-3)) {
            let pose = Pose::new(q, p);
            let delta = Vec6::new(dth.x, dth.y, dth.z, dp.x, dp.y, dp.z);
            let back = boxminus(&boxplus(&pose, &delta), &pose);
            let err = (back - delta).norm();
            prop_assert!(err < 1e-9);
            prop_assert!(err <= delta.norm_squared().max(1e-14));
        }

        #[test]
        fn skew_is_cross_product(v in vec3_strategy(1.0), w in vec3_strategy(1.0)) {
            let s = skew(&v);
            prop_assert!((s * w - v.cross(&w)).amax() < 1e-15);
            prop_assert_eq!(s + s.transpose(), Mat3::zeros());
        }
    }
}
