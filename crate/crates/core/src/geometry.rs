//! SE(3)/SO(3) types and Lie-group arithmetic.
//!
//! All poses are rigid transforms acting as `p' = R p + t`. Tangent vectors
//! (twists) are ordered `[rho, phi]` with the translational part first,
//! following the manif/Sophus convention. The optimizer uses right
//! perturbations throughout: a pose increment `d` updates as `P * exp(d)`.
//!
//! Interesting reads:
//! - Ethan Eade, "Lie groups for 2D and 3D transformations"
//! - Barfoot, "State Estimation for Robotics", ch. 7 (the Q matrix used in
//!   the SE(3) Jacobians)

use nalgebra::{Matrix3, Matrix4, Matrix6, Quaternion, UnitQuaternion, Vector3, Vector6};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Vec6 = Vector6<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Mat4 = Matrix4<f64>;
pub type Mat6 = Matrix6<f64>;

/// Below this rotation angle the sinc-like coefficients switch to their
/// Taylor expansions.
pub const SMALL_ANGLE: f64 = 1e-8;

/// Angle threshold below which the sinc-like coefficients use their series
/// expansions instead of the closed trigonometric formulas.
const TAYLOR_SWITCH: f64 = 1e-2;

/// Margin to pi under which the SO(3) log map is no longer unique.
pub const LOG_UNIQUENESS_MARGIN: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum GeometryError {
    /// The rotation angle is within [`LOG_UNIQUENESS_MARGIN`] of pi, where
    /// the log map is not unique.
    #[error("rotation angle {angle} rad is within {margin} of pi; log map is degenerate")]
    DegenerateRotation { angle: f64, margin: f64 },
}

fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// A rotation in SO(3), stored as a unit quaternion.
///
/// Constructors and compositions renormalize, so the unit-norm invariant
/// holds to ~1e-9 even over long composition chains. The double cover is
/// handled by [`Rotation::angle_to`], which treats `q` and `-q` as the same
/// rotation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation(UnitQuaternion<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(UnitQuaternion::identity())
    }

    /// Build from quaternion components in `(qx, qy, qz, qw)` order, the
    /// order used by every file format in this crate.
    ///
    /// Components already unit-norm within 1e-9 are kept bit-exact, so
    /// file parsing re-serializes byte-identically; anything further off is
    /// normalized.
    pub fn from_quaternion_xyzw(qx: f64, qy: f64, qz: f64, qw: f64) -> Self {
        let q = Quaternion::new(qw, qx, qy, qz);
        if (q.norm() - 1.0).abs() < 1e-9 {
            Rotation(UnitQuaternion::new_unchecked(q))
        } else {
            Rotation(UnitQuaternion::from_quaternion(q))
        }
    }

    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Self {
        let n = axis.norm();
        if n < SMALL_ANGLE {
            return Rotation::identity();
        }
        Rotation(UnitQuaternion::from_axis_angle(
            &nalgebra::Unit::new_normalize(*axis),
            angle,
        ))
    }

    /// Rotation about the world z axis.
    pub fn from_yaw(yaw: f64) -> Self {
        Rotation::from_axis_angle(&Vec3::z(), yaw)
    }

    /// Exponential map of so(3): rotation vector to rotation.
    pub fn exp(phi: &Vec3) -> Self {
        let theta2 = phi.norm_squared();
        if theta2 < SMALL_ANGLE * SMALL_ANGLE {
            // second-order series for the quaternion components
            let real = 1.0 - theta2 / 8.0;
            let imag = 0.5 - theta2 / 48.0;
            Rotation(UnitQuaternion::from_quaternion(Quaternion::from_parts(
                real,
                imag * phi,
            )))
        } else {
            let theta = theta2.sqrt();
            let half = 0.5 * theta;
            Rotation(UnitQuaternion::from_quaternion(Quaternion::from_parts(
                half.cos(),
                (half.sin() / theta) * phi,
            )))
        }
    }

    /// Logarithm map: rotation vector whose norm is the rotation angle in
    /// [0, pi]. Numerically safe for all inputs including angles at pi,
    /// where it returns one of the two valid antipodal results.
    pub fn log(&self) -> Vec3 {
        let q = self.0.quaternion();
        // flip to the hemisphere with non-negative real part (shortest arc)
        let (w, v) = if q.w >= 0.0 {
            (q.w, q.imag())
        } else {
            (-q.w, -q.imag())
        };
        let s = v.norm();
        if s < SMALL_ANGLE {
            // theta/s -> 2/w * (1 - s^2/(3 w^2))
            (2.0 / w) * (1.0 - s * s / (3.0 * w * w)) * v
        } else {
            let theta = 2.0 * s.atan2(w);
            (theta / s) * v
        }
    }

    /// Like [`Rotation::log`], but reports the degenerate near-pi case where
    /// the result is not unique. Callers needing a total function use
    /// [`Rotation::log`] directly.
    pub fn try_log(&self) -> Result<Vec3, GeometryError> {
        let angle = self.angle();
        if angle >= std::f64::consts::PI - LOG_UNIQUENESS_MARGIN {
            return Err(GeometryError::DegenerateRotation {
                angle,
                margin: LOG_UNIQUENESS_MARGIN,
            });
        }
        Ok(self.log())
    }

    pub fn inverse(&self) -> Self {
        Rotation(self.0.inverse())
    }

    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        self.0 * v
    }

    pub fn matrix(&self) -> Mat3 {
        self.0.to_rotation_matrix().into_inner()
    }

    /// Geodesic rotation angle in [0, pi].
    pub fn angle(&self) -> f64 {
        let q = self.0.quaternion();
        2.0 * q.imag().norm().atan2(q.w.abs())
    }

    /// Geodesic distance to another rotation, insensitive to the quaternion
    /// sign (double cover).
    pub fn angle_to(&self, other: &Rotation) -> f64 {
        (self.inverse() * *other).angle()
    }

    /// Components in `(qx, qy, qz, qw)` order.
    pub fn quaternion_xyzw(&self) -> [f64; 4] {
        let q = self.0.quaternion();
        [q.i, q.j, q.k, q.w]
    }

    pub fn norm_error(&self) -> f64 {
        (self.0.quaternion().norm() - 1.0).abs()
    }

    fn renormalized(q: UnitQuaternion<f64>) -> Self {
        Rotation(UnitQuaternion::from_quaternion(*q.quaternion()))
    }
}

impl std::ops::Mul for Rotation {
    type Output = Rotation;
    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation::renormalized(self.0 * rhs.0)
    }
}

/// Distance between two rotations as a geodesic angle in radians.
pub fn rotational_distance(a: &Rotation, b: &Rotation) -> f64 {
    a.angle_to(b)
}

/// A rigid transform in SE(3).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Rotation,
    pub translation: Vec3,
}

/// Lie-algebra coordinates of a pose: translational part `rho` first,
/// rotational part `phi` last.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Twist {
    pub rho: Vec3,
    pub phi: Vec3,
}

impl Twist {
    pub fn zero() -> Self {
        Twist {
            rho: Vec3::zeros(),
            phi: Vec3::zeros(),
        }
    }

    pub fn new(rho: Vec3, phi: Vec3) -> Self {
        Twist { rho, phi }
    }

    pub fn from_vector(v: &Vec6) -> Self {
        Twist {
            rho: Vec3::new(v[0], v[1], v[2]),
            phi: Vec3::new(v[3], v[4], v[5]),
        }
    }

    pub fn as_vector(&self) -> Vec6 {
        Vec6::new(
            self.rho.x, self.rho.y, self.rho.z, self.phi.x, self.phi.y, self.phi.z,
        )
    }

    pub fn norm(&self) -> f64 {
        self.as_vector().norm()
    }
}

/// Coefficients of V = I + c1 [phi]x + c2 [phi]x^2 in the SE(3) exp map.
fn v_coefficients(theta: f64) -> (f64, f64) {
    if theta < TAYLOR_SWITCH {
        let t2 = theta * theta;
        (0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0)
    } else {
        let t2 = theta * theta;
        (
            (1.0 - theta.cos()) / t2,
            (theta - theta.sin()) / (t2 * theta),
        )
    }
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: Rotation::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Rotation, translation: Vec3) -> Self {
        Pose {
            rotation,
            translation,
        }
    }

    pub fn from_parts(translation: [f64; 3], quat_xyzw: [f64; 4]) -> Self {
        Pose {
            rotation: Rotation::from_quaternion_xyzw(
                quat_xyzw[0],
                quat_xyzw[1],
                quat_xyzw[2],
                quat_xyzw[3],
            ),
            translation: Vec3::new(translation[0], translation[1], translation[2]),
        }
    }

    pub fn inverse(&self) -> Self {
        let rinv = self.rotation.inverse();
        Pose {
            rotation: rinv,
            translation: -rinv.rotate(&self.translation),
        }
    }

    /// Apply the transform to a point: `R p + t`.
    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation.rotate(p) + self.translation
    }

    /// 4x4 homogeneous matrix.
    pub fn matrix(&self) -> Mat4 {
        let mut m = Mat4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&self.rotation.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// SE(3) exponential map.
    pub fn exp(xi: &Twist) -> Self {
        let theta = xi.phi.norm();
        let (c1, c2) = v_coefficients(theta);
        let px = skew(&xi.phi);
        let v = Mat3::identity() + c1 * px + c2 * (px * px);
        Pose {
            rotation: Rotation::exp(&xi.phi),
            translation: v * xi.rho,
        }
    }

    /// SE(3) logarithm map. Total; near-pi rotations use the numerically
    /// safe branch and return one of the two valid results.
    pub fn log(&self) -> Twist {
        let phi = self.rotation.log();
        let rho = v_inverse(&phi) * self.translation;
        Twist { rho, phi }
    }

    /// Logarithm that reports the degenerate near-pi rotation case.
    pub fn try_log(&self) -> Result<Twist, GeometryError> {
        self.rotation.try_log()?;
        Ok(self.log())
    }

    /// Adjoint matrix mapping right-frame twists: `Ad_X = [[R, [t]x R], [0, R]]`.
    pub fn adjoint(&self) -> Mat6 {
        let r = self.rotation.matrix();
        let tr = skew(&self.translation) * r;
        let mut ad = Mat6::zeros();
        ad.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        ad.fixed_view_mut::<3, 3>(0, 3).copy_from(&tr);
        ad.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
        ad
    }
}

impl std::ops::Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        Pose {
            rotation: self.rotation * rhs.rotation,
            translation: self.rotation.rotate(&rhs.translation) + self.translation,
        }
    }
}

/// Composition `a * b`.
pub fn compose(a: &Pose, b: &Pose) -> Pose {
    *a * *b
}

/// Relative pose `inverse(a) * b`, the unique `X` with `compose(a, X) = b`.
pub fn relative(a: &Pose, b: &Pose) -> Pose {
    a.inverse() * *b
}

/// Euclidean distance between the translations of two poses.
pub fn translational_distance(a: &Pose, b: &Pose) -> f64 {
    (a.translation - b.translation).norm()
}

/// V^-1 of the SE(3) log map.
fn v_inverse(phi: &Vec3) -> Mat3 {
    let theta = phi.norm();
    let px = skew(phi);
    let c = if theta < TAYLOR_SWITCH {
        let t2 = theta * theta;
        1.0 / 12.0 + t2 / 720.0
    } else {
        let t2 = theta * theta;
        let a = theta.sin() / theta;
        let b = (1.0 - theta.cos()) / t2;
        (1.0 - a / (2.0 * b)) / t2
    };
    Mat3::identity() - 0.5 * px + c * (px * px)
}

/// Inverse of the SO(3) left Jacobian.
fn so3_left_jacobian_inverse(phi: &Vec3) -> Mat3 {
    let theta = phi.norm();
    let px = skew(phi);
    let c = if theta < TAYLOR_SWITCH {
        let t2 = theta * theta;
        1.0 / 12.0 + t2 / 720.0
    } else if theta > std::f64::consts::PI - LOG_UNIQUENESS_MARGIN {
        1.0 / (theta * theta)
    } else {
        let t2 = theta * theta;
        1.0 / t2 - (1.0 + theta.cos()) / (2.0 * theta * theta.sin())
    };
    Mat3::identity() - 0.5 * px + c * (px * px)
}

/// Q matrix of the SE(3) left Jacobian (Barfoot eq. 7.86).
fn se3_q_matrix(rho: &Vec3, phi: &Vec3) -> Mat3 {
    let theta = phi.norm();
    let rx = skew(rho);
    let px = skew(phi);
    let (c1, c2, c3) = if theta < TAYLOR_SWITCH {
        let t2 = theta * theta;
        let t4 = t2 * t2;
        (
            1.0 / 6.0 - t2 / 120.0 + t4 / 5040.0,
            1.0 / 24.0 - t2 / 720.0 + t4 / 40320.0,
            1.0 / 120.0 - t2 / 2520.0,
        )
    } else {
        let t2 = theta * theta;
        let t4 = t2 * t2;
        let (s, c) = theta.sin_cos();
        (
            (theta - s) / (t2 * theta),
            (t2 + 2.0 * c - 2.0) / (2.0 * t4),
            (2.0 * theta - 3.0 * s + theta * c) / (2.0 * t4 * theta),
        )
    };
    let pxrx = px * rx;
    let rxpx = rx * px;
    let pxrxpx = pxrx * px;
    0.5 * rx
        + c1 * (pxrx + rxpx + pxrxpx)
        + c2 * (px * pxrx + rxpx * px - 3.0 * pxrxpx)
        + c3 * (pxrxpx * px + px * pxrxpx)
}

/// Inverse of the SE(3) left Jacobian at `xi`.
fn se3_left_jacobian_inverse(xi: &Twist) -> Mat6 {
    let jinv = so3_left_jacobian_inverse(&xi.phi);
    let q = se3_q_matrix(&xi.rho, &xi.phi);
    let tr = -jinv * q * jinv;
    let mut m = Mat6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&jinv);
    m.fixed_view_mut::<3, 3>(0, 3).copy_from(&tr);
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&jinv);
    m
}

/// Inverse of the SE(3) right Jacobian at `xi`: `Jr^-1(xi) = Jl^-1(-xi)`.
///
/// This is the derivative of `log(Z exp(d))` with respect to `d` at `d = 0`,
/// evaluated at `xi = log(Z)` — the building block of every SE(3) edge
/// Jacobian under the right-perturbation convention.
pub fn se3_right_jacobian_inverse(xi: &Twist) -> Mat6 {
    se3_left_jacobian_inverse(&Twist {
        rho: -xi.rho,
        phi: -xi.phi,
    })
}

pub(crate) fn skew_matrix(v: &Vec3) -> Mat3 {
    skew(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    pub fn random_pose(rng: &mut impl Rng, trans_scale: f64, max_angle: f64) -> Pose {
        let axis = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let angle = rng.random_range(0.0..max_angle);
        let t = Vec3::new(
            rng.random_range(-trans_scale..trans_scale),
            rng.random_range(-trans_scale..trans_scale),
            rng.random_range(-trans_scale..trans_scale),
        );
        Pose::new(Rotation::from_axis_angle(&axis, angle), t)
    }

    #[test]
    fn identity_compose_is_neutral() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let p = random_pose(&mut rng, 5.0, 3.0);
        let left = compose(&Pose::identity(), &p);
        let right = compose(&p, &Pose::identity());
        assert_abs_diff_eq!(
            (left.translation - p.translation).norm(),
            0.0,
            epsilon = 1e-12
        );
        assert!(left.rotation.angle_to(&p.rotation) < 1e-12);
        assert!(right.rotation.angle_to(&p.rotation) < 1e-12);
    }

    #[test]
    fn compose_with_inverse_is_identity() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        for _ in 0..100 {
            let p = random_pose(&mut rng, 10.0, 3.1);
            let e = compose(&p, &p.inverse());
            assert!(e.translation.norm() < 1e-9);
            assert!(e.rotation.angle() < 1e-9);
        }
    }

    #[test]
    fn compose_matches_homogeneous_matrix_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for _ in 0..200 {
            let a = random_pose(&mut rng, 5.0, 3.0);
            let b = random_pose(&mut rng, 5.0, 3.0);
            let c = compose(&a, &b);
            let m = a.matrix() * b.matrix();
            let diff = (c.matrix() - m).abs().max();
            assert!(diff < 1e-12, "max elem error {diff}");
        }
    }

    #[test]
    fn compose_is_associative() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let a = random_pose(&mut rng, 3.0, 3.0);
            let b = random_pose(&mut rng, 3.0, 3.0);
            let c = random_pose(&mut rng, 3.0, 3.0);
            let ab_c = compose(&compose(&a, &b), &c);
            let a_bc = compose(&a, &compose(&b, &c));
            assert!((ab_c.translation - a_bc.translation).norm() < 1e-9);
            assert!(ab_c.rotation.angle_to(&a_bc.rotation) < 1e-9);
        }
    }

    #[test]
    fn relative_trivial_cases() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let p = random_pose(&mut rng, 5.0, 3.0);
        let r = relative(&p, &p);
        assert!(r.translation.norm() < 1e-12);
        assert!(r.rotation.angle() < 1e-12);

        let r2 = relative(&Pose::identity(), &p);
        assert!((r2.translation - p.translation).norm() < 1e-12);
        assert!(r2.rotation.angle_to(&p.rotation) < 1e-12);
    }

    #[test]
    fn relative_round_trip() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        for _ in 0..500 {
            let a = random_pose(&mut rng, 10.0, 3.1);
            let b = random_pose(&mut rng, 10.0, 3.1);
            let back = compose(&a, &relative(&a, &b));
            assert!((back.translation - b.translation).norm() < 1e-12);
            assert!(back.rotation.angle_to(&b.rotation) < 1e-12);
        }
    }

    #[test]
    fn exp_of_zero_twist_is_identity() {
        let p = Pose::exp(&Twist::zero());
        assert_eq!(p.translation, Vec3::zeros());
        assert_eq!(p.rotation.angle(), 0.0);
    }

    #[test]
    fn exp_pure_translation() {
        let xi = Twist::new(Vec3::new(1.0, 2.0, 3.0), Vec3::zeros());
        let p = Pose::exp(&xi);
        assert_abs_diff_eq!(p.translation.x, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p.translation.y, 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p.translation.z, 3.0, epsilon = 1e-15);
        assert!(p.rotation.angle() < 1e-15);
    }

    #[test]
    fn exp_log_round_trip_random_twists() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let mut max_err: f64 = 0.0;
        for _ in 0..1000 {
            let axis = Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            )
            .normalize();
            let angle = rng.random_range(1e-12..3.0);
            let xi = Twist::new(
                Vec3::new(
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-5.0..5.0),
                ),
                axis * angle,
            );
            let back = Pose::exp(&xi).log();
            let err = (back.as_vector() - xi.as_vector()).norm();
            max_err = max_err.max(err);
        }
        assert!(max_err < 1e-9, "max twist error {max_err}");
    }

    #[test]
    fn log_exp_round_trip_poses() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        for _ in 0..1000 {
            let p = random_pose(&mut rng, 5.0, std::f64::consts::PI - 1e-3);
            let back = Pose::exp(&p.log());
            assert!((back.translation - p.translation).norm() < 1e-9);
            assert!(back.rotation.angle_to(&p.rotation) < 1e-9);
        }
    }

    #[test]
    fn try_log_reports_near_pi() {
        let r = Rotation::from_axis_angle(&Vec3::x(), std::f64::consts::PI - 1e-9);
        let p = Pose::new(r, Vec3::zeros());
        assert!(matches!(
            p.try_log(),
            Err(GeometryError::DegenerateRotation { .. })
        ));
        // the total log still produces a usable answer
        let back = Pose::exp(&p.log());
        assert!(back.rotation.angle_to(&p.rotation) < 1e-6);
    }

    #[test]
    fn transform_point_trivial_and_oracle() {
        let p = Vec3::new(1.0, -2.0, 0.5);
        assert_eq!(Pose::identity().transform_point(&p), p);

        let t = Pose::new(Rotation::identity(), Vec3::new(3.0, 0.0, -1.0));
        assert_eq!(t.transform_point(&p), Vec3::new(4.0, -2.0, -0.5));

        let mut rng = ChaCha12Rng::seed_from_u64(9);
        for _ in 0..200 {
            let x = random_pose(&mut rng, 5.0, 3.0);
            let got = x.transform_point(&p);
            let h = x.matrix() * nalgebra::Vector4::new(p.x, p.y, p.z, 1.0);
            assert!((got - Vec3::new(h.x, h.y, h.z)).norm() < 1e-12);
        }
    }

    #[test]
    fn rotational_distance_quarter_turn() {
        let r = Rotation::from_yaw(std::f64::consts::FRAC_PI_2);
        let d = rotational_distance(&r, &Rotation::identity());
        assert_abs_diff_eq!(d, std::f64::consts::FRAC_PI_2, epsilon = 1e-12);
    }

    #[test]
    fn rotational_distance_matches_trace_formula() {
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        for _ in 0..500 {
            let a = random_pose(&mut rng, 1.0, 3.1).rotation;
            let b = random_pose(&mut rng, 1.0, 3.1).rotation;
            let rel = (a.inverse() * b).matrix();
            let cos_theta = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
            let oracle = cos_theta.acos();
            assert_abs_diff_eq!(rotational_distance(&a, &b), oracle, epsilon = 1e-7);
        }
    }

    #[test]
    fn double_cover_negated_quaternion_is_same_rotation() {
        let a = Rotation::from_quaternion_xyzw(0.1, 0.2, 0.3, 0.9);
        let b = Rotation::from_quaternion_xyzw(-0.1, -0.2, -0.3, -0.9);
        assert!(rotational_distance(&a, &b) < 1e-12);
    }

    #[test]
    fn constructors_produce_unit_quaternions() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let mut r = Rotation::from_quaternion_xyzw(3.0, -1.0, 2.0, 0.5);
        assert!(r.norm_error() < 1e-9);
        for _ in 0..10000 {
            let q = random_pose(&mut rng, 1.0, 3.1).rotation;
            r = r * q;
            assert!(r.norm_error() < 1e-9);
        }
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        prop_compose! {
            fn arb_pose()(
                tx in -10.0..10.0f64, ty in -10.0..10.0f64, tz in -10.0..10.0f64,
                ax in -1.0..1.0f64, ay in -1.0..1.0f64, az in -1.0..1.0f64,
                angle in 0.0..3.1f64,
            ) -> Pose {
                Pose::new(
                    Rotation::from_axis_angle(&Vec3::new(ax, ay, az), angle),
                    Vec3::new(tx, ty, tz),
                )
            }
        }

        proptest! {
            #[test]
            fn exp_log_round_trip(p in arb_pose()) {
                let back = Pose::exp(&p.log());
                prop_assert!((back.translation - p.translation).norm() < 1e-9);
                prop_assert!(back.rotation.angle_to(&p.rotation) < 1e-9);
            }

            #[test]
            fn relative_is_unique_solution(a in arb_pose(), b in arb_pose()) {
                let r = relative(&a, &b);
                let back = compose(&a, &r);
                prop_assert!((back.translation - b.translation).norm() < 1e-9);
                prop_assert!(back.rotation.angle_to(&b.rotation) < 1e-9);
            }

            #[test]
            fn inverse_cancels(p in arb_pose()) {
                let e = compose(&p, &p.inverse());
                prop_assert!(e.translation.norm() < 1e-9);
                prop_assert!(e.rotation.angle() < 1e-9);
            }
        }
    }
}
