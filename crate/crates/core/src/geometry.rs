//! Rigid-body poses parameterised as translation + Euler angles, with the
//! analytic rotation derivatives needed by the pose Jacobian.
//!
//! Composition order is fixed as `R = Rz(yaw) * Ry(pitch) * Rx(roll)` with
//! `theta = [roll, pitch, yaw]`. Every consumer of Euler angles in this crate
//! (solver updates, trajectory I/O, evaluation) goes through this module so
//! the convention is declared in exactly one place.

use nalgebra::{Matrix3, Vector3};

/// Pitch magnitude beyond which the Euler parameterisation is close enough to
/// gimbal lock that a warning is worth emitting (the matrix function itself
/// stays well-defined).
pub const GIMBAL_WARN_PITCH: f64 = std::f64::consts::FRAC_PI_2 - 0.05;

/// A rigid transform from a frame's local coordinates into the global frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    /// Translation in metres.
    pub t: Vector3<f64>,
    /// Euler angles `[roll, pitch, yaw]` in radians.
    pub theta: Vector3<f64>,
}

impl Pose {
    pub fn new(t: Vector3<f64>, theta: Vector3<f64>) -> Self {
        Pose { t, theta }
    }

    pub fn identity() -> Self {
        Pose {
            t: Vector3::zeros(),
            theta: Vector3::zeros(),
        }
    }

    /// Rotation matrix of this pose.
    pub fn rotation(&self) -> Matrix3<f64> {
        rotation(&self.theta)
    }

    /// Maps a point from local to global coordinates: `R p + t`.
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + self.t
    }

    /// Maps a point from global back to local coordinates: `Rᵀ (p − t)`.
    pub fn inverse_transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation().transpose() * (p - self.t)
    }

    /// Composes two poses: `(self ∘ other)(p) = self(other(p))`.
    pub fn compose(&self, other: &Pose) -> Pose {
        let r_self = self.rotation();
        let r = r_self * other.rotation();
        Pose {
            t: r_self * other.t + self.t,
            theta: euler_from_rotation(&r),
        }
    }

    /// Inverse transform as a pose.
    pub fn inverse(&self) -> Pose {
        let rt = self.rotation().transpose();
        Pose {
            t: -(rt * self.t),
            theta: euler_from_rotation(&rt),
        }
    }

    /// Wraps all angle components into `(-π, π]`.
    pub fn normalize_angles(&mut self) {
        for k in 0..3 {
            self.theta[k] = normalize_angle(self.theta[k]);
        }
    }

    /// True when the pitch is close enough to ±π/2 that the parameterisation
    /// has nearly lost a degree of freedom.
    pub fn near_gimbal_lock(&self) -> bool {
        self.theta.y.abs() > GIMBAL_WARN_PITCH
    }
}

/// Partial derivatives of the rotation matrix w.r.t. each Euler angle.
#[derive(Debug, Clone, PartialEq)]
pub struct RotationDerivatives {
    pub d_roll: Matrix3<f64>,
    pub d_pitch: Matrix3<f64>,
    pub d_yaw: Matrix3<f64>,
}

impl RotationDerivatives {
    pub fn axis(&self, k: usize) -> &Matrix3<f64> {
        match k {
            0 => &self.d_roll,
            1 => &self.d_pitch,
            2 => &self.d_yaw,
            _ => panic!("rotation derivative axis out of range: {k}"),
        }
    }
}

/// Builds `R = Rz(yaw) * Ry(pitch) * Rx(roll)` from `theta = [roll, pitch, yaw]`.
pub fn rotation(theta: &Vector3<f64>) -> Matrix3<f64> {
    let (sr, cr) = theta.x.sin_cos();
    let (sp, cp) = theta.y.sin_cos();
    let (sy, cy) = theta.z.sin_cos();
    Matrix3::new(
        cy * cp,
        cy * sp * sr - sy * cr,
        cy * sp * cr + sy * sr,
        sy * cp,
        sy * sp * sr + cy * cr,
        sy * sp * cr - cy * sr,
        -sp,
        cp * sr,
        cp * cr,
    )
}

/// Analytic `∂R/∂θ_k` for the `Rz·Ry·Rx` composition.
pub fn rotation_derivatives(theta: &Vector3<f64>) -> RotationDerivatives {
    let (sr, cr) = theta.x.sin_cos();
    let (sp, cp) = theta.y.sin_cos();
    let (sy, cy) = theta.z.sin_cos();

    let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, cr, -sr, 0.0, sr, cr);
    let ry = Matrix3::new(cp, 0.0, sp, 0.0, 1.0, 0.0, -sp, 0.0, cp);
    let rz = Matrix3::new(cy, -sy, 0.0, sy, cy, 0.0, 0.0, 0.0, 1.0);

    let drx = Matrix3::new(0.0, 0.0, 0.0, 0.0, -sr, -cr, 0.0, cr, -sr);
    let dry = Matrix3::new(-sp, 0.0, cp, 0.0, 0.0, 0.0, -cp, 0.0, -sp);
    let drz = Matrix3::new(-sy, -cy, 0.0, cy, -sy, 0.0, 0.0, 0.0, 0.0);

    RotationDerivatives {
        d_roll: rz * ry * drx,
        d_pitch: rz * dry * rx,
        d_yaw: drz * ry * rx,
    }
}

/// Recovers `[roll, pitch, yaw]` from a rotation matrix built by [`rotation`].
///
/// Near pitch = ±π/2 the split between roll and yaw is not unique; roll is
/// set to zero and the remaining angle goes into yaw.
pub fn euler_from_rotation(r: &Matrix3<f64>) -> Vector3<f64> {
    let sp = (-r[(2, 0)]).clamp(-1.0, 1.0);
    let pitch = sp.asin();
    let cp = (1.0 - sp * sp).sqrt();
    if cp > 1e-9 {
        let roll = r[(2, 1)].atan2(r[(2, 2)]);
        let yaw = r[(1, 0)].atan2(r[(0, 0)]);
        Vector3::new(roll, pitch, yaw)
    } else {
        let yaw = (-r[(0, 1)]).atan2(r[(1, 1)]);
        Vector3::new(0.0, pitch, yaw)
    }
}

/// Wraps an angle into `(-π, π]`.
pub fn normalize_angle(a: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    let x = a.rem_euclid(TAU);
    if x > PI {
        x - TAU
    } else {
        x
    }
}

/// Geodesic angle between two rotations: the rotation angle of `RaᵀRb`.
///
/// Uses atan2 of the skew-part magnitude against the trace; unlike the plain
/// arccos form this stays accurate for angles near zero.
pub fn geodesic_angle(ra: &Matrix3<f64>, rb: &Matrix3<f64>) -> f64 {
    let rel = ra.transpose() * rb;
    let sin_vec = Vector3::new(
        rel[(2, 1)] - rel[(1, 2)],
        rel[(0, 2)] - rel[(2, 0)],
        rel[(1, 0)] - rel[(0, 1)],
    ) * 0.5;
    let c = (rel.trace() - 1.0) * 0.5;
    sin_vec.norm().atan2(c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn random_theta(rng: &mut impl Rng) -> Vector3<f64> {
        Vector3::new(
            rng.random_range(-PI..PI),
            rng.random_range(-PI..PI),
            rng.random_range(-PI..PI),
        )
    }

    #[test]
    fn rotation_identity_at_zero() {
        assert_eq!(rotation(&Vector3::zeros()), Matrix3::identity());
    }

    #[test]
    fn quarter_turn_about_z() {
        let r = rotation(&Vector3::new(0.0, 0.0, FRAC_PI_2));
        let v = r * Vector3::new(1.0, 0.0, 0.0);
        assert_relative_eq!(v, Vector3::new(0.0, 1.0, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn rotation_is_orthonormal_with_unit_determinant() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let r = rotation(&random_theta(&mut rng));
            let err = (r * r.transpose() - Matrix3::identity()).norm();
            assert!(err < 1e-12, "orthogonality error {err}");
            assert!((r.determinant() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn derivative_at_identity_is_z_generator() {
        let d = rotation_derivatives(&Vector3::zeros());
        let gen_z = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        assert_relative_eq!(d.d_yaw, gen_z, epsilon = 1e-15);
        // d_roll and d_pitch are the x/y generators at the identity.
        assert_relative_eq!(d.d_roll[(2, 1)], 1.0, epsilon = 1e-15);
        assert_relative_eq!(d.d_pitch[(0, 2)], 1.0, epsilon = 1e-15);
    }

    /// Central finite differences of `rotation` per angle axis.
    fn fd_rotation_derivative(theta: &Vector3<f64>, axis: usize, h: f64) -> Matrix3<f64> {
        let mut plus = *theta;
        let mut minus = *theta;
        plus[axis] += h;
        minus[axis] -= h;
        (rotation(&plus) - rotation(&minus)) / (2.0 * h)
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let h = 1e-6;
        for _ in 0..1000 {
            let theta = random_theta(&mut rng);
            let d = rotation_derivatives(&theta);
            for axis in 0..3 {
                let fd = fd_rotation_derivative(&theta, axis, h);
                let rel = (d.axis(axis) - fd).norm() / fd.norm().max(1e-12);
                assert!(rel < 1e-6, "axis {axis} rel err {rel}");
            }
        }
    }

    #[test]
    fn derivatives_finite_at_gimbal_pitch() {
        let d = rotation_derivatives(&Vector3::new(0.0, FRAC_PI_2, 0.0));
        for axis in 0..3 {
            assert!(d.axis(axis).iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn transform_point_identity_and_translation() {
        let p = Vector3::new(1.0, 2.0, 3.0);
        assert_eq!(Pose::identity().transform_point(&p), p);
        let pose = Pose::new(Vector3::new(1.0, 0.0, 0.0), Vector3::zeros());
        assert_eq!(
            pose.transform_point(&Vector3::zeros()),
            Vector3::new(1.0, 0.0, 0.0)
        );
    }

    #[test]
    fn transform_point_matches_matrix_arithmetic() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for _ in 0..100 {
            let pose = Pose::new(
                Vector3::new(rng.random(), rng.random(), rng.random()),
                random_theta(&mut rng),
            );
            let p = Vector3::new(rng.random(), rng.random(), rng.random());
            let expected = rotation(&pose.theta) * p + pose.t;
            assert_relative_eq!(pose.transform_point(&p), expected, epsilon = 1e-15);
        }
    }

    #[test]
    fn transform_point_jacobian_matches_finite_differences() {
        // d(Rp + t)/d(t, theta) = [I | dR/dtheta_k * p].
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let h = 1e-6;
        for _ in 0..50 {
            let pose = Pose::new(
                Vector3::new(rng.random(), rng.random(), rng.random()),
                random_theta(&mut rng) * 0.9,
            );
            let p = Vector3::new(rng.random(), rng.random(), rng.random());
            let derivs = rotation_derivatives(&pose.theta);
            for k in 0..6 {
                let analytic: Vector3<f64> = if k < 3 {
                    let mut e = Vector3::zeros();
                    e[k] = 1.0;
                    e
                } else {
                    derivs.axis(k - 3) * p
                };
                let mut plus = pose.clone();
                let mut minus = pose.clone();
                if k < 3 {
                    plus.t[k] += h;
                    minus.t[k] -= h;
                } else {
                    plus.theta[k - 3] += h;
                    minus.theta[k - 3] -= h;
                }
                let fd = (plus.transform_point(&p) - minus.transform_point(&p)) / (2.0 * h);
                assert_relative_eq!(analytic, fd, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn angle_normalization_lands_in_half_open_range() {
        assert_eq!(normalize_angle(0.0), 0.0);
        assert_eq!(normalize_angle(PI), PI);
        assert_relative_eq!(normalize_angle(-PI), PI, epsilon = 1e-15);
        assert_relative_eq!(normalize_angle(3.0 * PI), PI, epsilon = 1e-12);
        assert_relative_eq!(normalize_angle(PI + 0.1), -PI + 0.1, epsilon = 1e-12);
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let a: f64 = rng.random_range(-50.0..50.0);
            let n = normalize_angle(a);
            assert!(n > -PI && n <= PI, "{a} -> {n}");
            // Same direction after wrapping.
            assert_relative_eq!(n.sin(), a.sin(), epsilon = 1e-9);
            assert_relative_eq!(n.cos(), a.cos(), epsilon = 1e-9);
        }
    }

    #[test]
    fn euler_round_trip_away_from_gimbal() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        for _ in 0..500 {
            let theta = Vector3::new(
                rng.random_range(-PI..PI),
                rng.random_range(-1.4..1.4),
                rng.random_range(-PI..PI),
            );
            let r = rotation(&theta);
            let back = euler_from_rotation(&r);
            assert!((rotation(&back) - r).norm() < 1e-12);
        }
    }

    #[test]
    fn compose_and_inverse_round_trip() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for _ in 0..100 {
            let a = Pose::new(
                Vector3::new(rng.random(), rng.random(), rng.random()),
                random_theta(&mut rng) * 0.4,
            );
            let p = Vector3::new(rng.random(), rng.random(), rng.random());
            let round = a.inverse().transform_point(&a.transform_point(&p));
            assert_relative_eq!(round, p, epsilon = 1e-12);
            let b = Pose::new(
                Vector3::new(rng.random(), rng.random(), rng.random()),
                random_theta(&mut rng) * 0.4,
            );
            let composed = a.compose(&b).transform_point(&p);
            let sequential = a.transform_point(&b.transform_point(&p));
            assert_relative_eq!(composed, sequential, epsilon = 1e-10);
        }
    }
}
