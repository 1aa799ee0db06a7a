//! Unit quaternions in (w, x, y, z) order.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

/// Tolerance on |q| accepted by [`quat_to_rotmat`].
pub const UNIT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Default for Quat {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl Quat {
    pub const IDENTITY: Quat = Quat {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub const fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    /// Rotation by `angle` radians about `axis` (need not be normalized).
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64) -> Self {
        let axis = axis.normalize();
        let (s, c) = (0.5 * angle).sin_cos();
        Self::new(c, axis.x * s, axis.y * s, axis.z * s)
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn dot(self, o: Quat) -> f64 {
        self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn is_finite(self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// Returns the quaternion scaled to unit length; the zero quaternion maps to identity.
    pub fn normalized(self) -> Self {
        let n = self.norm();
        if n == 0.0 || !n.is_finite() {
            return Self::IDENTITY;
        }
        Self::new(self.w / n, self.x / n, self.y / n, self.z / n)
    }

    /// Rotation matrix of `self / |self|`. Used on render paths where the
    /// normalization is part of the differentiated function.
    pub fn rotation_matrix(self) -> Matrix3<f64> {
        let q = self.normalized();
        rotmat_of_unit(q)
    }

    /// Inverse of [`Quat::rotation_matrix`] for orthonormal input. Returns the
    /// representative with non-negative `w`.
    pub fn from_rotmat(m: &Matrix3<f64>) -> Self {
        let tr = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
        let q = if tr > 0.0 {
            let s = (tr + 1.0).sqrt() * 2.0;
            Quat::new(
                0.25 * s,
                (m[(2, 1)] - m[(1, 2)]) / s,
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(1, 0)] - m[(0, 1)]) / s,
            )
        } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
            let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
            Quat::new(
                (m[(2, 1)] - m[(1, 2)]) / s,
                0.25 * s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
            )
        } else if m[(1, 1)] > m[(2, 2)] {
            let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
            Quat::new(
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                0.25 * s,
                (m[(1, 2)] + m[(2, 1)]) / s,
            )
        } else {
            let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
            Quat::new(
                (m[(1, 0)] - m[(0, 1)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
                (m[(1, 2)] + m[(2, 1)]) / s,
                0.25 * s,
            )
        };
        let q = q.normalized();
        if q.w < 0.0 {
            Quat::new(-q.w, -q.x, -q.y, -q.z)
        } else {
            q
        }
    }

    /// Spherical-linear interpolation along the shorter arc.
    pub fn slerp(self, other: Quat, t: f64) -> Quat {
        let a = self.normalized();
        let mut b = other.normalized();
        let mut cos = a.dot(b);
        if cos < 0.0 {
            b = Quat::new(-b.w, -b.x, -b.y, -b.z);
            cos = -cos;
        }
        let (wa, wb) = if cos > 1.0 - 1e-12 {
            (1.0 - t, t)
        } else {
            let theta = cos.min(1.0).acos();
            let sin = theta.sin();
            (((1.0 - t) * theta).sin() / sin, (t * theta).sin() / sin)
        };
        Quat::new(
            wa * a.w + wb * b.w,
            wa * a.x + wb * b.x,
            wa * a.y + wb * b.y,
            wa * a.z + wb * b.z,
        )
        .normalized()
    }
}

fn rotmat_of_unit(q: Quat) -> Matrix3<f64> {
    let Quat { w, x, y, z } = q;
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

/// Rotation matrix of a unit quaternion.
///
/// Rejects non-finite components and quaternions whose norm is further than
/// [`UNIT_TOLERANCE`] from one.
pub fn quat_to_rotmat(q: Quat) -> Result<Matrix3<f64>> {
    if !q.is_finite() {
        return Err(Error::NonFinite(format!("quaternion {q:?}")));
    }
    let n = q.norm();
    if (n - 1.0).abs() > UNIT_TOLERANCE {
        return Err(Error::InvalidArgument(format!(
            "quaternion norm {n} is not within {UNIT_TOLERANCE} of 1"
        )));
    }
    Ok(rotmat_of_unit(q))
}

/// Partial derivatives of the entries of `rotmat(q / |q|)` contracted with
/// `grad_r` (dL/dR), returned as dL/d(w, x, y, z) of the raw quaternion.
pub(crate) fn rotmat_backward(q: Quat, grad_r: &Matrix3<f64>) -> [f64; 4] {
    let n = q.norm();
    let u = q.normalized();
    let Quat { w, x, y, z } = u;
    let g = grad_r;
    // dR/dw, dR/dx, dR/dy, dR/dz for the unit-quaternion formula.
    let dw = 2.0
        * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)]
            + x * g[(2, 1)]);
    let dx = 2.0
        * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)]
            + z * g[(2, 0)]
            + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]);
    let dy = 2.0
        * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)]
            - w * g[(2, 0)]
            + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]);
    let dz = 2.0
        * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)]
            - 2.0 * z * g[(1, 1)]
            + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)]);
    let gu = [dw, dx, dy, dz];
    // Project through the normalization q / |q|.
    let ua = u.to_array();
    let proj: f64 = gu.iter().zip(ua.iter()).map(|(a, b)| a * b).sum();
    let mut out = [0.0; 4];
    for k in 0..4 {
        out[k] = (gu[k] - proj * ua[k]) / n;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    // Rodrigues' formula, independent of the quaternion route.
    fn axis_angle_matrix(axis: Vector3<f64>, angle: f64) -> Matrix3<f64> {
        let k = axis.normalize();
        let kx = Matrix3::new(0.0, -k.z, k.y, k.z, 0.0, -k.x, -k.y, k.x, 0.0);
        Matrix3::identity() + kx * angle.sin() + kx * kx * (1.0 - angle.cos())
    }

    #[test]
    fn identity_maps_to_identity() {
        let m = quat_to_rotmat(Quat::IDENTITY).unwrap();
        assert_eq!(m, Matrix3::identity());
    }

    #[test]
    fn half_turn_about_z() {
        let m = quat_to_rotmat(Quat::new(0.0, 0.0, 0.0, 1.0)).unwrap();
        assert_eq!(m, Matrix3::from_diagonal(&Vector3::new(-1.0, -1.0, 1.0)));
    }

    #[test]
    fn quarter_turn_about_x_matches_rodrigues() {
        let h = std::f64::consts::FRAC_PI_4;
        let m = quat_to_rotmat(Quat::new(h.cos(), h.sin(), 0.0, 0.0)).unwrap();
        let oracle = axis_angle_matrix(Vector3::x(), std::f64::consts::FRAC_PI_2);
        for c in 0..3 {
            for r in 0..3 {
                assert_relative_eq!(m[(r, c)], oracle[(r, c)], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn rejects_non_finite_and_non_unit() {
        assert!(matches!(
            quat_to_rotmat(Quat::new(f64::NAN, 0.0, 0.0, 0.0)),
            Err(Error::NonFinite(_))
        ));
        assert!(quat_to_rotmat(Quat::new(2.0, 0.0, 0.0, 0.0)).is_err());
    }

    #[test]
    fn slerp_halfway_matches_axis_angle() {
        let b = Quat::from_axis_angle(Vector3::y(), std::f64::consts::FRAC_PI_2);
        let mid = Quat::IDENTITY.slerp(b, 0.5).rotation_matrix();
        let oracle = axis_angle_matrix(Vector3::y(), std::f64::consts::FRAC_PI_4);
        assert_relative_eq!(mid, oracle, epsilon = 1e-12);
    }

    #[test]
    fn rotmat_backward_matches_finite_differences() {
        let q = Quat::new(0.7, -0.3, 0.5, 0.2);
        let g = Matrix3::new(0.3, -1.0, 0.2, 0.5, 0.9, -0.4, 0.1, 0.05, -0.7);
        let f = |q: Quat| q.rotation_matrix().component_mul(&g).sum();
        let analytic = rotmat_backward(q, &g);
        let h = 1e-6;
        for k in 0..4 {
            let mut p = q.to_array();
            let mut m = q.to_array();
            p[k] += h;
            m[k] -= h;
            let fd = (f(Quat::from_array(p)) - f(Quat::from_array(m))) / (2.0 * h);
            assert_relative_eq!(analytic[k], fd, epsilon = 1e-8);
        }
    }

    proptest::proptest! {
        #[test]
        fn matrix_round_trip_recovers_quaternion(
            w in -1.0f64..1.0, x in -1.0f64..1.0, y in -1.0f64..1.0, z in -1.0f64..1.0
        ) {
            let q = Quat::new(w, x, y, z);
            proptest::prop_assume!(q.norm() > 0.1);
            let q = q.normalized();
            let m = quat_to_rotmat(q).unwrap();
            assert_relative_eq!((m * m.transpose()), Matrix3::identity(), epsilon = 1e-12);
            assert_relative_eq!(m.determinant(), 1.0, epsilon = 1e-12);
            let back = Quat::from_rotmat(&m);
            let err = if back.dot(q) >= 0.0 {
                (0..4).map(|k| (back.to_array()[k] - q.to_array()[k]).abs()).fold(0.0, f64::max)
            } else {
                (0..4).map(|k| (back.to_array()[k] + q.to_array()[k]).abs()).fold(0.0, f64::max)
            };
            proptest::prop_assert!(err <= 1e-6);
        }
    }
}
