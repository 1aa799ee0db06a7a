//! Pinhole cameras. Camera frame: +x right, +y down, +z forward. Pixel
//! `(i, j)` is centered at image coordinate `(i, j)`.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::quat::Quat;

pub const ORTHONORMAL_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    /// Rotation block of the world-to-camera transform.
    pub rotation: Matrix3<f64>,
    /// Translation of the world-to-camera transform.
    pub translation: Vector3<f64>,
}

impl Camera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            rotation,
            translation,
        };
        cam.validate(ORTHONORMAL_TOLERANCE)?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target`; `up` is the approximate world up
    /// direction (image rows run opposite to it).
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        fx: f64,
        width: u32,
        height: u32,
    ) -> Result<Self> {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up);
        if right.norm() < 1e-9 {
            return Err(Error::InvalidArgument("look_at: up is parallel to view direction".into()));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        Self::new(
            fx,
            fx,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
            width,
            height,
            rotation,
            translation,
        )
    }

    pub fn validate(&self, tol: f64) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy]
            .iter()
            .chain(self.rotation.iter())
            .chain(self.translation.iter())
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite("camera parameters".into()));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::InvalidArgument("focal lengths must be positive".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidArgument("image size must be positive".into()));
        }
        let r = &self.rotation;
        let ortho = (r * r.transpose() - Matrix3::identity()).abs().max();
        let det = r.determinant();
        if ortho > tol || (det - 1.0).abs() > tol {
            return Err(Error::InvalidArgument(format!(
                "rotation is not orthonormal (deviation {ortho:e}, det {det})"
            )));
        }
        Ok(())
    }

    /// Replaces the rotation block with its nearest rotation (polar decomposition).
    pub fn reorthonormalize(&mut self) {
        let svd = self.rotation.svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut r = u * vt;
        if r.determinant() < 0.0 {
            let mut u = u;
            u.column_mut(2).neg_mut();
            r = u * vt;
        }
        self.rotation = r;
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Camera-frame point at pixel `(u, v)` with depth `z` along the optical axis.
    pub fn unproject_to_camera(&self, u: f64, v: f64, z: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) * z / self.fx, (v - self.cy) * z / self.fy, z)
    }

    pub fn unproject_to_world(&self, u: f64, v: f64, z: f64) -> Vector3<f64> {
        let pc = self.unproject_to_camera(u, v, z);
        self.rotation.transpose() * (pc - self.translation)
    }
}

/// An observed image together with the camera that took it.
#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub image: Image,
    pub camera: Camera,
}

impl View {
    pub fn new(image: Image, camera: Camera) -> Result<Self> {
        if image.width != camera.width as usize || image.height != camera.height as usize {
            return Err(Error::Shape(format!(
                "image {}x{} does not match camera {}x{}",
                image.width, image.height, camera.width, camera.height
            )));
        }
        Ok(Self { image, camera })
    }
}

/// Camera between `a` (t = 0) and `b` (t = 1): rotation by slerp, translation
/// and intrinsics linearly.
pub fn interpolate_cameras(a: &Camera, b: &Camera, t: f64) -> Result<Camera> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("interpolation parameter {t} outside [0, 1]")));
    }
    if a.width != b.width || a.height != b.height {
        return Err(Error::InvalidArgument("cameras have different resolutions".into()));
    }
    if t == 0.0 {
        return Ok(a.clone());
    }
    if t == 1.0 {
        return Ok(b.clone());
    }
    let lerp = |x: f64, y: f64| x + t * (y - x);
    let qa = Quat::from_rotmat(&a.rotation);
    let qb = Quat::from_rotmat(&b.rotation);
    Camera::new(
        lerp(a.fx, b.fx),
        lerp(a.fy, b.fy),
        lerp(a.cx, b.cx),
        lerp(a.cy, b.cy),
        a.width,
        a.height,
        qa.slerp(qb, t).rotation_matrix(),
        a.translation.lerp(&b.translation, t),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn cam(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Camera {
        Camera::new(50.0, 50.0, 15.5, 15.5, 32, 32, rotation, translation).unwrap()
    }

    #[test]
    fn endpoints_are_exact() {
        let a = cam(Matrix3::identity(), Vector3::new(0.1, 0.2, 3.0));
        let b = cam(
            Quat::from_axis_angle(Vector3::y(), 0.7).rotation_matrix(),
            Vector3::new(-0.4, 0.0, 2.5),
        );
        assert_eq!(interpolate_cameras(&a, &b, 0.0).unwrap(), a);
        assert_eq!(interpolate_cameras(&a, &b, 1.0).unwrap(), b);
        assert!(interpolate_cameras(&a, &b, 1.5).is_err());
        assert!(interpolate_cameras(&a, &b, -0.1).is_err());
    }

    #[test]
    fn midpoint_rotation_is_half_angle() {
        let a = cam(Matrix3::identity(), Vector3::zeros());
        let b = cam(
            Quat::from_axis_angle(Vector3::y(), std::f64::consts::FRAC_PI_2).rotation_matrix(),
            Vector3::new(0.0, 0.0, 2.0),
        );
        let mid = interpolate_cameras(&a, &b, 0.5).unwrap();
        let angle = std::f64::consts::FRAC_PI_4;
        let (s, c) = angle.sin_cos();
        let oracle = Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c);
        assert_relative_eq!(mid.rotation, oracle, epsilon = 1e-12);
        assert_relative_eq!(mid.translation, Vector3::new(0.0, 0.0, 1.0), epsilon = 1e-15);
    }

    #[test]
    fn mismatched_resolution_rejected() {
        let a = cam(Matrix3::identity(), Vector3::zeros());
        let mut b = a.clone();
        b.width = 16;
        assert!(interpolate_cameras(&a, &b, 0.5).is_err());
    }

    #[test]
    fn look_at_centers_target() {
        let c = Camera::look_at(
            Vector3::new(3.0, -1.0, 2.0),
            Vector3::new(0.1, 0.2, 0.3),
            Vector3::new(0.0, -1.0, 0.0),
            40.0,
            24,
            24,
        )
        .unwrap();
        let p = c.world_to_camera(&Vector3::new(0.1, 0.2, 0.3));
        assert_relative_eq!(p.x, 0.0, epsilon = 1e-12);
        assert_relative_eq!(p.y, 0.0, epsilon = 1e-12);
        assert!(p.z > 0.0);
        assert_relative_eq!(c.center(), Vector3::new(3.0, -1.0, 2.0), epsilon = 1e-12);
    }

    #[test]
    fn reorthonormalize_fixes_small_drift() {
        let mut c = cam(Matrix3::identity(), Vector3::zeros());
        c.rotation[(0, 1)] = 5e-6;
        assert!(c.validate(ORTHONORMAL_TOLERANCE).is_err());
        c.reorthonormalize();
        assert!(c.validate(1e-12).is_ok());
    }
}
