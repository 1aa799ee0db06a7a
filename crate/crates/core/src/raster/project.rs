//! Local-affine (EWA) projection of 3D Gaussians to screen-space splats and
//! its reverse-mode derivative.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};

use crate::camera::Camera;
use crate::gaussian::{sigmoid, Gaussian};
use crate::quat::rotmat_backward;

/// Added to the diagonal of every projected covariance, in pixels².
pub const COV2D_DILATION: f64 = 0.3;
/// Screen-space support in standard deviations.
pub const SUPPORT_SIGMAS: f64 = 3.0;

/// A Gaussian projected into one camera.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Splat {
    pub index: u32,
    pub depth: f64,
    pub mean: Vector2<f64>,
    /// Inverse of the dilated 2D covariance as `(a, b, c)` of `[[a, b], [b, c]]`.
    pub conic: [f64; 3],
    pub opacity: f64,
    pub color: [f64; 3],
    /// Inclusive pixel bounds `(x0, x1, y0, y1)`, clipped to the image.
    pub bbox: [i64; 4],
}

/// Projects a Gaussian; `None` when it is behind the near plane, degenerate,
/// or entirely off screen.
pub(crate) fn project(index: usize, g: &Gaussian, cam: &Camera, near: f64) -> Option<Splat> {
    let t = cam.world_to_camera(&g.position);
    if t.z < near {
        return None;
    }
    let cov2d = projected_covariance(g, cam, &t);
    let det = cov2d[(0, 0)] * cov2d[(1, 1)] - cov2d[(0, 1)] * cov2d[(0, 1)];
    if !(det > 0.0) {
        return None;
    }
    let conic = [cov2d[(1, 1)] / det, -cov2d[(0, 1)] / det, cov2d[(0, 0)] / det];
    let mean = Vector2::new(cam.fx * t.x / t.z + cam.cx, cam.fy * t.y / t.z + cam.cy);
    let mid = 0.5 * (cov2d[(0, 0)] + cov2d[(1, 1)]);
    let lambda_max = mid + (mid * mid - det).max(0.0).sqrt();
    let radius = (SUPPORT_SIGMAS * lambda_max.sqrt()).ceil();
    let bbox = [
        ((mean.x - radius).floor() as i64).max(0),
        ((mean.x + radius).ceil() as i64).min(cam.width as i64 - 1),
        ((mean.y - radius).floor() as i64).max(0),
        ((mean.y + radius).ceil() as i64).min(cam.height as i64 - 1),
    ];
    if bbox[0] > bbox[1] || bbox[2] > bbox[3] {
        return None;
    }
    Some(Splat {
        index: index as u32,
        depth: t.z,
        mean,
        conic,
        opacity: g.opacity(),
        color: [g.color.x, g.color.y, g.color.z],
        bbox,
    })
}

fn jacobian(cam: &Camera, t: &Vector3<f64>) -> Matrix2x3<f64> {
    let iz = 1.0 / t.z;
    Matrix2x3::new(
        cam.fx * iz,
        0.0,
        -cam.fx * t.x * iz * iz,
        0.0,
        cam.fy * iz,
        -cam.fy * t.y * iz * iz,
    )
}

fn view_covariance(g: &Gaussian, cam: &Camera) -> Matrix3<f64> {
    let r = g.rotation.rotation_matrix();
    let m = r * Matrix3::from_diagonal(&g.scale());
    cam.rotation * (m * m.transpose()) * cam.rotation.transpose()
}

fn projected_covariance(g: &Gaussian, cam: &Camera, t: &Vector3<f64>) -> Matrix2<f64> {
    let j = jacobian(cam, t);
    j * view_covariance(g, cam) * j.transpose() + Matrix2::identity() * COV2D_DILATION
}

/// Screen-space gradient accumulated for one splat by the compositing pass.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct SplatGrad {
    pub mean: [f64; 2],
    /// dL/d(a, b, c) of the conic entries, `b` counted once.
    pub conic: [f64; 3],
    /// dL/d(opacity) where opacity = sigmoid(logit).
    pub opacity: f64,
    pub color: [f64; 3],
}

impl SplatGrad {
    pub fn add(&mut self, o: &SplatGrad) {
        for k in 0..2 {
            self.mean[k] += o.mean[k];
        }
        for k in 0..3 {
            self.conic[k] += o.conic[k];
            self.color[k] += o.color[k];
        }
        self.opacity += o.opacity;
    }
}

/// Parameter gradients of one Gaussian.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GaussianGrad {
    pub position: [f64; 3],
    pub log_scale: [f64; 3],
    pub rotation: [f64; 4],
    pub color: [f64; 3],
    pub opacity_logit: f64,
}

impl GaussianGrad {
    /// Flattened in the same order as [`Gaussian::to_params`].
    pub fn to_array(&self) -> [f64; 14] {
        let mut out = [0.0; 14];
        out[0..3].copy_from_slice(&self.position);
        out[3..6].copy_from_slice(&self.log_scale);
        out[6..10].copy_from_slice(&self.rotation);
        out[10..13].copy_from_slice(&self.color);
        out[13] = self.opacity_logit;
        out
    }

    pub fn from_array(a: &[f64; 14]) -> Self {
        Self {
            position: [a[0], a[1], a[2]],
            log_scale: [a[3], a[4], a[5]],
            rotation: [a[6], a[7], a[8], a[9]],
            color: [a[10], a[11], a[12]],
            opacity_logit: a[13],
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self::from_array(&self.to_array().map(|v| v * s))
    }

    pub fn add(&mut self, o: &GaussianGrad) {
        let mut a = self.to_array();
        for (x, y) in a.iter_mut().zip(o.to_array()) {
            *x += y;
        }
        *self = Self::from_array(&a);
    }
}

/// Pulls a splat-space gradient back to the Gaussian's parameters.
pub(crate) fn project_backward(g: &Gaussian, cam: &Camera, sg: &SplatGrad) -> GaussianGrad {
    let t = cam.world_to_camera(&g.position);
    let j = jacobian(cam, &t);
    let v = view_covariance(g, cam);
    let cov2d = j * v * j.transpose() + Matrix2::identity() * COV2D_DILATION;
    let conic = cov2d.try_inverse().unwrap_or_else(Matrix2::zeros);

    // dL/dConic as a symmetric matrix, then through the inverse.
    let gc = Matrix2::new(sg.conic[0], 0.5 * sg.conic[1], 0.5 * sg.conic[1], sg.conic[2]);
    let g_cov2d = -(conic * gc * conic);
    let g_v = j.transpose() * g_cov2d * j;
    let g_j = 2.0 * g_cov2d * j * v;

    // Through V = W Σ W^T and Σ = M M^T with M = R diag(s).
    let g_sigma = cam.rotation.transpose() * g_v * cam.rotation;
    let r = g.rotation.rotation_matrix();
    let s = g.scale();
    let m = r * Matrix3::from_diagonal(&s);
    let g_m = 2.0 * g_sigma * m;
    let g_r = g_m * Matrix3::from_diagonal(&s);
    let mut log_scale = [0.0; 3];
    for (k, ls) in log_scale.iter_mut().enumerate() {
        let g_s: f64 = (0..3).map(|i| g_m[(i, k)] * r[(i, k)]).sum();
        *ls = g_s * s[k];
    }
    let rotation = rotmat_backward(g.rotation, &g_r);

    // Camera-space point: through the projected mean and the Jacobian.
    let (fx, fy) = (cam.fx, cam.fy);
    let (x, y, z) = (t.x, t.y, t.z);
    let (iz, iz2, iz3) = (1.0 / z, 1.0 / (z * z), 1.0 / (z * z * z));
    let gx = sg.mean[0] * fx * iz - g_j[(0, 2)] * fx * iz2;
    let gy = sg.mean[1] * fy * iz - g_j[(1, 2)] * fy * iz2;
    let gz = -sg.mean[0] * fx * x * iz2 - sg.mean[1] * fy * y * iz2 - g_j[(0, 0)] * fx * iz2
        + g_j[(0, 2)] * 2.0 * fx * x * iz3
        - g_j[(1, 1)] * fy * iz2
        + g_j[(1, 2)] * 2.0 * fy * y * iz3;
    let g_pos = cam.rotation.transpose() * Vector3::new(gx, gy, gz);

    let o = sigmoid(g.opacity_logit);
    GaussianGrad {
        position: [g_pos.x, g_pos.y, g_pos.z],
        log_scale,
        rotation,
        color: sg.color,
        opacity_logit: sg.opacity * o * (1.0 - o),
    }
}
