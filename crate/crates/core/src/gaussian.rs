//! Gaussian primitives and the scene state that refinement mutates.

use nalgebra::{Matrix3, Vector3};
use ndarray::Array2;

use crate::error::{ensure_finite, Error, Result};
use crate::quat::Quat;

/// Smallest per-axis standard deviation a Gaussian may take.
pub const MIN_SCALE: f64 = 1e-6;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// One anisotropic 3D Gaussian.
///
/// Scales live in log space and opacity in logit space so that additive
/// residual updates can never leave the valid range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian {
    pub position: Vector3<f64>,
    /// Log of the per-axis standard deviation.
    pub log_scale: Vector3<f64>,
    pub rotation: Quat,
    /// Linear RGB in `[0, 1]`.
    pub color: Vector3<f64>,
    pub opacity_logit: f64,
}

impl Gaussian {
    pub fn isotropic(position: Vector3<f64>, scale: f64, color: Vector3<f64>, opacity: f64) -> Self {
        Self {
            position,
            log_scale: Vector3::repeat(scale.ln()),
            rotation: Quat::IDENTITY,
            color,
            opacity_logit: logit(opacity),
        }
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn scale(&self) -> Vector3<f64> {
        self.log_scale.map(f64::exp)
    }

    /// The 14 parameters in file order: position, log-scale, quaternion, color, opacity logit.
    pub fn to_params(&self) -> [f64; 14] {
        let q = self.rotation.to_array();
        [
            self.position.x,
            self.position.y,
            self.position.z,
            self.log_scale.x,
            self.log_scale.y,
            self.log_scale.z,
            q[0],
            q[1],
            q[2],
            q[3],
            self.color.x,
            self.color.y,
            self.color.z,
            self.opacity_logit,
        ]
    }

    pub fn from_params(p: &[f64; 14]) -> Self {
        Self {
            position: Vector3::new(p[0], p[1], p[2]),
            log_scale: Vector3::new(p[3], p[4], p[5]),
            rotation: Quat::new(p[6], p[7], p[8], p[9]),
            color: Vector3::new(p[10], p[11], p[12]),
            opacity_logit: p[13],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_params().iter().all(|v| v.is_finite())
    }
}

/// Covariance `R diag(exp(2 log_scale)) R^T` of a Gaussian.
pub fn gaussian_covariance(g: &Gaussian) -> Result<Matrix3<f64>> {
    ensure_finite(&g.to_params(), || "gaussian parameters".into())?;
    let r = g.rotation.rotation_matrix();
    let s2 = Matrix3::from_diagonal(&g.log_scale.map(|l| (2.0 * l).exp()));
    let cov = r * s2 * r.transpose();
    // Symmetrize away rounding.
    Ok(0.5 * (cov + cov.transpose()))
}

/// The mutable 3D state: Gaussians plus one appearance feature row per Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianScene {
    pub gaussians: Vec<Gaussian>,
    /// `N x D_f` per-Gaussian features. `D_f` may be zero.
    pub features: Array2<f64>,
    /// Radius of the scene's bounding sphere, world units.
    pub extent: f64,
}

impl GaussianScene {
    pub fn new(gaussians: Vec<Gaussian>, features: Array2<f64>, extent: f64) -> Result<Self> {
        let scene = Self {
            gaussians,
            features,
            extent,
        };
        scene.validate()?;
        Ok(scene)
    }

    /// Scene without appearance features.
    pub fn without_features(gaussians: Vec<Gaussian>, extent: f64) -> Result<Self> {
        let n = gaussians.len();
        Self::new(gaussians, Array2::zeros((n, 0)), extent)
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.nrows() != self.gaussians.len() {
            return Err(Error::Shape(format!(
                "feature rows {} != gaussian count {}",
                self.features.nrows(),
                self.gaussians.len()
            )));
        }
        if !(self.extent > 0.0 && self.extent.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "scene extent must be positive, got {}",
                self.extent
            )));
        }
        self.check_finite()
    }

    /// Errors naming the first Gaussian with a non-finite parameter.
    pub fn check_finite(&self) -> Result<()> {
        if let Some(i) = self.gaussians.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gaussian {i} has non-finite parameters")));
        }
        if self.features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("scene features".into()));
        }
        Ok(())
    }

    /// Re-normalizes every quaternion.
    pub fn normalize_rotations(&mut self) {
        for g in &mut self.gaussians {
            g.rotation = g.rotation.normalized();
        }
    }

    /// Clamps log-scales to `[ln MIN_SCALE, ln extent]` and colors to `[0, 1]`.
    pub fn clamp_ranges(&mut self) {
        let (lo, hi) = (MIN_SCALE.ln(), self.extent.ln());
        for g in &mut self.gaussians {
            g.log_scale = g.log_scale.map(|l| l.clamp(lo, hi));
            g.color = g.color.map(|c| c.clamp(0.0, 1.0));
        }
    }

    /// Axis-aligned bounds of the Gaussian means, `None` for an empty scene.
    pub fn bounds(&self) -> Option<(Vector3<f64>, Vector3<f64>)> {
        let first = self.gaussians.first()?.position;
        Some(self.gaussians.iter().fold((first, first), |(lo, hi), g| {
            (lo.inf(&g.position), hi.sup(&g.position))
        }))
    }

    pub fn centroid(&self) -> Vector3<f64> {
        if self.is_empty() {
            return Vector3::zeros();
        }
        self.gaussians.iter().map(|g| g.position).sum::<Vector3<f64>>() / self.len() as f64
    }
}
