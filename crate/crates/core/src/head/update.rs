use ndarray::Array2;

use super::OUTPUT_DIM;
use crate::error::{Error, Result};
use crate::gaussian::{GaussianScene, MIN_SCALE};
use crate::raster::SceneGradients;

fn log_scale_range(extent: f64) -> (f64, f64) {
    (MIN_SCALE.ln(), extent.ln())
}

/// Applies residuals `[Δx(3), Δlog s(3), Δc(3), Δα(1)]` per Gaussian.
/// Colors are clamped to [0, 1] and log-scales to the valid range; rotations,
/// features and the Gaussian count are untouched.
pub fn update_scene(scene: &GaussianScene, delta: &Array2<f64>) -> Result<GaussianScene> {
    if delta.dim() != (scene.len(), OUTPUT_DIM) {
        return Err(Error::Shape(format!(
            "residuals {:?} for {} gaussians",
            delta.dim(),
            scene.len()
        )));
    }
    if let Some((i, _)) = delta.rows().into_iter().enumerate().find(|(_, r)| r.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite(format!("residual for gaussian {i}")));
    }
    let (lo, hi) = log_scale_range(scene.extent);
    let mut out = scene.clone();
    for (g, d) in out.gaussians.iter_mut().zip(delta.rows()) {
        for a in 0..3 {
            g.position[a] += d[a];
            g.log_scale[a] = (g.log_scale[a] + d[3 + a]).clamp(lo, hi);
            g.color[a] = (g.color[a] + d[6 + a]).clamp(0.0, 1.0);
        }
        g.opacity_logit += d[9];
    }
    out.normalize_rotations();
    Ok(out)
}

/// Pulls the gradient on the updated scene back to the previous scene and
/// to the residuals. Clamped channels pass no gradient.
pub(crate) fn update_scene_backward(
    scene: &GaussianScene,
    delta: &Array2<f64>,
    d_next: &SceneGradients,
) -> (SceneGradients, Array2<f64>) {
    let (lo, hi) = log_scale_range(scene.extent);
    let mut d_prev = d_next.clone();
    let mut d_delta = Array2::zeros((scene.len(), OUTPUT_DIM));
    for (i, (g, d)) in scene.gaussians.iter().zip(delta.rows()).enumerate() {
        let gn = &d_next.gaussians[i];
        let gp = &mut d_prev.gaussians[i];
        let mut row = d_delta.row_mut(i);
        for a in 0..3 {
            row[a] = gn.position[a];
            let s = g.log_scale[a] + d[3 + a];
            let pass_s = if s > lo && s < hi { gn.log_scale[a] } else { 0.0 };
            gp.log_scale[a] = pass_s;
            row[3 + a] = pass_s;
            let c = g.color[a] + d[6 + a];
            let pass_c = if c > 0.0 && c < 1.0 { gn.color[a] } else { 0.0 };
            gp.color[a] = pass_c;
            row[6 + a] = pass_c;
        }
        row[9] = gn.opacity_logit;
    }
    (d_prev, d_delta)
}
