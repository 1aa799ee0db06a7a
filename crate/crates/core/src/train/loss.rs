use rayon::prelude::*;

use crate::camera::View;
use crate::error::{Error, Result};
use crate::features::{extract_features, extract_features_backward, FeatureExtractorSpec};
use crate::gaussian::GaussianScene;
use crate::image::Image;
use crate::raster::{render_backward, RenderOptions, RenderOutput, SceneGradients};

/// Photometric loss on a set of views: mean per-view MSE, plus optionally
/// `feature_weight` times the mean per-view feature-map MSE.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewLoss {
    pub feature_weight: f64,
    pub features: FeatureExtractorSpec,
}

impl ViewLoss {
    pub fn rgb_only() -> Self {
        Self {
            feature_weight: 0.0,
            features: FeatureExtractorSpec::Handcrafted,
        }
    }
}

/// Loss value, per-view photometric MSE, and the loss gradient on each
/// rendered image.
pub(crate) struct ImageLoss {
    pub value: f64,
    pub view_mse: Vec<f64>,
    pub image_grads: Vec<Image>,
}

pub(crate) fn image_loss(renders: &[RenderOutput], views: &[View], loss: &ViewLoss, scale: f64) -> Result<ImageLoss> {
    if renders.len() != views.len() || views.is_empty() {
        return Err(Error::Shape(format!("{} renders for {} views", renders.len(), views.len())));
    }
    let m = views.len() as f64;
    let per_view: Vec<(f64, f64, Image)> = renders
        .par_iter()
        .zip(views.par_iter())
        .map(|(r, v)| {
            let mse = r.image.mse(&v.image)?;
            let n = r.image.data.len() as f64;
            let mut grad = r.image.clone();
            for (g, t) in grad.data.iter_mut().zip(&v.image.data) {
                *g = scale * 2.0 * (*g - t) / (n * m);
            }
            let mut value = mse;
            if loss.feature_weight != 0.0 {
                let fr = extract_features(&r.image, &loss.features)?;
                let ft = extract_features(&v.image, &loss.features)?;
                let fmse = fr.mse(&ft)?;
                value += loss.feature_weight * fmse;
                let nf = fr.data.len() as f64;
                let mut df = fr.clone();
                for (d, t) in df.data.iter_mut().zip(&ft.data) {
                    *d = scale * loss.feature_weight * 2.0 * (*d - t) / (nf * m);
                }
                let back = extract_features_backward(&r.image, &loss.features, &df)?;
                for (g, b) in grad.data.iter_mut().zip(&back.data) {
                    *g += b;
                }
            }
            Ok((mse, value, grad))
        })
        .collect::<Result<_>>()?;
    let value = scale * per_view.iter().map(|p| p.1).sum::<f64>() / m;
    let view_mse = per_view.iter().map(|p| p.0).collect();
    let image_grads = per_view.into_iter().map(|p| p.2).collect();
    Ok(ImageLoss {
        value,
        view_mse,
        image_grads,
    })
}

/// Scene gradient of a loss whose image gradients are given, summed over
/// views in order.
pub(crate) fn scene_gradient(
    scene: &GaussianScene,
    views: &[View],
    image_grads: &[Image],
    opts: &RenderOptions,
) -> Result<SceneGradients> {
    let parts: Vec<SceneGradients> = views
        .par_iter()
        .zip(image_grads.par_iter())
        .map(|(v, g)| render_backward(scene, &v.camera, opts, g))
        .collect::<Result<_>>()?;
    let mut total = SceneGradients::zeros(scene.len());
    for p in &parts {
        total.add_scaled(p, 1.0);
    }
    Ok(total)
}

/// Reconstruction loss `λ_rgb · mean_m MSE(R_m, I_m)` and its gradient with
/// respect to every Gaussian parameter.
pub fn stage1_loss(
    scene: &GaussianScene,
    views: &[View],
    lambda_rgb: f64,
    opts: &RenderOptions,
) -> Result<(f64, SceneGradients)> {
    let cams: Vec<&crate::camera::Camera> = views.iter().map(|v| &v.camera).collect();
    let renders = crate::refine::render_all(scene, &cams, opts)?;
    let l = image_loss(&renders, views, &ViewLoss::rgb_only(), lambda_rgb)?;
    let grads = scene_gradient(scene, views, &l.image_grads, opts)?;
    Ok((l.value, grads))
}

/// Multi-step loss `Σ_t ω_t · MSE_t` over per-step mean photometric errors.
pub fn stage2_loss(step_mse: &[f64], weights: &[f64]) -> Result<f64> {
    if step_mse.len() != weights.len() {
        return Err(Error::Shape(format!(
            "{} step losses but {} weights",
            step_mse.len(),
            weights.len()
        )));
    }
    Ok(step_mse.iter().zip(weights).map(|(l, w)| l * w).sum())
}

/// Mean MSE over rendered trajectories: `trajectory[t][m]` is view `m`
/// rendered at step `t + 1`.
pub fn trajectory_mse(trajectory: &[Vec<Image>], truth: &[Image]) -> Result<Vec<f64>> {
    trajectory
        .iter()
        .map(|step| {
            if step.len() != truth.len() || truth.is_empty() {
                return Err(Error::Shape("trajectory step does not match ground truth".into()));
            }
            let s: f64 = step.iter().zip(truth).map(|(r, t)| r.mse(t)).sum::<Result<f64>>()?;
            Ok(s / truth.len() as f64)
        })
        .collect()
}

/// Default step weights `ω_t = t / T`.
pub fn default_step_weights(steps: usize) -> Vec<f64> {
    (1..=steps).map(|t| t as f64 / steps as f64).collect()
}
