use serde::{Deserialize, Serialize};

use super::loss::stage1_loss;
use crate::camera::View;
use crate::error::{Error, Result};
use crate::gaussian::GaussianScene;
use crate::raster::{RenderOptions, SceneGradients};
use crate::refine::render_all;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DescentMode {
    #[default]
    Fixed,
    /// Backtracking: halve the step until the loss does not increase.
    LineSearch,
}

impl std::str::FromStr for DescentMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(Self::Fixed),
            "line-search" => Ok(Self::LineSearch),
            _ => Err(Error::InvalidArgument(format!("unknown descent mode {s:?} (fixed|line-search)"))),
        }
    }
}

/// Per-group step multipliers applied on top of the learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Preconditioner {
    /// Multiplied by the squared scene extent.
    pub position: f64,
    pub log_scale: f64,
    pub rotation: f64,
    pub color: f64,
    pub opacity_logit: f64,
}

impl Default for Preconditioner {
    fn default() -> Self {
        Self {
            position: 0.02,
            log_scale: 0.1,
            rotation: 0.1,
            color: 1.0,
            opacity_logit: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescentConfig {
    pub steps: usize,
    /// Step size in units of the per-view pixel count; the photometric loss
    /// is a mean, so raw gradients shrink with resolution.
    pub lr: f64,
    pub mode: DescentMode,
    pub preconditioner: Preconditioner,
}

impl Default for DescentConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            lr: 0.3,
            mode: DescentMode::Fixed,
            preconditioner: Preconditioner::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineResult {
    pub scene: GaussianScene,
    /// Photometric MSE before the first step and after every step taken.
    pub losses: Vec<f64>,
    /// Stopped because the loss exceeded ten times its initial value.
    pub diverged: bool,
}

fn apply(scene: &GaussianScene, g: &SceneGradients, step: f64, pc: &Preconditioner) -> GaussianScene {
    let mut out = scene.clone();
    let sp = step * pc.position * scene.extent * scene.extent;
    for (p, d) in out.gaussians.iter_mut().zip(&g.gaussians) {
        for a in 0..3 {
            p.position[a] -= sp * d.position[a];
            p.log_scale[a] -= step * pc.log_scale * d.log_scale[a];
            p.color[a] -= step * pc.color * d.color[a];
        }
        p.rotation.w -= step * pc.rotation * d.rotation[0];
        p.rotation.x -= step * pc.rotation * d.rotation[1];
        p.rotation.y -= step * pc.rotation * d.rotation[2];
        p.rotation.z -= step * pc.rotation * d.rotation[3];
        p.opacity_logit -= step * pc.opacity_logit * d.opacity_logit;
    }
    out.normalize_rotations();
    out.clamp_ranges();
    out
}

fn loss_only(scene: &GaussianScene, views: &[View], opts: &RenderOptions) -> Result<f64> {
    let cams: Vec<_> = views.iter().map(|v| &v.camera).collect();
    let renders = render_all(scene, &cams, opts)?;
    let s: f64 = renders.iter().zip(views).map(|(r, v)| r.image.mse(&v.image)).sum::<Result<f64>>()?;
    Ok(s / views.len() as f64)
}

/// Per-scene gradient descent on every Gaussian parameter against the
/// photometric loss: the test-time optimization that refinement replaces.
pub fn gradient_descent_baseline(
    scene0: &GaussianScene,
    views: &[View],
    cfg: &DescentConfig,
    opts: &RenderOptions,
) -> Result<BaselineResult> {
    if cfg.steps == 0 {
        return Err(Error::InvalidArgument("baseline needs at least one step".into()));
    }
    if views.is_empty() {
        return Err(Error::InvalidArgument("baseline needs at least one view".into()));
    }
    if !(cfg.lr >= 0.0 && cfg.lr.is_finite()) {
        return Err(Error::InvalidArgument(format!("learning rate must be >= 0, got {}", cfg.lr)));
    }
    let pixels = views[0].camera.pixel_count() as f64;
    let mut step = cfg.lr * pixels;
    let mut scene = scene0.clone();
    let mut losses = Vec::with_capacity(cfg.steps + 1);
    let mut diverged = false;
    let (mut loss, mut grad) = stage1_loss(&scene, views, 1.0, opts)?;
    let initial = loss;
    losses.push(loss);
    for _ in 0..cfg.steps {
        match cfg.mode {
            DescentMode::Fixed => {
                scene = apply(&scene, &grad, step, &cfg.preconditioner);
                (loss, grad) = stage1_loss(&scene, views, 1.0, opts)?;
            }
            DescentMode::LineSearch => {
                let mut accepted = false;
                for _ in 0..30 {
                    let candidate = apply(&scene, &grad, step, &cfg.preconditioner);
                    let l = loss_only(&candidate, views, opts)?;
                    if l <= loss {
                        scene = candidate;
                        step *= 1.25;
                        accepted = true;
                        break;
                    }
                    step *= 0.5;
                }
                if accepted {
                    (loss, grad) = stage1_loss(&scene, views, 1.0, opts)?;
                }
            }
        }
        if !loss.is_finite() {
            return Err(Error::Numeric("baseline loss became non-finite".into()));
        }
        losses.push(loss);
        if loss > 10.0 * initial {
            diverged = true;
            break;
        }
    }
    Ok(BaselineResult { scene, losses, diverged })
}
