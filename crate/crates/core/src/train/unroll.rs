use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::{image_loss, scene_gradient, ViewLoss};
use super::synth::{generate_scene, SyntheticSceneSpec};
use crate::camera::{Camera, View};
use crate::enhancer::Enhancer;
use crate::error::{Error, Result};
use crate::features::{extract_features, FeatureExtractorSpec};
use crate::gaussian::GaussianScene;
use crate::head::{
    build_tokens, build_windows, head_backward, head_forward, tokens_backward, update_scene, update_scene_backward,
    HeadParams, WindowPartition,
};
use crate::image::Image;
use crate::raster::RenderOptions;
use crate::refine::{attach_features, perturb_scene, render_all, step_cues, RefineConfig};

/// A degraded starting scene and the reference views it should explain.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub init: GaussianScene,
    pub views: Vec<View>,
}

/// Synthesizes a scene, perturbs it, and attaches ψ features sampled from
/// the reference images.
pub fn make_sample(spec: &SyntheticSceneSpec, seed: u64, features: &FeatureExtractorSpec) -> Result<TrainSample> {
    let synth = generate_scene(spec, seed)?;
    let views = synth.views();
    let degraded = perturb_scene(&synth.truth, &spec.perturb, seed ^ 0x005e_ed0f_9e27)?;
    Ok(TrainSample {
        init: attach_features(&degraded, &views, features)?,
        views,
    })
}

/// What the unrolled loop optimizes: `Σ_{t=1..T} ω_t · loss(R^(t))`.
#[derive(Debug, Clone, PartialEq)]
pub struct UnrollConfig {
    /// Mode, enhancer, features, windows and novel views; `steps` is T.
    pub refine: RefineConfig,
    /// ω_1..ω_T.
    pub weights: Vec<f64>,
    pub loss: ViewLoss,
}

impl UnrollConfig {
    pub fn validate(&self) -> Result<()> {
        if self.weights.len() != self.refine.steps {
            return Err(Error::InvalidArgument(format!(
                "{} step weights for {} steps",
                self.weights.len(),
                self.refine.steps
            )));
        }
        if self.weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(Error::InvalidArgument("step weights must be positive".into()));
        }
        Ok(())
    }

    fn render_options(&self) -> RenderOptions {
        RenderOptions {
            precision: crate::raster::Precision::Double,
            ..self.refine.render
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnrollResult {
    pub loss: f64,
    /// Mean reference-view MSE for steps 0..=T.
    pub step_mse: Vec<f64>,
    /// Flat parameter gradient; empty when not requested.
    #[serde(skip)]
    pub grad: Vec<f64>,
}

/// Cues used at each unrolled step, in step order.
#[derive(Debug, Clone, PartialEq)]
pub struct StepCueSet {
    pub observation: Array2<f64>,
    pub prior: Option<Array2<f64>>,
}

struct StepState {
    scene: GaussianScene,
    windows: WindowPartition,
    tokens: Array2<f64>,
    delta: Array2<f64>,
}

fn run(
    sample: &TrainSample,
    params: &HeadParams,
    cfg: &UnrollConfig,
    want_grad: bool,
    frozen: Option<&[StepCueSet]>,
) -> Result<(UnrollResult, Vec<StepCueSet>)> {
    cfg.validate()?;
    cfg.refine.validate(sample.views.len())?;
    let opts = cfg.render_options();
    let rcfg = RefineConfig {
        render: opts,
        ..cfg.refine.clone()
    };
    let enhancer = Enhancer::new(rcfg.enhancer.clone());
    let views = &sample.views;
    let target_features: Vec<Image> = views
        .par_iter()
        .map(|v| extract_features(&v.image, &rcfg.features))
        .collect::<Result<_>>()?;
    let cams: Vec<&Camera> = views.iter().map(|v| &v.camera).collect();
    let novel = rcfg.novel_cameras(views)?;
    let cell = rcfg.cell_size_for(sample.init.extent);
    let steps = rcfg.steps;

    let mut scene = sample.init.clone();
    let mut states: Vec<StepState> = Vec::with_capacity(steps);
    let mut loss_grads: Vec<Vec<Image>> = Vec::with_capacity(steps);
    let mut step_mse = Vec::with_capacity(steps + 1);
    let mut loss = 0.0;
    let mut used = Vec::with_capacity(steps);
    if frozen.is_some_and(|f| f.len() != steps) {
        return Err(Error::Shape("frozen cues do not cover every step".into()));
    }
    for t in 0..=steps {
        let renders = render_all(&scene, &cams, &opts)?;
        if t == 0 {
            let mse: f64 = renders
                .iter()
                .zip(views)
                .map(|(r, v)| r.image.mse(&v.image))
                .sum::<Result<f64>>()?;
            step_mse.push(mse / views.len() as f64);
        } else {
            let l = image_loss(&renders, views, &cfg.loss, cfg.weights[t - 1])?;
            loss += l.value;
            step_mse.push(l.view_mse.iter().sum::<f64>() / views.len() as f64);
            loss_grads.push(l.image_grads);
        }
        if t == steps {
            break;
        }
        let cues = match frozen {
            Some(f) => f[t].clone(),
            None => {
                let c = step_cues(&scene, &target_features, &renders, &novel, &rcfg, &enhancer)?;
                StepCueSet {
                    observation: c.observation,
                    prior: c.prior,
                }
            }
        };
        let windows = build_windows(&scene, cell, t)?;
        let tokens = build_tokens(&scene, &cues.observation, cues.prior.as_ref(), &windows)?;
        used.push(cues);
        let delta = head_forward(&tokens, &windows, params)?;
        let next = update_scene(&scene, &delta)?;
        states.push(StepState {
            scene,
            windows,
            tokens,
            delta,
        });
        scene = next;
    }
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite unrolled loss {loss}")));
    }
    if !want_grad || steps == 0 {
        let grad = if want_grad { vec![0.0; params.param_count()] } else { Vec::new() };
        return Ok((UnrollResult { loss, step_mse, grad }, used));
    }

    let mut grad = vec![0.0; params.param_count()];
    let mut d_scene = scene_gradient(&scene, views, &loss_grads[steps - 1], &opts)?;
    for t in (0..steps).rev() {
        let st = &states[t];
        let (mut d_prev, d_delta) = update_scene_backward(&st.scene, &st.delta, &d_scene);
        let (g, d_tokens) = head_backward(&st.tokens, &st.windows, params, &d_delta)?;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
        if t == 0 {
            break;
        }
        tokens_backward(&st.windows, &d_tokens, &mut d_prev);
        let direct = scene_gradient(&st.scene, views, &loss_grads[t - 1], &opts)?;
        d_prev.add_scaled(&direct, 1.0);
        d_scene = d_prev;
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numeric("non-finite head gradient".into()));
    }
    Ok((UnrollResult { loss, step_mse, grad }, used))
}

/// Loss of the unrolled loop and its gradient with respect to every head
/// parameter. Cues are treated as constants.
pub fn unrolled_gradient(sample: &TrainSample, params: &HeadParams, cfg: &UnrollConfig) -> Result<UnrollResult> {
    run(sample, params, cfg, true, None).map(|r| r.0)
}

/// Forward-only value of the unrolled loss.
pub fn unrolled_loss(sample: &TrainSample, params: &HeadParams, cfg: &UnrollConfig) -> Result<UnrollResult> {
    run(sample, params, cfg, false, None).map(|r| r.0)
}

/// Forward-only loss that also returns the cues it computed at each step.
pub fn unrolled_cues(sample: &TrainSample, params: &HeadParams, cfg: &UnrollConfig) -> Result<(UnrollResult, Vec<StepCueSet>)> {
    run(sample, params, cfg, false, None)
}

/// Forward-only loss with the cues held fixed: the objective whose exact
/// gradient [`unrolled_gradient`] returns.
pub fn unrolled_loss_with_cues(
    sample: &TrainSample,
    params: &HeadParams,
    cfg: &UnrollConfig,
    cues: &[StepCueSet],
) -> Result<UnrollResult> {
    run(sample, params, cfg, false, Some(cues)).map(|r| r.0)
}

/// Averages `unrolled_gradient` over a batch, accumulating in sample order.
pub fn batch_gradient(samples: &[&TrainSample], params: &HeadParams, cfg: &UnrollConfig) -> Result<UnrollResult> {
    let parts: Vec<UnrollResult> = samples
        .par_iter()
        .map(|s| unrolled_gradient(s, params, cfg))
        .collect::<Result<_>>()?;
    let n = parts.len().max(1) as f64;
    let mut grad = vec![0.0; params.param_count()];
    let mut loss = 0.0;
    let mut step_mse = vec![0.0; cfg.refine.steps + 1];
    for p in &parts {
        loss += p.loss / n;
        for (a, b) in grad.iter_mut().zip(&p.grad) {
            *a += b / n;
        }
        for (a, b) in step_mse.iter_mut().zip(&p.step_mse) {
            *a += b / n;
        }
    }
    Ok(UnrollResult { loss, step_mse, grad })
}
