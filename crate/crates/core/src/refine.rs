//! The forward-only refinement loop and scene initializers.
//!
//! Each step renders the reference views, pools observation cues (and, in
//! GIFSplat mode, prior cues from enhanced novel renders), and applies one
//! bounded residual update predicted by the shared head. No gradients are
//! computed anywhere here.

use std::time::Instant;

use nalgebra::Vector3;
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{interpolate_cameras, Camera, View};
use crate::cues::{compute_prior_cues, observation_cues_from_features};
use crate::enhancer::{Enhancer, EnhancerSpec};
use crate::error::{Error, Result};
use crate::features::{extract_features, FeatureExtractorSpec};
use crate::gaussian::{logit, Gaussian, GaussianScene, MIN_SCALE};
use crate::head::{build_tokens, build_windows, head_forward, update_scene, HeadParams};
use crate::image::Image;
use crate::metrics::psnr_from_mse;
use crate::quat::Quat;
use crate::raster::{render, RenderOptions, RenderOutput};

pub const DEFAULT_STEPS: usize = 3;
/// Window cell size as a fraction of the scene extent, when not given.
pub const DEFAULT_CELL_FRACTION: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RefineMode {
    /// Observation cues only.
    IfSplat,
    /// Observation and enhancer-prior cues.
    #[default]
    GifSplat,
}

impl std::str::FromStr for RefineMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ifsplat" => Ok(Self::IfSplat),
            "gifsplat" => Ok(Self::GifSplat),
            _ => Err(Error::InvalidArgument(format!("unknown mode {s:?} (ifsplat|gifsplat)"))),
        }
    }
}

/// A novel camera between two reference cameras.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NovelView {
    pub pair: (usize, usize),
    pub t: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineConfig {
    pub steps: usize,
    pub mode: RefineMode,
    /// Novel views rendered and enhanced at every step.
    pub novel_views: Vec<NovelView>,
    /// Also enhance the reference renders for prior cues.
    pub prior_on_refs: bool,
    pub enhancer: EnhancerSpec,
    pub features: FeatureExtractorSpec,
    /// Window cell size in world units; `None` uses a fraction of the extent.
    pub cell_size: Option<f64>,
    pub render: RenderOptions,
    /// Keep the scene after every step in the trace.
    pub record_trajectory: bool,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            mode: RefineMode::GifSplat,
            novel_views: vec![NovelView { pair: (0, 1), t: 1.0 / 3.0 }, NovelView { pair: (0, 1), t: 2.0 / 3.0 }],
            prior_on_refs: false,
            enhancer: EnhancerSpec::default(),
            features: FeatureExtractorSpec::Handcrafted,
            cell_size: None,
            render: RenderOptions::default(),
            record_trajectory: false,
        }
    }
}

impl RefineConfig {
    pub fn cell_size_for(&self, extent: f64) -> f64 {
        self.cell_size.unwrap_or(DEFAULT_CELL_FRACTION * extent)
    }

    pub fn validate(&self, view_count: usize) -> Result<()> {
        if let Some(c) = self.cell_size {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::InvalidArgument(format!("cell size must be positive, got {c}")));
            }
        }
        if self.mode == RefineMode::GifSplat {
            for nv in &self.novel_views {
                if nv.pair.0 >= view_count || nv.pair.1 >= view_count {
                    return Err(Error::InvalidArgument(format!(
                        "novel view pair {:?} with only {view_count} views",
                        nv.pair
                    )));
                }
                if !(0.0..=1.0).contains(&nv.t) {
                    return Err(Error::InvalidArgument(format!("novel view t = {} outside [0, 1]", nv.t)));
                }
            }
        }
        Ok(())
    }

    /// Cameras of the novel views (empty outside GIFSplat mode).
    pub fn novel_cameras(&self, views: &[View]) -> Result<Vec<Camera>> {
        if self.mode != RefineMode::GifSplat {
            return Ok(Vec::new());
        }
        self.novel_views
            .iter()
            .map(|nv| interpolate_cameras(&views[nv.pair.0].camera, &views[nv.pair.1].camera, nv.t))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Photometric MSE of the scene at this step, per reference view.
    pub view_mse: Vec<f64>,
    pub view_psnr: Vec<f64>,
    pub mean_psnr: f64,
    /// Wall-clock seconds of the update that produced this scene.
    pub seconds: f64,
    /// Mean |o_i| and |p_i| of the cues computed from this scene; absent for
    /// the final scene.
    pub observation_norm: Option<f64>,
    pub prior_norm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RefineTrace {
    pub steps: Vec<StepRecord>,
    #[serde(skip)]
    pub snapshots: Vec<GaussianScene>,
}

impl RefineTrace {
    pub fn mean_psnr(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.mean_psnr).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trace serializes")
    }
}

fn mean_abs(m: &Array2<f64>) -> f64 {
    if m.is_empty() {
        0.0
    } else {
        m.iter().map(|v| v.abs()).sum::<f64>() / m.len() as f64
    }
}

pub(crate) fn render_all(scene: &GaussianScene, cams: &[&Camera], opts: &RenderOptions) -> Result<Vec<RenderOutput>> {
    cams.par_iter().map(|c| render(scene, c, opts)).collect()
}

/// Cues for one step, given the current reference renders.
pub(crate) struct StepCues {
    pub observation: Array2<f64>,
    pub prior: Option<Array2<f64>>,
}

pub(crate) fn step_cues(
    scene: &GaussianScene,
    target_features: &[Image],
    ref_renders: &[RenderOutput],
    novel_cams: &[Camera],
    cfg: &RefineConfig,
    enhancer: &Enhancer,
) -> Result<StepCues> {
    let observation = observation_cues_from_features(scene, target_features, ref_renders, &cfg.features)?.values;
    let prior = if cfg.mode == RefineMode::GifSplat {
        let novel = render_all(scene, &novel_cams.iter().collect::<Vec<_>>(), &cfg.render)?;
        let mut renders = novel;
        if cfg.prior_on_refs {
            renders.extend(ref_renders.iter().cloned());
        }
        if renders.is_empty() {
            Some(Array2::zeros(observation.raw_dim()))
        } else {
            let enhanced: Vec<Image> = renders
                .par_iter()
                .map(|r| enhancer.enhance(&r.image))
                .collect::<Result<_>>()?;
            Some(compute_prior_cues(scene, &renders, &enhanced, &cfg.features)?.values)
        }
    } else {
        None
    };
    Ok(StepCues { observation, prior })
}

fn record(step: usize, renders: &[RenderOutput], views: &[View], seconds: f64) -> Result<StepRecord> {
    let view_mse: Vec<f64> = renders
        .iter()
        .zip(views)
        .map(|(r, v)| r.image.mse(&v.image))
        .collect::<Result<_>>()?;
    let view_psnr: Vec<f64> = view_mse.iter().map(|&m| psnr_from_mse(m)).collect();
    let mean_psnr = view_psnr.iter().sum::<f64>() / view_psnr.len() as f64;
    Ok(StepRecord {
        step,
        view_mse,
        view_psnr,
        mean_psnr,
        seconds,
        observation_norm: None,
        prior_norm: None,
    })
}

/// Runs `cfg.steps` refinement steps against the reference views.
pub fn refine(
    scene0: &GaussianScene,
    views: &[View],
    params: &HeadParams,
    cfg: &RefineConfig,
) -> Result<(GaussianScene, RefineTrace)> {
    scene0.validate()?;
    if views.is_empty() {
        return Err(Error::InvalidArgument("refinement needs at least one view".into()));
    }
    cfg.validate(views.len())?;
    params.validate()?;
    let enhancer = Enhancer::new(cfg.enhancer.clone());
    let target_features: Vec<Image> = views
        .par_iter()
        .map(|v| extract_features(&v.image, &cfg.features))
        .collect::<Result<_>>()?;
    let ref_cams: Vec<&Camera> = views.iter().map(|v| &v.camera).collect();
    let novel_cams = cfg.novel_cameras(views)?;
    let cell = cfg.cell_size_for(scene0.extent);

    let mut scene = scene0.clone();
    let mut trace = RefineTrace::default();
    let mut seconds = 0.0;
    for t in 0..cfg.steps {
        let start = Instant::now();
        let renders = render_all(&scene, &ref_cams, &cfg.render)?;
        let cues = step_cues(&scene, &target_features, &renders, &novel_cams, cfg, &enhancer)?;
        let windows = build_windows(&scene, cell, t)?;
        let tokens = build_tokens(&scene, &cues.observation, cues.prior.as_ref(), &windows)?;
        let delta = head_forward(&tokens, &windows, params)
            .map_err(|e| Error::Numeric(format!("refinement step {t}: {e}")))?;
        let next = update_scene(&scene, &delta).map_err(|e| Error::Numeric(format!("refinement step {t}: {e}")))?;
        next.check_finite()
            .map_err(|e| Error::Numeric(format!("refinement step {t}: {e}")))?;
        let elapsed = start.elapsed().as_secs_f64();

        let mut rec = record(t, &renders, views, seconds)?;
        rec.observation_norm = Some(mean_abs(&cues.observation));
        rec.prior_norm = cues.prior.as_ref().map(mean_abs);
        trace.steps.push(rec);
        if cfg.record_trajectory {
            trace.snapshots.push(scene);
        }
        scene = next;
        seconds = elapsed;
    }
    let renders = render_all(&scene, &ref_cams, &cfg.render)?;
    trace.steps.push(record(cfg.steps, &renders, views, seconds)?);
    if cfg.record_trajectory {
        trace.snapshots.push(scene.clone());
    }
    Ok((scene, trace))
}

/// A reference view with a per-pixel depth map (row-major, camera z).
#[derive(Debug, Clone, PartialEq)]
pub struct DepthView {
    pub image: Image,
    pub camera: Camera,
    pub depth: Vec<f64>,
}

/// Unprojects every `stride`-th pixel of each view into a Gaussian sized to
/// cover about `stride` pixels of its source view. Pixels without positive
/// depth are skipped.
pub fn initialize_from_depth(views: &[DepthView], spec: &FeatureExtractorSpec, stride: usize) -> Result<GaussianScene> {
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be at least 1".into()));
    }
    let d_f = spec.channel_count();
    let mut gaussians = Vec::new();
    let mut feats: Vec<f64> = Vec::new();
    for (k, v) in views.iter().enumerate() {
        let (w, h) = (v.image.width, v.image.height);
        if v.image.channels != 3 || v.depth.len() != w * h {
            return Err(Error::Shape(format!("view {k}: image/depth sizes disagree")));
        }
        if w != v.camera.width as usize || h != v.camera.height as usize {
            return Err(Error::Shape(format!("view {k}: image does not match its camera")));
        }
        let psi = extract_features(&v.image, spec)?;
        for y in (0..h).step_by(stride) {
            for x in (0..w).step_by(stride) {
                let z = v.depth[y * w + x];
                if !(z > 0.0 && z.is_finite()) {
                    continue;
                }
                let position = v.camera.unproject_to_world(x as f64, y as f64, z);
                let sigma = (0.5 * stride as f64 * z / v.camera.fx).max(MIN_SCALE);
                let px = v.image.pixel(x, y);
                gaussians.push(Gaussian {
                    position,
                    log_scale: Vector3::repeat(sigma.ln()),
                    rotation: Quat::IDENTITY,
                    color: Vector3::new(px[0], px[1], px[2]).map(|c| c.clamp(0.0, 1.0)),
                    opacity_logit: logit(0.5),
                });
                feats.extend_from_slice(psi.pixel(x, y));
            }
        }
    }
    if gaussians.is_empty() {
        return Err(Error::InvalidArgument("no pixel had a positive depth".into()));
    }
    let n = gaussians.len();
    let centroid = gaussians.iter().map(|g| g.position).sum::<Vector3<f64>>() / n as f64;
    let extent = gaussians
        .iter()
        .map(|g| (g.position - centroid).norm())
        .fold(0.0, f64::max)
        .max(1e-3);
    let mut scene = GaussianScene::new(gaussians, Array2::from_shape_vec((n, d_f), feats).map_err(|e| Error::Shape(e.to_string()))?, extent)?;
    scene.clamp_ranges();
    Ok(scene)
}

/// Gives each Gaussian the feature ψ(I) at its projection into the first
/// view that sees it (nearest pixel); Gaussians seen by no view get zeros.
pub fn attach_features(scene: &GaussianScene, views: &[View], spec: &FeatureExtractorSpec) -> Result<GaussianScene> {
    let maps: Vec<Image> = views
        .par_iter()
        .map(|v| extract_features(&v.image, spec))
        .collect::<Result<_>>()?;
    let d_f = spec.channel_count();
    let mut feats = Array2::zeros((scene.len(), d_f));
    for (i, g) in scene.gaussians.iter().enumerate() {
        for (v, map) in views.iter().zip(&maps) {
            let pc = v.camera.world_to_camera(&g.position);
            if pc.z <= RenderOptions::default().near {
                continue;
            }
            let u = (v.camera.fx * pc.x / pc.z + v.camera.cx).round();
            let w = (v.camera.fy * pc.y / pc.z + v.camera.cy).round();
            if u < 0.0 || w < 0.0 || u >= map.width as f64 || w >= map.height as f64 {
                continue;
            }
            for (k, &f) in map.pixel(u as usize, w as usize).iter().enumerate() {
                feats[[i, k]] = f;
            }
            break;
        }
    }
    GaussianScene::new(scene.gaussians.clone(), feats, scene.extent)
}

/// Standard deviations of the perturbation; `position` is relative to the
/// scene extent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbConfig {
    pub position: f64,
    pub log_scale: f64,
    pub color: f64,
    pub opacity_logit: f64,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self {
            position: 0.02,
            log_scale: 0.2,
            color: 0.1,
            opacity_logit: 0.5,
        }
    }
}

impl PerturbConfig {
    pub fn none() -> Self {
        Self {
            position: 0.0,
            log_scale: 0.0,
            color: 0.0,
            opacity_logit: 0.0,
        }
    }
}

/// Seeded Gaussian noise on position, log-scale, color and opacity logit.
/// Colors and scales are clamped back into range.
pub fn perturb_scene(scene: &GaussianScene, noise: &PerturbConfig, seed: u64) -> Result<GaussianScene> {
    let sds = [noise.position * scene.extent, noise.log_scale, noise.color, noise.opacity_logit];
    if sds.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
        return Err(Error::InvalidArgument(format!("noise scales must be finite and >= 0: {noise:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out = scene.clone();
    for g in &mut out.gaussians {
        let mut draw = |sd: f64| unit.sample(&mut rng) * sd;
        let dp = Vector3::new(draw(sds[0]), draw(sds[0]), draw(sds[0]));
        let ds = Vector3::new(draw(sds[1]), draw(sds[1]), draw(sds[1]));
        let dc = Vector3::new(draw(sds[2]), draw(sds[2]), draw(sds[2]));
        let da = draw(sds[3]);
        g.position += dp;
        g.log_scale += ds;
        g.color += dc;
        g.opacity_logit += da;
    }
    out.clamp_ranges();
    Ok(out)
}
