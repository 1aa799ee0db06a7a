//! Per-Gaussian cue vectors pooled from pixel-space feature differences.
//!
//! For a set of views, a Gaussian's cue is the contribution-weighted mean
//! of a per-pixel difference map:
//!
//! ```text
//! c_i = Σ_m Σ_u w_i(u) D_m(u) / (Σ_m Σ_u w_i(u) + ε)
//! ```
//!
//! Numerator and denominator are summed over every view before the single
//! division. Observation cues use `D = ψ(target) - ψ(render)`; prior cues use
//! `D = ψ(enhanced render) - ψ(render)`.

use ndarray::Array2;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::{extract_features, feature_difference, FeatureExtractorSpec};
use crate::gaussian::GaussianScene;
use crate::image::Image;
use crate::raster::{pool_over_pixels, PooledSums, RenderOutput};

/// Pooling stabilizer ε.
pub const POOL_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct CueVectors {
    pub observation: Array2<f64>,
    pub prior: Array2<f64>,
    /// Pooled observation weight per Gaussian.
    pub coverage: Vec<f64>,
}

impl CueVectors {
    pub fn zeros(n: usize, dim: usize) -> Self {
        Self {
            observation: Array2::zeros((n, dim)),
            prior: Array2::zeros((n, dim)),
            coverage: vec![0.0; n],
        }
    }
}

/// A cue matrix together with the weight sums it was normalized by.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledCue {
    pub values: Array2<f64>,
    pub coverage: Vec<f64>,
}

/// Pools per-view difference maps through their renders, summing over views
/// in the given order before normalizing.
pub fn pool_differences(n: usize, renders: &[RenderOutput], differences: &[Image]) -> Result<PooledCue> {
    if renders.len() != differences.len() {
        return Err(Error::Shape(format!(
            "{} renders but {} difference maps",
            renders.len(),
            differences.len()
        )));
    }
    let dim = differences.first().map_or(0, |d| d.channels);
    let per_view: Vec<PooledSums> = renders
        .par_iter()
        .zip(differences.par_iter())
        .map(|(r, d)| pool_over_pixels(r, d))
        .collect::<Result<_>>()?;
    let mut total = PooledSums {
        weighted: Array2::zeros((n, dim)),
        weight: vec![0.0; n],
    };
    for p in &per_view {
        if p.weight.len() != n {
            return Err(Error::Shape(format!("render covers {} gaussians, scene has {n}", p.weight.len())));
        }
        total.accumulate(p)?;
    }
    Ok(PooledCue {
        values: total.normalized(POOL_EPSILON),
        coverage: total.weight,
    })
}

fn check_renders(scene: &GaussianScene, renders: &[RenderOutput]) -> Result<()> {
    match renders.iter().find(|r| r.gaussian_count != scene.len()) {
        Some(r) => Err(Error::Shape(format!(
            "render was produced from {} gaussians, scene has {}",
            r.gaussian_count,
            scene.len()
        ))),
        None => Ok(()),
    }
}

/// Observation cues from target images whose features are already extracted.
pub fn observation_cues_from_features(
    scene: &GaussianScene,
    target_features: &[Image],
    renders: &[RenderOutput],
    spec: &FeatureExtractorSpec,
) -> Result<PooledCue> {
    check_renders(scene, renders)?;
    if target_features.len() != renders.len() {
        return Err(Error::Shape(format!(
            "{} reference views but {} renders",
            target_features.len(),
            renders.len()
        )));
    }
    let diffs: Vec<Image> = target_features
        .par_iter()
        .zip(renders.par_iter())
        .map(|(t, r)| feature_difference(t, &extract_features(&r.image, spec)?))
        .collect::<Result<_>>()?;
    pool_differences(scene.len(), renders, &diffs)
}

/// Observation cues: pooled `ψ(target) - ψ(render)` over the reference views.
pub fn compute_observation_cues(
    scene: &GaussianScene,
    targets: &[Image],
    renders: &[RenderOutput],
    spec: &FeatureExtractorSpec,
) -> Result<Array2<f64>> {
    if targets.len() != renders.len() {
        return Err(Error::Shape(format!(
            "{} reference views but {} renders",
            targets.len(),
            renders.len()
        )));
    }
    let feats: Vec<Image> = targets
        .par_iter()
        .map(|t| extract_features(t, spec))
        .collect::<Result<_>>()?;
    Ok(observation_cues_from_features(scene, &feats, renders, spec)?.values)
}

/// Prior cues: pooled `ψ(enhanced) - ψ(render)`. Enhanced images are plain
/// inputs here; nothing downstream differentiates through them.
pub fn compute_prior_cues(
    scene: &GaussianScene,
    renders: &[RenderOutput],
    enhanced: &[Image],
    spec: &FeatureExtractorSpec,
) -> Result<PooledCue> {
    check_renders(scene, renders)?;
    if enhanced.len() != renders.len() {
        return Err(Error::Shape(format!(
            "{} enhanced images but {} renders",
            enhanced.len(),
            renders.len()
        )));
    }
    let diffs: Vec<Image> = renders
        .par_iter()
        .zip(enhanced.par_iter())
        .map(|(r, e)| {
            r.image.ensure_same_shape(e)?;
            feature_difference(&extract_features(e, spec)?, &extract_features(&r.image, spec)?)
        })
        .collect::<Result<_>>()?;
    pool_differences(scene.len(), renders, &diffs)
}
