use std::f64::consts::PI;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{Camera, View};
use crate::error::{Error, Result};
use crate::gaussian::{logit, Gaussian, GaussianScene};
use crate::image::Image;
use crate::quat::Quat;
use crate::raster::{render, RenderOptions};
use crate::refine::PerturbConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Palette {
    /// Randomly placed, sized and colored Gaussians in a ball.
    #[default]
    Random,
    /// A flat grid of Gaussians carrying a smooth color texture.
    TexturedPlane,
}

impl std::str::FromStr for Palette {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "textured-plane" => Ok(Self::TexturedPlane),
            _ => Err(Error::InvalidArgument(format!("unknown palette {s:?} (random|textured-plane)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSceneSpec {
    pub min_count: usize,
    pub max_count: usize,
    pub extent: f64,
    pub palette: Palette,
    pub camera_count: usize,
    /// Ring radius in units of the extent.
    pub ring_radius: f64,
    /// Camera elevation above the ring plane.
    pub elevation_deg: f64,
    /// Angle covered by the cameras; 360 spreads them evenly around.
    pub arc_deg: f64,
    pub fov_deg: f64,
    pub width: u32,
    pub height: u32,
    /// Degradation applied to build the refinement starting point.
    pub perturb: PerturbConfig,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        Self {
            min_count: 400,
            max_count: 600,
            extent: 1.0,
            palette: Palette::Random,
            camera_count: 3,
            ring_radius: 1.6,
            elevation_deg: 20.0,
            arc_deg: 60.0,
            fov_deg: 45.0,
            width: 48,
            height: 48,
            perturb: PerturbConfig::default(),
        }
    }
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = self.min_count >= 1
            && self.max_count >= self.min_count
            && self.extent > 0.0
            && self.camera_count >= 1
            && self.ring_radius > 0.0
            && self.fov_deg > 0.0
            && self.fov_deg < 180.0
            && self.width > 0
            && self.height > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid synthetic scene spec: {self:?}")))
        }
    }

    pub fn focal(&self) -> f64 {
        0.5 * self.width as f64 / (0.5 * self.fov_deg.to_radians()).tan()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub truth: GaussianScene,
    pub cameras: Vec<Camera>,
    pub images: Vec<Image>,
    /// Expected depth per pixel, 0 where nothing was rendered.
    pub depths: Vec<Vec<f64>>,
}

impl SyntheticScene {
    pub fn views(&self) -> Vec<View> {
        self.cameras
            .iter()
            .zip(&self.images)
            .map(|(c, i)| View {
                image: i.clone(),
                camera: c.clone(),
            })
            .collect()
    }
}

/// Cameras on a ring of radius `radius` around `centroid`, all looking at it.
#[allow(clippy::too_many_arguments)]
pub fn ring_cameras(
    centroid: Vector3<f64>,
    radius: f64,
    count: usize,
    elevation_deg: f64,
    arc_deg: f64,
    focal: f64,
    width: u32,
    height: u32,
) -> Result<Vec<Camera>> {
    let phi = elevation_deg.to_radians();
    (0..count)
        .map(|k| {
            let theta = if arc_deg >= 360.0 {
                2.0 * PI * k as f64 / count as f64
            } else if count == 1 {
                -0.5 * PI
            } else {
                -0.5 * PI + arc_deg.to_radians() * (k as f64 / (count - 1) as f64 - 0.5)
            };
            let dir = Vector3::new(theta.cos() * phi.cos(), phi.sin(), theta.sin() * phi.cos());
            Camera::look_at(centroid + radius * dir, centroid, Vector3::y(), focal, width, height)
        })
        .collect()
}

fn random_gaussians(spec: &SyntheticSceneSpec, n: usize, rng: &mut ChaCha8Rng) -> Vec<Gaussian> {
    let r = 0.5 * spec.extent;
    (0..n)
        .map(|_| {
            let position = loop {
                let p = Vector3::from_fn(|_, _| rng.random_range(-r..r));
                if p.norm() <= r {
                    break p;
                }
            };
            let base = rng.random_range(0.03..0.07) * spec.extent;
            let log_scale = Vector3::from_fn(|_, _| (base * rng.random_range(0.6..1.6)).ln());
            let rotation = loop {
                let q = Quat::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                );
                if q.norm() > 0.1 {
                    break q.normalized();
                }
            };
            Gaussian {
                position,
                log_scale,
                rotation,
                color: Vector3::from_fn(|_, _| rng.random_range(0.05..0.95)),
                opacity_logit: logit(rng.random_range(0.5..0.95)),
            }
        })
        .collect()
}

fn plane_gaussians(spec: &SyntheticSceneSpec, n: usize, rng: &mut ChaCha8Rng) -> Vec<Gaussian> {
    let side = (n as f64).sqrt().ceil() as usize;
    let half = 0.6 * spec.extent;
    let spacing = 2.0 * half / side as f64;
    let freq: Vec<f64> = (0..6).map(|_| rng.random_range(1.0..4.0) * PI / spec.extent).collect();
    let phase: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    (0..n)
        .map(|k| {
            let (i, j) = (k % side, k / side);
            let x = -half + (i as f64 + 0.5) * spacing;
            let z = -half + (j as f64 + 0.5) * spacing;
            let color = Vector3::from_fn(|c, _| 0.5 + 0.4 * (freq[2 * c] * x + freq[2 * c + 1] * z + phase[c]).sin());
            Gaussian {
                position: Vector3::new(x, 0.0, z),
                log_scale: Vector3::new(0.6 * spacing, 0.1 * spacing, 0.6 * spacing).map(f64::ln),
                rotation: Quat::IDENTITY,
                color,
                opacity_logit: logit(0.9),
            }
        })
        .collect()
}

/// Seeded ground-truth scene, ring cameras, and images and depths rendered
/// by this crate's rasterizer.
pub fn generate_scene(spec: &SyntheticSceneSpec, seed: u64) -> Result<SyntheticScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(spec.min_count..=spec.max_count);
    let gaussians = match spec.palette {
        Palette::Random => random_gaussians(spec, n, &mut rng),
        Palette::TexturedPlane => plane_gaussians(spec, n, &mut rng),
    };
    let mut truth = GaussianScene::without_features(gaussians, spec.extent)?;
    truth.clamp_ranges();
    let cameras = ring_cameras(
        truth.centroid(),
        spec.ring_radius * spec.extent,
        spec.camera_count,
        spec.elevation_deg,
        spec.arc_deg,
        spec.focal(),
        spec.width,
        spec.height,
    )?;
    let opts = RenderOptions::double();
    let mut images = Vec::with_capacity(cameras.len());
    let mut depths = Vec::with_capacity(cameras.len());
    for cam in &cameras {
        let out = render(&truth, cam, &opts)?;
        images.push(out.image.clamp01());
        depths.push(out.depth);
    }
    Ok(SyntheticScene {
        truth,
        cameras,
        images,
        depths,
    })
}
