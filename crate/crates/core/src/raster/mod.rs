//! Tile-based software rasterizer for 3D Gaussians.
//!
//! Splats are composited front to back per pixel. Besides the RGB image the
//! forward pass keeps, for every pixel, the largest compositing weights
//! `w_i(u) = α_i(u) Π_{j<i} (1 - α_j(u))`; these drive cue pooling. The
//! backward pass recomputes the forward per tile and returns exact parameter
//! gradients.

mod pool;
mod project;

use ndarray::Array2;
use num_traits::Float;
use rayon::prelude::*;

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::gaussian::GaussianScene;
use crate::image::Image;

pub use pool::{pool_over_pixels, PooledSums};
pub use project::{GaussianGrad, COV2D_DILATION, SUPPORT_SIGMAS};
use project::{project, project_backward, Splat, SplatGrad};

pub const TILE_SIZE: usize = 16;
/// Per-pixel opacity ceiling.
pub const MAX_ALPHA: f64 = 0.999;
/// Compositing stops before transmittance would fall below this.
pub const MIN_TRANSMITTANCE: f64 = 1e-4;
pub const DEFAULT_K_TOP: usize = 16;
pub const DEFAULT_NEAR: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    /// Compositing arithmetic in `f32`.
    #[default]
    Single,
    /// Compositing arithmetic in `f64`; used by gradient checks and training.
    Double,
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Self::Single),
            "double" => Ok(Self::Double),
            _ => Err(Error::InvalidArgument(format!("unknown precision {s:?} (single|double)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderOptions {
    pub background: [f64; 3],
    pub near: f64,
    /// Contributions kept per pixel, largest weights first.
    pub k_top: usize,
    pub precision: Precision,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            background: [0.0; 3],
            near: DEFAULT_NEAR,
            k_top: DEFAULT_K_TOP,
            precision: Precision::Single,
        }
    }
}

impl RenderOptions {
    pub fn double() -> Self {
        Self {
            precision: Precision::Double,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Contribution {
    pub gaussian: u32,
    pub weight: f64,
}

/// Per-pixel contribution lists in compressed-row layout.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Contributions {
    offsets: Vec<usize>,
    entries: Vec<Contribution>,
}

impl Contributions {
    /// Contributions of pixel `y * width + x`, largest weight first.
    pub fn pixel(&self, p: usize) -> &[Contribution] {
        &self.entries[self.offsets[p]..self.offsets[p + 1]]
    }

    pub fn pixel_count(&self) -> usize {
        self.offsets.len().saturating_sub(1)
    }

    /// Builds lists directly; used to pool hand-specified weights.
    pub fn from_lists(lists: Vec<Vec<Contribution>>) -> Self {
        let mut offsets = Vec::with_capacity(lists.len() + 1);
        offsets.push(0);
        let mut entries = Vec::new();
        for l in lists {
            entries.extend(l);
            offsets.push(entries.len());
        }
        Self { offsets, entries }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub image: Image,
    pub final_transmittance: Vec<f64>,
    /// Weight-normalized view-space depth; zero where nothing was composited.
    pub depth: Vec<f64>,
    pub contributions: Contributions,
    pub gaussian_count: usize,
}

impl RenderOutput {
    pub fn width(&self) -> usize {
        self.image.width
    }

    pub fn height(&self) -> usize {
        self.image.height
    }
}

/// Per-Gaussian partial derivatives of a scalar loss.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGradients {
    pub gaussians: Vec<GaussianGrad>,
}

impl SceneGradients {
    pub fn zeros(n: usize) -> Self {
        Self {
            gaussians: vec![GaussianGrad::default(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn add_scaled(&mut self, other: &SceneGradients, s: f64) {
        for (a, b) in self.gaussians.iter_mut().zip(&other.gaussians) {
            a.add(&b.scaled(s));
        }
    }

    pub fn is_finite(&self) -> bool {
        self.gaussians.iter().all(|g| g.to_array().iter().all(|v| v.is_finite()))
    }
}

struct Prepared {
    splats: Vec<Splat>,
    /// Splat indices per tile, front to back.
    tiles: Vec<Vec<u32>>,
    tiles_x: usize,
}

fn prepare(scene: &GaussianScene, cam: &Camera, opts: &RenderOptions) -> Result<Prepared> {
    scene.check_finite()?;
    let mut splats: Vec<Splat> = scene
        .gaussians
        .iter()
        .enumerate()
        .filter_map(|(i, g)| project(i, g, cam, opts.near))
        .collect();
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));

    let tiles_x = (cam.width as usize).div_ceil(TILE_SIZE);
    let tiles_y = (cam.height as usize).div_ceil(TILE_SIZE);
    let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
    for (k, s) in splats.iter().enumerate() {
        let (tx0, tx1) = (s.bbox[0] as usize / TILE_SIZE, s.bbox[1] as usize / TILE_SIZE);
        let (ty0, ty1) = (s.bbox[2] as usize / TILE_SIZE, s.bbox[3] as usize / TILE_SIZE);
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                tiles[ty * tiles_x + tx].push(k as u32);
            }
        }
    }
    Ok(Prepared {
        splats,
        tiles,
        tiles_x,
    })
}

fn tile_pixels(tile: usize, tiles_x: usize, cam: &Camera) -> impl Iterator<Item = (usize, usize)> {
    let (tx, ty) = (tile % tiles_x, tile / tiles_x);
    let x0 = tx * TILE_SIZE;
    let y0 = ty * TILE_SIZE;
    let x1 = (x0 + TILE_SIZE).min(cam.width as usize);
    let y1 = (y0 + TILE_SIZE).min(cam.height as usize);
    (y0..y1).flat_map(move |y| (x0..x1).map(move |x| (x, y)))
}

/// Squared Mahalanobis radius where the support taper begins.
pub const TAPER_START: f64 = 2.5 * 2.5;

/// Smoothstep falloff from 1 at [`TAPER_START`] to 0 at the support edge, and
/// its derivative with respect to the squared radius.
#[inline]
fn taper<F: Float>(q: F) -> (F, F) {
    let f = |v: f64| F::from(v).unwrap();
    let end = f(SUPPORT_SIGMAS * SUPPORT_SIGMAS);
    let start = f(TAPER_START);
    if q <= start {
        return (F::one(), F::zero());
    }
    let span = end - start;
    let x = (q - start) / span;
    let v = F::one() - x * x * (f(3.0) - f(2.0) * x);
    let dv = -f(6.0) * x * (F::one() - x) / span;
    (v, dv)
}

/// Opacity of a splat at a pixel, `None` outside its screen-space support.
#[inline]
fn splat_alpha<F: Float>(s: &Splat, x: usize, y: usize) -> Option<SplatSample<F>> {
    let (x, y) = (x as i64, y as i64);
    if x < s.bbox[0] || x > s.bbox[1] || y < s.bbox[2] || y > s.bbox[3] {
        return None;
    }
    let f = |v: f64| F::from(v).unwrap();
    let dx = F::from(x as f64).unwrap() - f(s.mean.x);
    let dy = F::from(y as f64).unwrap() - f(s.mean.y);
    let (a, b, c) = (f(s.conic[0]), f(s.conic[1]), f(s.conic[2]));
    let q = a * dx * dx + f(2.0) * b * dx * dy + c * dy * dy;
    if q >= f(SUPPORT_SIGMAS * SUPPORT_SIGMAS) {
        return None;
    }
    let gauss = (f(-0.5) * q).exp();
    let (t, dt) = taper(q);
    let density = gauss * t;
    let raw = f(s.opacity) * density;
    Some(SplatSample {
        alpha: raw.min(f(MAX_ALPHA)),
        raw,
        density,
        d_density_dq: gauss * (dt - f(0.5) * t),
        offset: [dx, dy],
    })
}

struct SplatSample<F> {
    alpha: F,
    raw: F,
    density: F,
    d_density_dq: F,
    offset: [F; 2],
}

struct PixelResult {
    color: [f64; 3],
    depth: f64,
    transmittance: f64,
    contributions: Vec<Contribution>,
}

fn composite_pixel<F: Float>(
    x: usize,
    y: usize,
    list: &[u32],
    splats: &[Splat],
    opts: &RenderOptions,
) -> PixelResult {
    let f = |v: f64| F::from(v).unwrap();
    let mut t = F::one();
    let mut color = [F::zero(); 3];
    let mut depth = F::zero();
    let mut weight_sum = F::zero();
    let mut contributions = Vec::new();
    for &k in list {
        let s = &splats[k as usize];
        let Some(SplatSample { alpha, .. }) = splat_alpha::<F>(s, x, y) else {
            continue;
        };
        let next_t = t * (F::one() - alpha);
        if next_t < f(MIN_TRANSMITTANCE) {
            break;
        }
        let w = alpha * t;
        for (ch, acc) in color.iter_mut().enumerate() {
            *acc = *acc + w * f(s.color[ch]);
        }
        depth = depth + w * f(s.depth);
        weight_sum = weight_sum + w;
        contributions.push(Contribution {
            gaussian: s.index,
            weight: w.to_f64().unwrap(),
        });
        t = next_t;
    }
    if contributions.len() > opts.k_top {
        contributions.sort_by(|a, b| b.weight.total_cmp(&a.weight).then(a.gaussian.cmp(&b.gaussian)));
        contributions.truncate(opts.k_top);
    }
    let t64 = t.to_f64().unwrap();
    let ws = weight_sum.to_f64().unwrap();
    PixelResult {
        color: std::array::from_fn(|ch| color[ch].to_f64().unwrap() + t64 * opts.background[ch]),
        depth: if ws > 0.0 { depth.to_f64().unwrap() / ws } else { 0.0 },
        transmittance: t64,
        contributions,
    }
}

/// Renders `scene` from `cam` by front-to-back alpha compositing.
pub fn render(scene: &GaussianScene, cam: &Camera, opts: &RenderOptions) -> Result<RenderOutput> {
    let prep = prepare(scene, cam, opts)?;
    let (w, h) = (cam.width as usize, cam.height as usize);
    let per_tile: Vec<Vec<((usize, usize), PixelResult)>> = (0..prep.tiles.len())
        .into_par_iter()
        .map(|tile| {
            let list = &prep.tiles[tile];
            tile_pixels(tile, prep.tiles_x, cam)
                .map(|(x, y)| {
                    let r = match opts.precision {
                        Precision::Single => composite_pixel::<f32>(x, y, list, &prep.splats, opts),
                        Precision::Double => composite_pixel::<f64>(x, y, list, &prep.splats, opts),
                    };
                    ((x, y), r)
                })
                .collect()
        })
        .collect();

    let mut image = Image::zeros(w, h, 3);
    let mut final_transmittance = vec![0.0; w * h];
    let mut depth = vec![0.0; w * h];
    let mut lists = vec![Vec::new(); w * h];
    for ((x, y), r) in per_tile.into_iter().flatten() {
        let p = y * w + x;
        image.data[p * 3..p * 3 + 3].copy_from_slice(&r.color);
        final_transmittance[p] = r.transmittance;
        depth[p] = r.depth;
        lists[p] = r.contributions;
    }
    Ok(RenderOutput {
        image,
        final_transmittance,
        depth,
        contributions: Contributions::from_lists(lists),
        gaussian_count: scene.len(),
    })
}

/// Gradients of a scalar loss with respect to every Gaussian parameter, given
/// `upstream = dLoss/dRGB` per pixel. Always evaluated in double precision.
pub fn render_backward(
    scene: &GaussianScene,
    cam: &Camera,
    opts: &RenderOptions,
    upstream: &Image,
) -> Result<SceneGradients> {
    if upstream.width != cam.width as usize || upstream.height != cam.height as usize || upstream.channels != 3
    {
        return Err(Error::Shape(format!(
            "upstream gradient {}x{}x{} does not match camera {}x{}x3",
            upstream.width, upstream.height, upstream.channels, cam.width, cam.height
        )));
    }
    let prep = prepare(scene, cam, opts)?;

    let tile_grads: Vec<Vec<SplatGrad>> = (0..prep.tiles.len())
        .into_par_iter()
        .map(|tile| {
            let list = &prep.tiles[tile];
            let mut local = vec![SplatGrad::default(); list.len()];
            let mut visited: Vec<(usize, f64, SplatSample<f64>)> = Vec::new();
            for (x, y) in tile_pixels(tile, prep.tiles_x, cam) {
                let g_rgb = upstream.pixel(x, y);
                if g_rgb.iter().all(|&v| v == 0.0) {
                    continue;
                }
                // Forward sweep: (list position, transmittance before, sample).
                visited.clear();
                let mut t = 1.0;
                for (pos, &k) in list.iter().enumerate() {
                    let s = &prep.splats[k as usize];
                    let Some(sample) = splat_alpha::<f64>(s, x, y) else {
                        continue;
                    };
                    let next_t = t * (1.0 - sample.alpha);
                    if next_t < MIN_TRANSMITTANCE {
                        break;
                    }
                    visited.push((pos, t, sample));
                    t = next_t;
                }
                // Reverse sweep; `suffix` is the color composited behind the current splat.
                let mut suffix: [f64; 3] = std::array::from_fn(|ch| t * opts.background[ch]);
                for (pos, t_before, sample) in visited.iter().rev() {
                    let (pos, t_before, alpha) = (*pos, *t_before, sample.alpha);
                    let s = &prep.splats[list[pos] as usize];
                    let w = alpha * t_before;
                    let acc = &mut local[pos];
                    let mut g_alpha = 0.0;
                    for ch in 0..3 {
                        acc.color[ch] += g_rgb[ch] * w;
                        g_alpha += g_rgb[ch] * (s.color[ch] * t_before - suffix[ch] / (1.0 - alpha));
                        suffix[ch] += s.color[ch] * w;
                    }
                    if sample.raw >= MAX_ALPHA {
                        continue;
                    }
                    // alpha = opacity * density(q)
                    let [dx, dy] = sample.offset;
                    let [a, b, c] = s.conic;
                    acc.opacity += g_alpha * sample.density;
                    let g_q = g_alpha * s.opacity * sample.d_density_dq;
                    acc.conic[0] += g_q * dx * dx;
                    acc.conic[1] += g_q * 2.0 * dx * dy;
                    acc.conic[2] += g_q * dy * dy;
                    // q depends on the mean through d = pixel - mean.
                    acc.mean[0] -= g_q * 2.0 * (a * dx + b * dy);
                    acc.mean[1] -= g_q * 2.0 * (b * dx + c * dy);
                }
            }
            local
        })
        .collect();

    // Fixed tile order keeps the reduction independent of the thread count.
    let mut splat_grads = vec![SplatGrad::default(); prep.splats.len()];
    for (tile, local) in tile_grads.iter().enumerate() {
        for (pos, &k) in prep.tiles[tile].iter().enumerate() {
            splat_grads[k as usize].add(&local[pos]);
        }
    }
    let mut out = SceneGradients::zeros(scene.len());
    let per_splat: Vec<(usize, GaussianGrad)> = prep
        .splats
        .par_iter()
        .zip(splat_grads.par_iter())
        .map(|(s, sg)| {
            let i = s.index as usize;
            (i, project_backward(&scene.gaussians[i], cam, sg))
        })
        .collect();
    for (i, g) in per_splat {
        out.gaussians[i] = g;
    }
    Ok(out)
}

/// Per-Gaussian pooled sums for several views, accumulated before any division.
pub fn pool_views<'a>(
    outputs: impl IntoIterator<Item = (&'a RenderOutput, &'a Image)>,
    n: usize,
    dim: usize,
) -> Result<PooledSums> {
    let mut total = PooledSums {
        weighted: Array2::zeros((n, dim)),
        weight: vec![0.0; n],
    };
    for (out, map) in outputs {
        total.accumulate(&pool_over_pixels(out, map)?)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests;
