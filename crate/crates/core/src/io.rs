//! On-disk formats: binary scene files, JSON camera lists, raw depth maps and
//! 8-bit PNG images. Every writer goes through [`write_atomic`], so a failed
//! command never leaves a complete-looking output behind.

use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::gaussian::{Gaussian, GaussianScene};
use crate::image::Image;

pub const SCENE_MAGIC: &[u8; 4] = b"GSPL";
pub const SCENE_VERSION: u32 = 1;
pub const DEPTH_MAGIC: &[u8; 4] = b"DPTH";
/// Rotation blocks further than this from orthonormal are rejected on load.
pub const CAMERA_LOAD_TOLERANCE: f64 = 1e-5;

fn partial_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".partial");
    PathBuf::from(name)
}

/// Writes `bytes` to `<path>.partial` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = partial_path(path);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("unexpected end of file".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

/// Serializes a scene. Values are stored as `f32`.
pub fn scene_to_bytes(scene: &GaussianScene) -> Vec<u8> {
    let n = scene.len();
    let d = scene.feature_dim();
    let mut out = Vec::with_capacity(24 + n * 56 + if d > 0 { 4 + n * d * 4 } else { 0 });
    out.extend_from_slice(SCENE_MAGIC);
    out.extend_from_slice(&SCENE_VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&(scene.extent as f32).to_le_bytes());
    for g in &scene.gaussians {
        for v in g.to_params() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    if d > 0 {
        out.extend_from_slice(&(d as u32).to_le_bytes());
        for v in scene.features.iter() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

pub fn scene_from_bytes(bytes: &[u8]) -> Result<GaussianScene> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != SCENE_MAGIC {
        return Err(Error::Format("not a scene file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != SCENE_VERSION {
        return Err(Error::Format(format!(
            "scene file version {version} is not supported (expected {SCENE_VERSION})"
        )));
    }
    let n = usize::try_from(r.u64()?).map_err(|_| Error::Format("gaussian count overflows".into()))?;
    if n.checked_mul(56).is_none_or(|b| b > r.remaining()) {
        return Err(Error::Format(format!("header declares {n} gaussians but the file is too short")));
    }
    let extent = r.f32()? as f64;
    let mut gaussians = Vec::with_capacity(n);
    for _ in 0..n {
        let mut p = [0.0; 14];
        for v in &mut p {
            *v = r.f32()? as f64;
        }
        gaussians.push(Gaussian::from_params(&p));
    }
    let features = if r.remaining() > 0 {
        let d = r.u32()? as usize;
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n * d {
            data.push(r.f32()? as f64);
        }
        Array2::from_shape_vec((n, d), data).map_err(|e| Error::Format(e.to_string()))?
    } else {
        Array2::zeros((n, 0))
    };
    if r.remaining() != 0 {
        return Err(Error::Format(format!("{} trailing bytes in scene file", r.remaining())));
    }
    let mut scene = GaussianScene::new(gaussians, features, extent)?;
    // Stored quaternions are unit up to f32 rounding; renormalizing keeps that.
    for g in &mut scene.gaussians {
        let q = g.rotation;
        let n = q.norm();
        if (n - 1.0).abs() > 1e-5 {
            g.rotation = q.normalized();
        }
    }
    Ok(scene)
}

pub fn write_scene(path: &Path, scene: &GaussianScene) -> Result<()> {
    write_atomic(path, &scene_to_bytes(scene))
}

pub fn read_scene(path: &Path) -> Result<GaussianScene> {
    scene_from_bytes(&read_bytes(path)?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CameraRecord {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
    /// 3x4 row-major `[R | t]`.
    world_to_cam: [f64; 12],
}

impl From<&Camera> for CameraRecord {
    fn from(c: &Camera) -> Self {
        let mut m = [0.0; 12];
        for r in 0..3 {
            for k in 0..3 {
                m[r * 4 + k] = c.rotation[(r, k)];
            }
            m[r * 4 + 3] = c.translation[r];
        }
        Self {
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            width: c.width,
            height: c.height,
            world_to_cam: m,
        }
    }
}

pub fn cameras_to_json(cameras: &[Camera]) -> String {
    let records: Vec<CameraRecord> = cameras.iter().map(CameraRecord::from).collect();
    serde_json::to_string_pretty(&records).expect("cameras serialize")
}

pub fn cameras_from_json(text: &str) -> Result<Vec<Camera>> {
    let records: Vec<CameraRecord> =
        serde_json::from_str(text).map_err(|e| Error::Format(format!("camera file: {e}")))?;
    records
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let m = &r.world_to_cam;
            let mut cam = Camera {
                fx: r.fx,
                fy: r.fy,
                cx: r.cx,
                cy: r.cy,
                width: r.width,
                height: r.height,
                rotation: Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]),
                translation: Vector3::new(m[3], m[7], m[11]),
            };
            cam.validate(CAMERA_LOAD_TOLERANCE)
                .map_err(|e| Error::Format(format!("camera {i}: {e}")))?;
            let before = cam.rotation;
            cam.reorthonormalize();
            // Keep exactly-orthonormal input bit-identical.
            if (cam.rotation - before).abs().max() < 1e-15 {
                cam.rotation = before;
            }
            Ok(cam)
        })
        .collect()
}

pub fn write_cameras(path: &Path, cameras: &[Camera]) -> Result<()> {
    write_atomic(path, cameras_to_json(cameras).as_bytes())
}

pub fn read_cameras(path: &Path) -> Result<Vec<Camera>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    cameras_from_json(&text)
}

/// Depth map file: `DPTH`, width and height as `u32`, then `f32` values row by row.
pub fn depth_to_bytes(width: usize, height: usize, depth: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + depth.len() * 4);
    out.extend_from_slice(DEPTH_MAGIC);
    out.extend_from_slice(&(width as u32).to_le_bytes());
    out.extend_from_slice(&(height as u32).to_le_bytes());
    for v in depth {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

/// Returns `(width, height, values)`.
pub fn depth_from_bytes(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != DEPTH_MAGIC {
        return Err(Error::Format("not a depth file (bad magic)".into()));
    }
    let w = r.u32()? as usize;
    let h = r.u32()? as usize;
    if r.remaining() != w * h * 4 {
        return Err(Error::Format(format!("depth file size does not match {w}x{h}")));
    }
    let values = (0..w * h).map(|_| r.f32().map(f64::from)).collect::<Result<Vec<_>>>()?;
    Ok((w, h, values))
}

pub fn write_depth(path: &Path, width: usize, height: usize, depth: &[f64]) -> Result<()> {
    write_atomic(path, &depth_to_bytes(width, height, depth))
}

pub fn read_depth(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    depth_from_bytes(&read_bytes(path)?)
}

pub fn png_bytes(image: &Image) -> Result<Vec<u8>> {
    let rgb = image.to_rgb8()?;
    let mut buf = std::io::Cursor::new(Vec::new());
    rgb.write_to(&mut buf, image::ImageFormat::Png)
        .map_err(|e| Error::Format(format!("png encode: {e}")))?;
    Ok(buf.into_inner())
}

pub fn write_png(path: &Path, image: &Image) -> Result<()> {
    write_atomic(path, &png_bytes(image)?)
}

pub fn read_png(path: &Path) -> Result<Image> {
    let bytes = read_bytes(path)?;
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Ok(Image::from_rgb8(&img.to_rgb8()))
}
