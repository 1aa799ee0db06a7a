//! Frozen image feature extractors.
//!
//! The handcrafted bank has 12 channels: raw RGB (0-2), Sobel gradient
//! magnitude per RGB channel (3-5), RGB under a 5x5 binomial blur (6-8) and
//! under the same blur applied twice (9-11). All filters use reflect padding,
//! so feature maps keep the input resolution and align pixel for pixel with
//! render contributions.

use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor_file::TensorFile;

pub const HANDCRAFTED_CHANNELS: usize = 12;

const BINOMIAL_1D: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

/// Horizontal Sobel kernel, normalized so a unit ramp has response 1.
const SOBEL_X: [f64; 9] = [
    -1.0 / 8.0, 0.0, 1.0 / 8.0, //
    -2.0 / 8.0, 0.0, 2.0 / 8.0, //
    -1.0 / 8.0, 0.0, 1.0 / 8.0,
];
const SOBEL_Y: [f64; 9] = [
    -1.0 / 8.0, -2.0 / 8.0, -1.0 / 8.0, //
    0.0, 0.0, 0.0, //
    1.0 / 8.0, 2.0 / 8.0, 1.0 / 8.0,
];

pub(crate) fn binomial_5x5() -> [f64; 25] {
    std::array::from_fn(|k| BINOMIAL_1D[k / 5] * BINOMIAL_1D[k % 5])
}

/// Mirror index into `0..n` without repeating the edge sample.
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut i = i.rem_euclid(period);
    if i >= n as isize {
        i = period - i;
    }
    i as usize
}

/// A single-channel `w x h` plane.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Plane {
    pub w: usize,
    pub h: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn zeros(w: usize, h: usize) -> Self {
        Self {
            w,
            h,
            data: vec![0.0; w * h],
        }
    }

    pub fn from_channel(img: &Image, c: usize) -> Self {
        Self {
            w: img.width,
            h: img.height,
            data: img.data.iter().skip(c).step_by(img.channels).copied().collect(),
        }
    }

    /// Cross-correlation with an odd `k x k` kernel, reflect padding.
    pub fn correlate(&self, kernel: &[f64], k: usize) -> Plane {
        let r = (k / 2) as isize;
        let mut out = Plane::zeros(self.w, self.h);
        for y in 0..self.h {
            for x in 0..self.w {
                let mut acc = 0.0;
                for ky in 0..k {
                    let sy = reflect(y as isize + ky as isize - r, self.h);
                    for kx in 0..k {
                        let sx = reflect(x as isize + kx as isize - r, self.w);
                        acc += kernel[ky * k + kx] * self.data[sy * self.w + sx];
                    }
                }
                out.data[y * self.w + x] = acc;
            }
        }
        out
    }

    /// Adjoint of [`Plane::correlate`]: maps an output gradient to an input gradient.
    pub fn correlate_adjoint(&self, kernel: &[f64], k: usize) -> Plane {
        let r = (k / 2) as isize;
        let mut out = Plane::zeros(self.w, self.h);
        for y in 0..self.h {
            for x in 0..self.w {
                let g = self.data[y * self.w + x];
                if g == 0.0 {
                    continue;
                }
                for ky in 0..k {
                    let sy = reflect(y as isize + ky as isize - r, self.h);
                    for kx in 0..k {
                        let sx = reflect(x as isize + kx as isize - r, self.w);
                        out.data[sy * self.w + sx] += kernel[ky * k + kx] * g;
                    }
                }
            }
        }
        out
    }

    fn add_assign(&mut self, o: &Plane) {
        for (a, b) in self.data.iter_mut().zip(&o.data) {
            *a += b;
        }
    }
}

fn planes_to_image(planes: &[Plane]) -> Image {
    let (w, h) = (planes[0].w, planes[0].h);
    let c = planes.len();
    let mut img = Image::zeros(w, h, c);
    for (ch, p) in planes.iter().enumerate() {
        for (i, v) in p.data.iter().enumerate() {
            img.data[i * c + ch] = *v;
        }
    }
    img
}

/// Small two-layer convolutional extractor read from a tensor file:
/// `conv2(relu(conv1(rgb)))`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvFeatures {
    hidden: usize,
    out: usize,
    k1: usize,
    k2: usize,
    /// `[hidden][3][k1][k1]`
    w1: Vec<f64>,
    b1: Vec<f64>,
    /// `[out][hidden][k2][k2]`
    w2: Vec<f64>,
    b2: Vec<f64>,
}

impl ConvFeatures {
    pub fn from_tensor_file(file: &TensorFile) -> Result<Self> {
        let w1 = file.get("conv1.weight")?;
        let w2 = file.get("conv2.weight")?;
        let malformed = |m: &str| Error::Format(format!("feature weights: {m}"));
        if w1.shape.len() != 4 || w1.shape[1] != 3 || w1.shape[2] != w1.shape[3] || w1.shape[2] % 2 == 0 {
            return Err(malformed("conv1.weight must be [hidden, 3, k, k] with odd k"));
        }
        let (hidden, k1) = (w1.shape[0], w1.shape[2]);
        if w2.shape.len() != 4 || w2.shape[1] != hidden || w2.shape[2] != w2.shape[3] || w2.shape[2] % 2 == 0 {
            return Err(malformed("conv2.weight must be [out, hidden, k, k] with odd k"));
        }
        let (out, k2) = (w2.shape[0], w2.shape[2]);
        if out < 3 {
            return Err(malformed("at least 3 output channels required"));
        }
        let b1 = file.expect("conv1.bias", &[hidden])?;
        let b2 = file.expect("conv2.bias", &[out])?;
        let widen = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
        let net = Self {
            hidden,
            out,
            k1,
            k2,
            w1: widen(&w1.data),
            b1: widen(&b1.data),
            w2: widen(&w2.data),
            b2: widen(&b2.data),
        };
        if net.w1.iter().chain(&net.w2).chain(&net.b1).chain(&net.b2).any(|v| !v.is_finite()) {
            return Err(malformed("non-finite weights"));
        }
        Ok(net)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_tensor_file(&TensorFile::read(path)?)
    }

    fn kernel1(&self, o: usize, i: usize) -> &[f64] {
        let kk = self.k1 * self.k1;
        &self.w1[(o * 3 + i) * kk..(o * 3 + i + 1) * kk]
    }

    fn kernel2(&self, o: usize, i: usize) -> &[f64] {
        let kk = self.k2 * self.k2;
        &self.w2[(o * self.hidden + i) * kk..(o * self.hidden + i + 1) * kk]
    }

    fn hidden_pre(&self, rgb: &[Plane]) -> Vec<Plane> {
        (0..self.hidden)
            .map(|o| {
                let mut acc = Plane::zeros(rgb[0].w, rgb[0].h);
                for (i, p) in rgb.iter().enumerate() {
                    acc.add_assign(&p.correlate(self.kernel1(o, i), self.k1));
                }
                acc.data.iter_mut().for_each(|v| *v += self.b1[o]);
                acc
            })
            .collect()
    }

    fn forward(&self, rgb: &[Plane]) -> Vec<Plane> {
        let hidden: Vec<Plane> = self
            .hidden_pre(rgb)
            .into_iter()
            .map(|mut p| {
                p.data.iter_mut().for_each(|v| *v = v.max(0.0));
                p
            })
            .collect();
        (0..self.out)
            .map(|o| {
                let mut acc = Plane::zeros(rgb[0].w, rgb[0].h);
                for (i, p) in hidden.iter().enumerate() {
                    acc.add_assign(&p.correlate(self.kernel2(o, i), self.k2));
                }
                acc.data.iter_mut().for_each(|v| *v += self.b2[o]);
                acc
            })
            .collect()
    }

    fn backward(&self, rgb: &[Plane], grad_out: &[Plane]) -> Vec<Plane> {
        let pre = self.hidden_pre(rgb);
        let (w, h) = (rgb[0].w, rgb[0].h);
        let mut grad_hidden = vec![Plane::zeros(w, h); self.hidden];
        for (o, g) in grad_out.iter().enumerate() {
            for (i, gh) in grad_hidden.iter_mut().enumerate() {
                gh.add_assign(&g.correlate_adjoint(self.kernel2(o, i), self.k2));
            }
        }
        for (gh, p) in grad_hidden.iter_mut().zip(&pre) {
            for (g, v) in gh.data.iter_mut().zip(&p.data) {
                if *v <= 0.0 {
                    *g = 0.0;
                }
            }
        }
        let mut grad_rgb = vec![Plane::zeros(w, h); 3];
        for (o, gh) in grad_hidden.iter().enumerate() {
            for (i, gi) in grad_rgb.iter_mut().enumerate() {
                gi.add_assign(&gh.correlate_adjoint(self.kernel1(o, i), self.k1));
            }
        }
        grad_rgb
    }
}

/// Which frozen extractor produces feature maps.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum FeatureExtractorSpec {
    #[default]
    Handcrafted,
    Loaded(ConvFeatures),
}

impl FeatureExtractorSpec {
    pub fn channel_count(&self) -> usize {
        match self {
            Self::Handcrafted => HANDCRAFTED_CHANNELS,
            Self::Loaded(net) => net.out,
        }
    }
}

fn rgb_planes(image: &Image) -> Result<Vec<Plane>> {
    if image.channels != 3 {
        return Err(Error::Shape(format!(
            "feature extraction expects an RGB image, got {} channels",
            image.channels
        )));
    }
    Ok((0..3).map(|c| Plane::from_channel(image, c)).collect())
}

fn gradient_magnitude(gx: &Plane, gy: &Plane) -> Plane {
    Plane {
        w: gx.w,
        h: gx.h,
        data: gx.data.iter().zip(&gy.data).map(|(a, b)| (a * a + b * b).sqrt()).collect(),
    }
}

/// Computes the feature map of an RGB image at the same resolution.
pub fn extract_features(image: &Image, spec: &FeatureExtractorSpec) -> Result<Image> {
    let rgb = rgb_planes(image)?;
    let planes = match spec {
        FeatureExtractorSpec::Handcrafted => {
            let blur = binomial_5x5();
            let mut planes = rgb.clone();
            for p in &rgb {
                planes.push(gradient_magnitude(&p.correlate(&SOBEL_X, 3), &p.correlate(&SOBEL_Y, 3)));
            }
            let blurred: Vec<Plane> = rgb.iter().map(|p| p.correlate(&blur, 5)).collect();
            let twice: Vec<Plane> = blurred.iter().map(|p| p.correlate(&blur, 5)).collect();
            planes.extend(blurred);
            planes.extend(twice);
            planes
        }
        FeatureExtractorSpec::Loaded(net) => net.forward(&rgb),
    };
    Ok(planes_to_image(&planes))
}

/// Pulls a gradient on the feature map back to the RGB input.
pub fn extract_features_backward(image: &Image, spec: &FeatureExtractorSpec, grad: &Image) -> Result<Image> {
    let rgb = rgb_planes(image)?;
    if grad.width != image.width || grad.height != image.height || grad.channels != spec.channel_count() {
        return Err(Error::Shape("feature gradient does not match the feature map".into()));
    }
    let g: Vec<Plane> = (0..grad.channels).map(|c| Plane::from_channel(grad, c)).collect();
    let grad_rgb = match spec {
        FeatureExtractorSpec::Handcrafted => {
            let blur = binomial_5x5();
            (0..3)
                .map(|c| {
                    let mut acc = g[c].clone();
                    let gx = rgb[c].correlate(&SOBEL_X, 3);
                    let gy = rgb[c].correlate(&SOBEL_Y, 3);
                    let mut ggx = Plane::zeros(gx.w, gx.h);
                    let mut ggy = Plane::zeros(gx.w, gx.h);
                    for i in 0..gx.data.len() {
                        let m = (gx.data[i] * gx.data[i] + gy.data[i] * gy.data[i]).sqrt();
                        if m > 0.0 {
                            ggx.data[i] = g[3 + c].data[i] * gx.data[i] / m;
                            ggy.data[i] = g[3 + c].data[i] * gy.data[i] / m;
                        }
                    }
                    acc.add_assign(&ggx.correlate_adjoint(&SOBEL_X, 3));
                    acc.add_assign(&ggy.correlate_adjoint(&SOBEL_Y, 3));
                    acc.add_assign(&g[6 + c].correlate_adjoint(&blur, 5));
                    acc.add_assign(&g[9 + c].correlate_adjoint(&blur, 5).correlate_adjoint(&blur, 5));
                    acc
                })
                .collect::<Vec<_>>()
        }
        FeatureExtractorSpec::Loaded(net) => net.backward(&rgb, &g),
    };
    Ok(planes_to_image(&grad_rgb))
}

/// Elementwise `a - b`.
pub fn feature_difference(a: &Image, b: &Image) -> Result<Image> {
    a.ensure_same_shape(b)?;
    Ok(Image {
        width: a.width,
        height: a.height,
        channels: a.channels,
        data: a.data.iter().zip(&b.data).map(|(x, y)| x - y).collect(),
    })
}
