//! Image quality metrics and per-view evaluation reports.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::View;
use crate::error::{Error, Result};
use crate::features::{extract_features, FeatureExtractorSpec};
use crate::gaussian::GaussianScene;
use crate::image::Image;
use crate::raster::{render, RenderOptions};

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Peak signal-to-noise ratio on unit range, in dB.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    Ok(psnr_from_mse(a.mse(b)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (-10.0 * mse.log10()).min(PSNR_CAP)
    }
}

fn ssim_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.iter().map(|v| v / s).collect()
}

fn gray(img: &Image) -> Result<Image> {
    match img.channels {
        1 => Ok(img.clone()),
        3 => img.luminance(),
        c => Err(Error::Shape(format!("ssim needs 1 or 3 channels, got {c}"))),
    }
}

/// Single-scale SSIM on luminance: Gaussian window (11×11, σ = 1.5), mean
/// over positions where the window fits inside the image.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.ensure_same_shape(b)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {}x{}",
            a.width, a.height
        )));
    }
    let (x, y) = (gray(a)?, gray(b)?);
    let g = ssim_window();
    let (w, h) = (a.width, a.height);
    let (ow, oh) = (w - SSIM_WINDOW + 1, h - SSIM_WINDOW + 1);
    let rows: Vec<f64> = (0..oh)
        .into_par_iter()
        .map(|oy| {
            let mut acc = 0.0;
            for ox in 0..ow {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for (j, gj) in g.iter().enumerate() {
                    for (i, gi) in g.iter().enumerate() {
                        let wgt = gi * gj;
                        let p = (oy + j) * w + ox + i;
                        let (u, v) = (x.data[p], y.data[p]);
                        mx += wgt * u;
                        my += wgt * v;
                        sxx += wgt * u * u;
                        syy += wgt * v * v;
                        sxy += wgt * u * v;
                    }
                }
                let (vx, vy, cxy) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                acc += ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                    / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
            }
            acc
        })
        .collect();
    Ok(rows.iter().sum::<f64>() / (ow * oh) as f64)
}

/// RMS distance between feature maps, a stand-in for a learned perceptual
/// metric.
pub fn featdist(a: &Image, b: &Image, spec: &FeatureExtractorSpec) -> Result<f64> {
    a.ensure_same_shape(b)?;
    Ok(extract_features(a, spec)?.mse(&extract_features(b, spec)?)?.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub view: String,
    pub psnr: f64,
    pub ssim: f64,
    pub featdist: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub views: Vec<ViewMetrics>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_featdist: f64,
}

impl MetricReport {
    pub fn from_views(views: Vec<ViewMetrics>) -> Result<Self> {
        if views.is_empty() {
            return Err(Error::InvalidArgument("report needs at least one view".into()));
        }
        let n = views.len() as f64;
        let mean = |f: fn(&ViewMetrics) -> f64| views.iter().map(f).sum::<f64>() / n;
        Ok(Self {
            mean_psnr: mean(|v| v.psnr),
            mean_ssim: mean(|v| v.ssim),
            mean_featdist: mean(|v| v.featdist),
            views,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned text table with a trailing mean row.
    pub fn to_table(&self) -> String {
        let width = self.views.iter().map(|v| v.view.len()).max().unwrap_or(4).max(4);
        let mut s = format!("{:<width$}  {:>9}  {:>7}  {:>9}\n", "view", "psnr_db", "ssim", "featdist");
        for v in &self.views {
            let _ = writeln!(s, "{:<width$}  {:>9.4}  {:>7.4}  {:>9.5}", v.view, v.psnr, v.ssim, v.featdist);
        }
        let _ = writeln!(
            s,
            "{:<width$}  {:>9.4}  {:>7.4}  {:>9.5}",
            "mean", self.mean_psnr, self.mean_ssim, self.mean_featdist
        );
        s
    }
}

/// Compares a rendering against its ground truth.
pub fn compare(name: impl Into<String>, rendered: &Image, truth: &Image, spec: &FeatureExtractorSpec) -> Result<ViewMetrics> {
    Ok(ViewMetrics {
        view: name.into(),
        psnr: psnr(rendered, truth)?,
        ssim: ssim(rendered, truth)?,
        featdist: featdist(rendered, truth, spec)?,
    })
}

/// Renders every view and scores it against the view's image.
pub fn evaluate(
    scene: &GaussianScene,
    views: &[View],
    opts: &RenderOptions,
    spec: &FeatureExtractorSpec,
) -> Result<MetricReport> {
    let per_view = views
        .par_iter()
        .enumerate()
        .map(|(k, v)| {
            let r = render(scene, &v.camera, opts)?;
            compare(format!("view_{k:03}"), &r.image, &v.image, spec)
        })
        .collect::<Result<Vec<_>>>()?;
    MetricReport::from_views(per_view)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noisy(base: &Image, amp: f64, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = base.clone();
        for v in &mut out.data {
            *v += amp * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        }
        out
    }

    fn pattern() -> Image {
        Image::from_fn(24, 20, 3, |x, y, c| 0.5 + 0.3 * ((x as f64 * 0.7 + y as f64 * 0.3 + c as f64).sin()))
    }

    #[test]
    fn psnr_closed_forms() {
        let a = Image::filled(8, 8, 3, 0.4);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let b = Image::filled(8, 8, 3, 0.5);
        assert_relative_eq!(psnr(&a, &b).unwrap(), 20.0, epsilon = 1e-9);
        assert_eq!(psnr_from_mse(0.01), 20.0);
        assert!(psnr(&a, &Image::filled(8, 7, 3, 0.4)).is_err());
    }

    #[test]
    fn psnr_symmetric_and_monotone_in_noise() {
        let base = pattern();
        let mut last = f64::INFINITY;
        for amp in [0.01, 0.02, 0.05, 0.1] {
            let n = noisy(&base, amp, 3);
            let p = psnr(&base, &n).unwrap();
            assert_eq!(p, psnr(&n, &base).unwrap());
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn ssim_identities() {
        let a = pattern();
        assert_relative_eq!(ssim(&a, &a).unwrap(), 1.0, epsilon = 1e-12);
        let b = noisy(&a, 0.05, 4);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() <= 1e-9);
        let half = Image::filled(16, 16, 3, 0.5);
        let flipped = Image::from_fn(16, 16, 3, |x, y, c| 1.0 - half.get(x, y, c));
        assert_relative_eq!(ssim(&half, &flipped).unwrap(), 1.0, epsilon = 1e-12);
        assert!(ssim(&Image::zeros(10, 30, 3), &Image::zeros(10, 30, 3)).is_err());
    }

    #[test]
    fn ssim_constant_images_closed_form() {
        let a = Image::filled(16, 16, 3, 0.5);
        let b = Image::filled(16, 16, 3, 0.25);
        let expect = (2.0 * 0.125 + 1e-4) / (0.3125 + 1e-4);
        let got = ssim(&a, &b).unwrap();
        assert_relative_eq!(got, expect, epsilon = 1e-9);
        assert!((got - 0.80006).abs() < 1e-4);
    }

    #[test]
    fn report_means_and_table() {
        let views = vec![
            ViewMetrics {
                view: "a".into(),
                psnr: 20.0,
                ssim: 0.5,
                featdist: 0.1,
            },
            ViewMetrics {
                view: "b".into(),
                psnr: 30.0,
                ssim: 0.7,
                featdist: 0.3,
            },
        ];
        let r = MetricReport::from_views(views).unwrap();
        assert_eq!(r.mean_psnr, 25.0);
        assert_relative_eq!(r.mean_ssim, 0.6);
        assert_relative_eq!(r.mean_featdist, 0.2);
        let t = r.to_table();
        assert_eq!(t.lines().count(), 4);
        assert!(t.lines().last().unwrap().starts_with("mean"));
        let back: MetricReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
        assert!(MetricReport::from_views(vec![]).is_err());
    }
}
