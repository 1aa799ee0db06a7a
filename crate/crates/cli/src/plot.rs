//! Unlabelled line plots written as PNG.

use std::path::Path;

use gifsplat::io::write_png;
use gifsplat::{Error, Image, Result};
use plotters::prelude::*;

pub const PLOT_WIDTH: u32 = 640;
pub const PLOT_HEIGHT: u32 = 400;

fn padded(lo: f64, hi: f64) -> (f64, f64) {
    let pad = if hi > lo { 0.05 * (hi - lo) } else { 0.5 * lo.abs().max(1.0) };
    (lo - pad, hi + pad)
}

/// Draws `points` as a polyline with markers inside a framed 5×5 grid.
pub fn line_plot(points: &[(f64, f64)]) -> Result<Image> {
    if points.is_empty() || points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::InvalidArgument("plot needs finite points".into()));
    }
    let (w, h) = (PLOT_WIDTH as usize, PLOT_HEIGHT as usize);
    let mut buf = vec![0u8; w * h * 3];
    {
        let fail = |e: String| Error::Numeric(format!("plot: {e}"));
        let root = BitMapBackend::with_buffer(&mut buf, (PLOT_WIDTH, PLOT_HEIGHT)).into_drawing_area();
        root.fill(&WHITE).map_err(|e| fail(e.to_string()))?;
        let fold = |f: fn(f64, f64) -> f64, init: f64, pick: fn(&(f64, f64)) -> f64| {
            points.iter().map(pick).fold(init, f)
        };
        let x = padded(fold(f64::min, f64::INFINITY, |p| p.0), fold(f64::max, f64::NEG_INFINITY, |p| p.0));
        let y = padded(fold(f64::min, f64::INFINITY, |p| p.1), fold(f64::max, f64::NEG_INFINITY, |p| p.1));
        let mut chart = ChartBuilder::on(&root)
            .margin(24)
            .build_cartesian_2d(x.0..x.1, y.0..y.1)
            .map_err(|e| fail(e.to_string()))?;
        let grid = RGBColor(225, 225, 225);
        for k in 1..5 {
            let f = k as f64 / 5.0;
            let gx = x.0 + f * (x.1 - x.0);
            let gy = y.0 + f * (y.1 - y.0);
            chart
                .draw_series([
                    PathElement::new(vec![(gx, y.0), (gx, y.1)], grid),
                    PathElement::new(vec![(x.0, gy), (x.1, gy)], grid),
                ])
                .map_err(|e| fail(e.to_string()))?;
        }
        chart
            .draw_series([Rectangle::new([(x.0, y.0), (x.1, y.1)], BLACK.stroke_width(1))])
            .map_err(|e| fail(e.to_string()))?;
        let pts = points.to_vec();
        chart
            .draw_series(LineSeries::new(pts.clone(), BLUE.stroke_width(2)))
            .map_err(|e| fail(e.to_string()))?;
        chart
            .draw_series(pts.into_iter().map(|p| Circle::new(p, 4, BLUE.filled())))
            .map_err(|e| fail(e.to_string()))?;
        root.present().map_err(|e| fail(e.to_string()))?;
    }
    Image::new(w, h, 3, buf.iter().map(|&b| b as f64 / 255.0).collect())
}

pub fn write_line_plot(path: &Path, points: &[(f64, f64)]) -> Result<()> {
    write_png(path, &line_plot(points)?)
}
