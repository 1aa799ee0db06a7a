use ndarray::Array2;

use super::RenderOutput;
use crate::error::{Error, Result};
use crate::image::Image;

/// Weighted sums `Σ_u w_i(u) v(u)` and weight sums `Σ_u w_i(u)` per Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledSums {
    pub weighted: Array2<f64>,
    pub weight: Vec<f64>,
}

impl PooledSums {
    pub fn accumulate(&mut self, other: &PooledSums) -> Result<()> {
        if self.weighted.dim() != other.weighted.dim() {
            return Err(Error::Shape("pooled sums have different shapes".into()));
        }
        self.weighted += &other.weighted;
        for (a, b) in self.weight.iter_mut().zip(&other.weight) {
            *a += b;
        }
        Ok(())
    }

    /// `weighted / (weight + eps)` row by row; rows with zero weight stay zero.
    pub fn normalized(&self, eps: f64) -> Array2<f64> {
        let mut out = self.weighted.clone();
        for (mut row, &w) in out.rows_mut().into_iter().zip(&self.weight) {
            if w == 0.0 {
                row.fill(0.0);
            } else {
                row.mapv_inplace(|v| v / (w + eps));
            }
        }
        out
    }
}

/// Scatters a per-pixel buffer onto Gaussians through the (truncated)
/// contribution lists of a render.
pub fn pool_over_pixels(output: &RenderOutput, per_pixel: &Image) -> Result<PooledSums> {
    if per_pixel.width != output.width() || per_pixel.height != output.height() {
        return Err(Error::Shape(format!(
            "pooling buffer {}x{} does not match render {}x{}",
            per_pixel.width,
            per_pixel.height,
            output.width(),
            output.height()
        )));
    }
    let dim = per_pixel.channels;
    let n = output.gaussian_count;
    let mut weighted = Array2::zeros((n, dim));
    let mut weight = vec![0.0; n];
    for p in 0..output.contributions.pixel_count() {
        let v = &per_pixel.data[p * dim..(p + 1) * dim];
        for c in output.contributions.pixel(p) {
            let i = c.gaussian as usize;
            weight[i] += c.weight;
            let mut row = weighted.row_mut(i);
            for (acc, x) in row.iter_mut().zip(v) {
                *acc += c.weight * x;
            }
        }
    }
    Ok(PooledSums { weighted, weight })
}
