use ndarray::Array2;

use super::window::WindowPartition;
use super::STATE_DIM;
use crate::error::{Error, Result};
use crate::gaussian::GaussianScene;
use crate::raster::SceneGradients;

/// Per-Gaussian tokens `[state ∥ o ∥ p]`. The state part is position
/// relative to the window center in cell units, log-scale, color, opacity
/// logit and the appearance feature. A missing prior is all zeros.
pub fn build_tokens(
    scene: &GaussianScene,
    observation: &Array2<f64>,
    prior: Option<&Array2<f64>>,
    windows: &WindowPartition,
) -> Result<Array2<f64>> {
    let n = scene.len();
    let d = observation.ncols();
    if observation.nrows() != n || windows.window_of.len() != n {
        return Err(Error::Shape(format!(
            "{n} gaussians, {} observation rows, {} window assignments",
            observation.nrows(),
            windows.window_of.len()
        )));
    }
    if let Some(p) = prior {
        if p.dim() != observation.dim() {
            return Err(Error::Shape(format!("prior cues {:?} vs observation {:?}", p.dim(), observation.dim())));
        }
    }
    let df = scene.feature_dim();
    let mut tokens = Array2::zeros((n, STATE_DIM + df + 2 * d));
    for (i, g) in scene.gaussians.iter().enumerate() {
        let mut row = tokens.row_mut(i);
        let center = windows.windows[windows.window_of[i]].center;
        for a in 0..3 {
            row[a] = (g.position[a] - center[a]) / windows.cell_size;
            row[3 + a] = g.log_scale[a];
            row[6 + a] = g.color[a];
        }
        row[9] = g.opacity_logit;
        for k in 0..df {
            row[STATE_DIM + k] = scene.features[[i, k]];
        }
        let base = STATE_DIM + df;
        for k in 0..d {
            row[base + k] = observation[[i, k]];
            if let Some(p) = prior {
                row[base + d + k] = p[[i, k]];
            }
        }
    }
    Ok(tokens)
}

/// Adds the state-path gradient of `d_tokens` onto `grads`. Cue columns
/// and features carry no gradient back to the scene.
pub(crate) fn tokens_backward(windows: &WindowPartition, d_tokens: &Array2<f64>, grads: &mut SceneGradients) {
    for (i, g) in grads.gaussians.iter_mut().enumerate() {
        let row = d_tokens.row(i);
        for a in 0..3 {
            g.position[a] += row[a] / windows.cell_size;
            g.log_scale[a] += row[3 + a];
            g.color[a] += row[6 + a];
        }
        g.opacity_logit += row[9];
    }
}
