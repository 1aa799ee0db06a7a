use std::collections::BTreeMap;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::gaussian::GaussianScene;

/// Attention is restricted to this many members per window.
pub const MAX_WINDOW_MEMBERS: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    /// Integer cell coordinates on the (possibly shifted) lattice.
    pub cell: [i64; 3],
    pub center: Vector3<f64>,
    /// Members that attend to each other, in ascending index order.
    pub members: Vec<usize>,
    /// Members beyond the cap; they get MLP-only updates.
    pub overflow: Vec<usize>,
}

/// Assignment of Gaussians to voxel windows.
///
/// The lattice is world aligned: cell `k` spans `[k·s - o, (k+1)·s - o)`
/// per axis, with offset `o = s/2` on odd steps and 0 otherwise, so it
/// covers any bounding box and moves only when a Gaussian crosses a face.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowPartition {
    pub cell_size: f64,
    pub shifted: bool,
    /// Scene extent at build time; scales the position residual bound.
    pub extent: f64,
    pub windows: Vec<Window>,
    /// Window index of every Gaussian.
    pub window_of: Vec<usize>,
}

impl WindowPartition {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn offset(&self) -> f64 {
        lattice_offset(self.cell_size, self.shifted)
    }
}

fn lattice_offset(cell: f64, shifted: bool) -> f64 {
    if shifted {
        0.5 * cell
    } else {
        0.0
    }
}

/// Lattice cell containing `p`.
pub fn cell_index(p: &Vector3<f64>, cell_size: f64, shifted: bool) -> [i64; 3] {
    let o = lattice_offset(cell_size, shifted);
    [0, 1, 2].map(|a| ((p[a] + o) / cell_size).floor() as i64)
}

pub fn cell_center(cell: [i64; 3], cell_size: f64, shifted: bool) -> Vector3<f64> {
    let o = lattice_offset(cell_size, shifted);
    Vector3::from_fn(|a, _| (cell[a] as f64 + 0.5) * cell_size - o)
}

/// Partitions the scene into voxel windows; odd steps use the half-cell
/// shifted lattice.
pub fn build_windows(scene: &GaussianScene, cell_size: f64, step_index: usize) -> Result<WindowPartition> {
    if !(cell_size > 0.0 && cell_size.is_finite()) {
        return Err(Error::InvalidArgument(format!("cell size must be positive, got {cell_size}")));
    }
    let shifted = step_index % 2 == 1;
    let mut cells: BTreeMap<[i64; 3], Vec<usize>> = BTreeMap::new();
    for (i, g) in scene.gaussians.iter().enumerate() {
        cells.entry(cell_index(&g.position, cell_size, shifted)).or_default().push(i);
    }
    let mut window_of = vec![0; scene.len()];
    let windows = cells
        .into_iter()
        .enumerate()
        .map(|(w, (cell, all))| {
            for &i in &all {
                window_of[i] = w;
            }
            let (members, overflow) = if all.len() > MAX_WINDOW_MEMBERS {
                let mut ranked = all.clone();
                ranked.sort_by(|&a, &b| {
                    let (oa, ob) = (scene.gaussians[a].opacity_logit, scene.gaussians[b].opacity_logit);
                    ob.total_cmp(&oa).then(a.cmp(&b))
                });
                let mut keep = ranked[..MAX_WINDOW_MEMBERS].to_vec();
                let mut rest = ranked[MAX_WINDOW_MEMBERS..].to_vec();
                keep.sort_unstable();
                rest.sort_unstable();
                (keep, rest)
            } else {
                (all, Vec::new())
            };
            Window {
                cell,
                center: cell_center(cell, cell_size, shifted),
                members,
                overflow,
            }
        })
        .collect();
    Ok(WindowPartition {
        cell_size,
        shifted,
        extent: scene.extent,
        windows,
        window_of,
    })
}
