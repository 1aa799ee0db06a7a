//! The weight-shared residual update head: per-Gaussian tokens, voxel
//! window attention, a small MLP, and the bounded state update.

mod net;
mod params;
mod tokens;
mod update;
mod window;

pub use net::{head_backward, head_forward};
pub use params::{HeadDims, HeadParams, Layout, ResidualBounds, Slot, HEAD_FORMAT_VERSION, MIN_STEP_SCALE};
pub use tokens::build_tokens;
pub use update::update_scene;
pub use window::{build_windows, cell_center, cell_index, Window, WindowPartition, MAX_WINDOW_MEMBERS};

pub(crate) use tokens::tokens_backward;
pub(crate) use update::update_scene_backward;

/// Width of the state part of a token before the appearance feature.
pub const STATE_DIM: usize = 10;
/// Residual channels: position 3, log-scale 3, color 3, opacity logit 1.
pub const OUTPUT_DIM: usize = 10;

#[cfg(test)]
mod tests;
