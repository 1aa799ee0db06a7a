//! Forward-only iterative refinement of 3D Gaussian splatting scenes.
//!
//! A scene is rendered into its reference views, per-pixel discrepancies are
//! pooled onto the Gaussians that produced those pixels, and a small
//! weight-shared network predicts bounded residual updates to every
//! Gaussian. Repeating this a few times refines the scene without any
//! test-time gradient descent. An optional frozen image enhancer supplies a
//! second, prior-driven cue from novel viewpoints.
//!
//! The crate also contains what is needed to learn and check the update
//! network at toy scale: an exact analytic rasterizer backward pass,
//! unrolled training, a gradient-descent baseline, synthetic scenes, and
//! image metrics.

pub mod camera;
pub mod cues;
pub mod enhancer;
pub mod error;
pub mod features;
pub mod gaussian;
pub mod head;
pub mod image;
pub mod io;
pub mod metrics;
pub mod quat;
pub mod raster;
pub mod refine;
pub mod tensor_file;
pub mod train;

pub use camera::{interpolate_cameras, Camera, View};
pub use error::{Error, Result};
pub use gaussian::{gaussian_covariance, Gaussian, GaussianScene};
pub use image::Image;
pub use quat::{quat_to_rotmat, Quat};
pub use raster::{render, render_backward, RenderOptions, RenderOutput, SceneGradients};
