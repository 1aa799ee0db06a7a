use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

/// Forward-only iterative refinement of Gaussian splatting scenes.
#[derive(Debug, Parser)]
#[command(name = "gifsplat", version)]
pub struct Cli {
    /// Worker threads; defaults to one per core.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Seed for every random choice a command makes.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// `key = value` file of default flag values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene, its views and depth maps.
    Synth(SynthArgs),
    /// Build a scene by unprojecting depth maps.
    Init(InitArgs),
    /// Refine a scene with a trained head.
    Refine(RefineArgs),
    /// Train a head on synthetic scenes.
    Train(TrainArgs),
    /// Fit a scene by per-scene gradient descent.
    Baseline(BaselineArgs),
    /// Score a scene against reference images or a reference scene.
    Eval(EvalArgs),
    /// Time refinement for a sweep of step counts.
    Bench(BenchArgs),
}

/// Synthetic scene and camera-ring settings.
#[derive(Debug, Clone, Args)]
pub struct SceneArgs {
    /// Exact Gaussian count; overrides the min and max.
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub min_count: Option<usize>,
    #[arg(long)]
    pub max_count: Option<usize>,
    #[arg(long)]
    pub width: Option<u32>,
    #[arg(long)]
    pub height: Option<u32>,
    /// Number of reference cameras.
    #[arg(long)]
    pub cameras: Option<usize>,
    /// random | textured-plane
    #[arg(long)]
    pub palette: Option<String>,
    #[arg(long)]
    pub extent: Option<f64>,
    /// Angle covered by the camera ring, degrees.
    #[arg(long)]
    pub arc: Option<f64>,
    #[arg(long)]
    pub elevation: Option<f64>,
    #[arg(long)]
    pub fov: Option<f64>,
    /// Ring radius in units of the extent.
    #[arg(long)]
    pub ring_radius: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub scene: SceneArgs,
}

#[derive(Debug, Args)]
pub struct InitArgs {
    /// Dataset directory with cameras, images and depth maps.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Unproject every n-th pixel in each direction.
    #[arg(long, default_value_t = 2)]
    pub stride: usize,
}

/// Refinement settings shared by `refine`, `train` and `bench`.
#[derive(Debug, Clone, Args)]
pub struct RefineSettings {
    /// ifsplat | gifsplat
    #[arg(long, default_value = "gifsplat")]
    pub mode: String,
    /// identity | unsharp[:strength] | external:<command>
    #[arg(long, default_value = "unsharp")]
    pub enhancer: String,
    /// Directory for external-enhancer image exchange.
    #[arg(long)]
    pub enhancer_workdir: Option<PathBuf>,
    /// Window cell size in world units.
    #[arg(long)]
    pub cell_size: Option<f64>,
    /// Also enhance the reference renders for prior cues.
    #[arg(long)]
    pub prior_on_refs: bool,
    /// single | double
    #[arg(long, default_value = "single")]
    pub precision: String,
}

#[derive(Debug, Args)]
pub struct RefineArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Starting scene; defaults to `init.gspl` in the dataset.
    #[arg(long)]
    pub scene: Option<PathBuf>,
    #[arg(long)]
    pub head: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = gifsplat::refine::DEFAULT_STEPS)]
    pub steps: usize,
    /// Per-step metrics as JSON.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// PSNR-per-step plot.
    #[arg(long)]
    pub plot: Option<PathBuf>,
    /// Directory for renders of every intermediate scene.
    #[arg(long)]
    pub dump_steps: Option<PathBuf>,
    #[command(flatten)]
    pub refine: RefineSettings,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Output directory for checkpoints and the log.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub iterations: usize,
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
    #[arg(long, default_value_t = 3e-4)]
    pub lr: f64,
    /// Training scenes.
    #[arg(long, default_value_t = 200)]
    pub scenes: usize,
    #[arg(long, default_value_t = 8)]
    pub validation_scenes: usize,
    /// Validate and checkpoint every n iterations; 0 only at the end.
    #[arg(long, default_value_t = 500)]
    pub eval_every: usize,
    /// Unrolled refinement steps.
    #[arg(long, default_value_t = gifsplat::refine::DEFAULT_STEPS)]
    pub steps: usize,
    /// Weight of the feature term in the loss.
    #[arg(long, default_value_t = 0.1)]
    pub feature_weight: f64,
    /// Start from this head instead of a fresh initialization.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[command(flatten)]
    pub scene: SceneArgs,
    #[command(flatten)]
    pub refine: RefineSettings,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Starting scene; defaults to `init.gspl` in the dataset.
    #[arg(long)]
    pub scene: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Loss curve as CSV.
    #[arg(long)]
    pub curve: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.3)]
    pub lr: f64,
    /// fixed | line-search
    #[arg(long, default_value = "fixed")]
    pub descent: String,
    /// single | double
    #[arg(long, default_value = "single")]
    pub precision: String,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Dataset directory; its images are the references unless `--truth`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub scene: PathBuf,
    /// Reference scene rendered at the dataset cameras.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Metric report as JSON.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Directory for side-by-side render and reference images.
    #[arg(long)]
    pub compare_dir: Option<PathBuf>,
    /// single | double
    #[arg(long, default_value = "single")]
    pub precision: String,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Scene to refine; defaults to `init.gspl` in the dataset.
    #[arg(long)]
    pub scene: Option<PathBuf>,
    #[arg(long)]
    pub head: PathBuf,
    /// Output directory for the CSV and plot.
    #[arg(long)]
    pub out: PathBuf,
    /// Sweep T = 1..=max-steps.
    #[arg(long, default_value_t = 6)]
    pub max_steps: usize,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    #[command(flatten)]
    pub refine: RefineSettings,
}
