use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use gifsplat::enhancer::EnhancerSpec;
use gifsplat::features::FeatureExtractorSpec;
use gifsplat::head::HeadParams;
use gifsplat::io::{
    read_cameras, read_depth, read_png, read_scene, write_atomic, write_cameras, write_depth, write_png, write_scene,
};
use gifsplat::metrics::{evaluate, MetricReport};
use gifsplat::raster::Precision;
use gifsplat::refine::{attach_features, initialize_from_depth, refine, DepthView, RefineConfig};
use gifsplat::train::{
    default_step_weights, generate_scene, gradient_descent_baseline, make_sample, train_head_with, AdamConfig, DescentConfig,
    SyntheticSceneSpec, TrainConfig, UnrollConfig, ViewLoss,
};
use gifsplat::{render, Camera, Error, GaussianScene, Image, RenderOptions, View};

use crate::args::*;
use crate::memory;
use crate::plot::write_line_plot;
use crate::CliError;

/// File layout of a dataset directory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
}

impl Dataset {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn truth(&self) -> PathBuf {
        self.root.join("scene.gspl")
    }

    /// Perturbed copy of the ground truth, the default refinement start.
    pub fn init(&self) -> PathBuf {
        self.root.join("init.gspl")
    }

    pub fn cameras(&self) -> PathBuf {
        self.root.join("cameras.json")
    }

    pub fn image(&self, k: usize) -> PathBuf {
        self.root.join("images").join(format!("view_{k:03}.png"))
    }

    pub fn depth(&self, k: usize) -> PathBuf {
        self.root.join("depth").join(format!("view_{k:03}.dpth"))
    }

    pub fn read_cameras(&self) -> Result<Vec<Camera>, Error> {
        read_cameras(&self.cameras())
    }

    pub fn read_views(&self) -> Result<Vec<View>, Error> {
        self.read_cameras()?
            .into_iter()
            .enumerate()
            .map(|(k, c)| View::new(read_png(&self.image(k))?, c))
            .collect()
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> Result<T, CliError> {
    s.parse().map_err(|e: Error| usage(e.to_string()))
}

pub fn scene_spec(a: &SceneArgs) -> Result<SyntheticSceneSpec, CliError> {
    let mut s = SyntheticSceneSpec::default();
    if let Some(n) = a.min_count {
        s.min_count = n;
    }
    if let Some(n) = a.max_count {
        s.max_count = n;
    }
    if let Some(n) = a.count {
        s.min_count = n;
        s.max_count = n;
    }
    if let Some(w) = a.width {
        s.width = w;
    }
    if let Some(h) = a.height {
        s.height = h;
    }
    if let Some(c) = a.cameras {
        s.camera_count = c;
    }
    if let Some(p) = &a.palette {
        s.palette = parse(p)?;
    }
    if let Some(e) = a.extent {
        s.extent = e;
    }
    if let Some(v) = a.arc {
        s.arc_deg = v;
    }
    if let Some(v) = a.elevation {
        s.elevation_deg = v;
    }
    if let Some(v) = a.fov {
        s.fov_deg = v;
    }
    if let Some(v) = a.ring_radius {
        s.ring_radius = v;
    }
    Ok(s)
}

fn render_options(precision: &str) -> Result<RenderOptions, CliError> {
    Ok(RenderOptions {
        precision: parse::<Precision>(precision)?,
        ..RenderOptions::default()
    })
}

pub fn refine_config(a: &RefineSettings, steps: usize) -> Result<RefineConfig, CliError> {
    let workdir = a.enhancer_workdir.clone().unwrap_or_else(std::env::temp_dir);
    Ok(RefineConfig {
        steps,
        mode: parse(&a.mode)?,
        enhancer: EnhancerSpec::parse(&a.enhancer, &workdir).map_err(|e| usage(e.to_string()))?,
        cell_size: a.cell_size,
        prior_on_refs: a.prior_on_refs,
        render: render_options(&a.precision)?,
        ..RefineConfig::default()
    })
}

/// Reads a scene and gives it features sampled from the views if it has none.
fn load_scene(path: &Path, views: &[View], features: &FeatureExtractorSpec) -> Result<GaussianScene, Error> {
    let scene = read_scene(path)?;
    if scene.feature_dim() == 0 {
        attach_features(&scene, views, features)
    } else {
        Ok(scene)
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    write_atomic(path, text.as_bytes())
}

pub fn synth(a: &SynthArgs, seed: u64) -> Result<(), CliError> {
    let spec = scene_spec(&a.scene)?;
    let synth = generate_scene(&spec, seed)?;
    let ds = Dataset::new(&a.out);
    for (k, (img, depth)) in synth.images.iter().zip(&synth.depths).enumerate() {
        write_png(&ds.image(k), img)?;
        write_depth(&ds.depth(k), img.width, img.height, depth)?;
    }
    write_cameras(&ds.cameras(), &synth.cameras)?;
    let sample = make_sample(&spec, seed, &FeatureExtractorSpec::Handcrafted)?;
    write_scene(&ds.init(), &sample.init)?;
    write_scene(&ds.truth(), &synth.truth)?;
    println!(
        "wrote {} Gaussians and {} views to {}",
        synth.truth.len(),
        synth.cameras.len(),
        a.out.display()
    );
    Ok(())
}

pub fn init(a: &InitArgs) -> Result<(), CliError> {
    let ds = Dataset::new(&a.data);
    let views = ds.read_views()?;
    let depth_views = views
        .into_iter()
        .enumerate()
        .map(|(k, v)| {
            let (w, h, depth) = read_depth(&ds.depth(k))?;
            if (w, h) != (v.image.width, v.image.height) {
                return Err(Error::Shape(format!("depth map {k} is {w}x{h}, image is {}x{}", v.image.width, v.image.height)));
            }
            Ok(DepthView {
                image: v.image,
                camera: v.camera,
                depth,
            })
        })
        .collect::<Result<Vec<_>, Error>>()?;
    let scene = initialize_from_depth(&depth_views, &FeatureExtractorSpec::Handcrafted, a.stride)?;
    write_scene(&a.out, &scene)?;
    println!("wrote {} Gaussians to {}", scene.len(), a.out.display());
    Ok(())
}

pub fn run_refine(a: &RefineArgs) -> Result<(), CliError> {
    let ds = Dataset::new(&a.data);
    let views = ds.read_views()?;
    let mut cfg = refine_config(&a.refine, a.steps)?;
    cfg.record_trajectory = a.dump_steps.is_some();
    let scene0 = load_scene(&a.scene.clone().unwrap_or_else(|| ds.init()), &views, &cfg.features)?;
    let params = HeadParams::read(&a.head)?;
    let (scene, trace) = refine(&scene0, &views, &params, &cfg)?;
    if let Some(dir) = &a.dump_steps {
        for (t, s) in trace.snapshots.iter().enumerate() {
            for (k, v) in views.iter().enumerate() {
                let img = render(s, &v.camera, &cfg.render)?.image;
                write_png(&dir.join(format!("step_{t}_view_{k:03}.png")), &img)?;
            }
        }
    }
    if let Some(p) = &a.trace {
        write_text(p, &trace.to_json())?;
    }
    if let Some(p) = &a.plot {
        let pts: Vec<(f64, f64)> = trace.mean_psnr().iter().enumerate().map(|(t, &v)| (t as f64, v)).collect();
        write_line_plot(p, &pts)?;
    }
    write_scene(&a.out, &scene)?;
    for s in &trace.steps {
        println!("step {}  mean PSNR {:.3} dB", s.step, s.mean_psnr);
    }
    Ok(())
}

pub fn train(a: &TrainArgs, seed: u64) -> Result<(), CliError> {
    let rcfg = refine_config(&a.refine, a.steps)?;
    let cfg = TrainConfig {
        iterations: a.iterations,
        batch: a.batch,
        adam: AdamConfig {
            lr: a.lr,
            ..AdamConfig::default()
        },
        seed,
        scenes: a.scenes,
        validation_scenes: a.validation_scenes,
        eval_every: a.eval_every,
        dataset: scene_spec(&a.scene)?,
        unroll: UnrollConfig {
            weights: default_step_weights(a.steps),
            loss: ViewLoss {
                feature_weight: a.feature_weight,
                features: rcfg.features.clone(),
            },
            refine: rcfg,
        },
        init: a.init.as_deref().map(HeadParams::read).transpose()?,
    };
    let out = a.out.clone();
    let outcome = train_head_with(&cfg, |it, params, log| {
        params.write(&out.join("checkpoints").join(format!("head_{it:06}.gsh")))?;
        if let Some(v) = log.validation.last() {
            let psnr: Vec<String> = v.step_psnr.iter().map(|p| format!("{p:.3}")).collect();
            println!("iteration {it}  validation PSNR per step [{}]", psnr.join(", "));
        }
        Ok(())
    })?;
    let log = serde_json::to_string_pretty(&outcome.log).expect("log serializes");
    write_text(&a.out.join("train_log.json"), &log)?;
    if let Some(msg) = &outcome.log.aborted {
        return Err(Error::Numeric(format!("training stopped: {msg}")).into());
    }
    outcome.params.write(&a.out.join("head.gsh"))?;
    Ok(())
}

pub fn baseline(a: &BaselineArgs) -> Result<(), CliError> {
    let ds = Dataset::new(&a.data);
    let views = ds.read_views()?;
    let scene0 = read_scene(&a.scene.clone().unwrap_or_else(|| ds.init()))?;
    let cfg = DescentConfig {
        steps: a.steps,
        lr: a.lr,
        mode: parse(&a.descent)?,
        ..DescentConfig::default()
    };
    let start = Instant::now();
    let result = gradient_descent_baseline(&scene0, &views, &cfg, &render_options(&a.precision)?)?;
    let seconds = start.elapsed().as_secs_f64();
    if let Some(p) = &a.curve {
        let mut csv = String::from("step,mse\n");
        for (k, l) in result.losses.iter().enumerate() {
            writeln!(csv, "{k},{l:e}").unwrap();
        }
        write_text(p, &csv)?;
    }
    write_scene(&a.out, &result.scene)?;
    let (first, last) = (result.losses[0], *result.losses.last().unwrap());
    println!(
        "{} steps in {seconds:.2} s, MSE {first:.6} -> {last:.6}{}",
        result.losses.len() - 1,
        if result.diverged { " (diverged)" } else { "" }
    );
    if result.diverged {
        return Err(Error::Numeric(format!("descent diverged: MSE {first:e} -> {last:e}")).into());
    }
    Ok(())
}

fn side_by_side(a: &Image, b: &Image) -> Result<Image, Error> {
    a.ensure_same_shape(b)?;
    Ok(Image::from_fn(2 * a.width, a.height, a.channels, |x, y, c| {
        if x < a.width {
            a.get(x, y, c)
        } else {
            b.get(x - a.width, y, c)
        }
    }))
}

pub fn eval(a: &EvalArgs) -> Result<(), CliError> {
    let ds = Dataset::new(&a.data);
    let opts = render_options(&a.precision)?;
    let views = match &a.truth {
        Some(t) => {
            let truth = read_scene(t)?;
            ds.read_cameras()?
                .into_iter()
                .map(|c| View::new(render(&truth, &c, &opts)?.image, c))
                .collect::<Result<Vec<_>, Error>>()?
        }
        None => ds.read_views()?,
    };
    let scene = read_scene(&a.scene)?;
    let features = FeatureExtractorSpec::Handcrafted;
    let report: MetricReport = evaluate(&scene, &views, &opts, &features)?;
    if let Some(dir) = &a.compare_dir {
        for (k, v) in views.iter().enumerate() {
            let r = render(&scene, &v.camera, &opts)?.image;
            write_png(&dir.join(format!("view_{k:03}.png")), &side_by_side(&r.clamp01(), &v.image)?)?;
        }
    }
    if let Some(p) = &a.report {
        write_text(p, &report.to_json())?;
    }
    print!("{}", report.to_table());
    Ok(())
}

/// One row of the bench sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub steps: usize,
    pub mean_seconds: f64,
    /// Largest heap growth over the repeats.
    pub peak_bytes: usize,
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut csv = String::from("steps,mean_seconds,peak_bytes\n");
    for r in rows {
        writeln!(csv, "{},{:.6},{}", r.steps, r.mean_seconds, r.peak_bytes).unwrap();
    }
    csv
}

pub fn bench(a: &BenchArgs) -> Result<(), CliError> {
    if a.max_steps == 0 || a.repeats == 0 {
        return Err(usage("bench needs --max-steps and --repeats of at least 1"));
    }
    let ds = Dataset::new(&a.data);
    let views = ds.read_views()?;
    let base = refine_config(&a.refine, 1)?;
    let scene0 = load_scene(&a.scene.clone().unwrap_or_else(|| ds.init()), &views, &base.features)?;
    let params = HeadParams::read(&a.head)?;
    refine(&scene0, &views, &params, &base)?;
    let mut rows = Vec::with_capacity(a.max_steps);
    for steps in 1..=a.max_steps {
        let cfg = RefineConfig { steps, ..base.clone() };
        let mut total = 0.0;
        let mut peak = 0;
        for _ in 0..a.repeats {
            let floor = memory::reset_peak();
            let start = Instant::now();
            let out = refine(&scene0, &views, &params, &cfg)?;
            total += start.elapsed().as_secs_f64();
            peak = peak.max(memory::peak_bytes() - floor);
            drop(out);
        }
        let row = BenchRow {
            steps,
            mean_seconds: total / a.repeats as f64,
            peak_bytes: peak,
        };
        println!("T = {steps}  {:.4} s  peak {} bytes", row.mean_seconds, row.peak_bytes);
        rows.push(row);
    }
    write_text(&a.out.join("bench.csv"), &bench_csv(&rows))?;
    let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.steps as f64, r.mean_seconds)).collect();
    write_line_plot(&a.out.join("bench.png"), &pts)?;
    Ok(())
}
