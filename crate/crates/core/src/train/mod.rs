//! Toy-scale training of the update head through the unrolled refinement
//! loop, the per-scene gradient-descent baseline, and synthetic scenes.

mod adam;
mod baseline;
mod loss;
mod synth;
mod unroll;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use adam::{Adam, AdamConfig};
pub use baseline::{gradient_descent_baseline, BaselineResult, DescentConfig, DescentMode, Preconditioner};
pub use loss::{default_step_weights, stage1_loss, stage2_loss, trajectory_mse, ViewLoss};
pub use synth::{generate_scene, ring_cameras, Palette, SyntheticScene, SyntheticSceneSpec};
pub use unroll::{
    batch_gradient, make_sample, unrolled_cues, unrolled_gradient, unrolled_loss, unrolled_loss_with_cues, StepCueSet,
    TrainSample, UnrollConfig, UnrollResult,
};

use crate::error::{Error, Result};
use crate::head::{HeadDims, HeadParams};
use crate::refine::{refine, RefineConfig};

/// Seed of the `k`-th scene of a dataset.
pub fn scene_seed(dataset_seed: u64, k: u64) -> u64 {
    dataset_seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(k.wrapping_mul(0xbf58_476d_1ce4_e5b9))
        .rotate_left(17)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Scenes per iteration.
    pub batch: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Training scenes, drawn with replacement.
    pub scenes: usize,
    pub validation_scenes: usize,
    /// Iterations between validation runs and checkpoint callbacks; 0 never.
    pub eval_every: usize,
    pub dataset: SyntheticSceneSpec,
    pub unroll: UnrollConfig,
    /// Starting parameters; `None` draws them from `seed`.
    pub init: Option<HeadParams>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.scenes == 0 {
            return Err(Error::InvalidArgument("batch and scene count must be positive".into()));
        }
        if !(self.adam.lr >= 0.0 && self.adam.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate must be >= 0, got {}", self.adam.lr)));
        }
        self.dataset.validate()?;
        self.unroll.validate()
    }

    pub fn head_dims(&self) -> HeadDims {
        let d = self.unroll.refine.features.channel_count();
        HeadDims::new(d, d)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub loss: f64,
    pub step_mse: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationLog {
    pub iteration: usize,
    /// Mean reference-view PSNR per refinement step.
    pub step_psnr: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub iterations: Vec<IterationLog>,
    pub validation: Vec<ValidationLog>,
    /// Set when training stopped early on a non-finite loss.
    pub aborted: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Last parameters with a finite loss.
    pub params: HeadParams,
    pub log: TrainLog,
}

/// Builds `count` samples whose seeds derive from `seed`.
pub fn make_dataset(spec: &SyntheticSceneSpec, seed: u64, count: usize, cfg: &RefineConfig) -> Result<Vec<TrainSample>> {
    (0..count as u64)
        .into_par_iter()
        .map(|k| make_sample(spec, scene_seed(seed, k), &cfg.features))
        .collect()
}

/// Mean reference-view PSNR after each of `cfg.steps` refinement steps,
/// averaged over samples (entry 0 is the starting scene).
pub fn step_psnr(samples: &[TrainSample], params: &HeadParams, cfg: &RefineConfig) -> Result<Vec<f64>> {
    let traces: Vec<Vec<f64>> = samples
        .par_iter()
        .map(|s| refine(&s.init, &s.views, params, cfg).map(|(_, t)| t.mean_psnr()))
        .collect::<Result<_>>()?;
    let mut mean = vec![0.0; cfg.steps + 1];
    for t in &traces {
        for (m, v) in mean.iter_mut().zip(t) {
            *m += v / traces.len() as f64;
        }
    }
    Ok(mean)
}

/// Trains with a callback after every `eval_every` iterations; the callback
/// sees the iteration count, current parameters and log.
pub fn train_head_with(
    cfg: &TrainConfig,
    mut on_checkpoint: impl FnMut(usize, &HeadParams, &TrainLog) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let dims = cfg.head_dims();
    let mut params = match &cfg.init {
        Some(p) => {
            if *p.dims() != dims {
                return Err(Error::InvalidArgument("initial head does not match the feature width".into()));
            }
            p.clone()
        }
        None => HeadParams::init(dims, cfg.seed)?,
    };
    let train = make_dataset(&cfg.dataset, cfg.seed, cfg.scenes, &cfg.unroll.refine)?;
    let val = make_dataset(&cfg.dataset, cfg.seed ^ 0x7a11_da7a, cfg.validation_scenes, &cfg.unroll.refine)?;
    let mut opt = Adam::new(cfg.adam, params.param_count());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x000b_a7c4);
    let mut log = TrainLog::default();
    let validate = |p: &HeadParams, it: usize, log: &mut TrainLog| -> Result<()> {
        if !val.is_empty() {
            let step_psnr = step_psnr(&val, p, &cfg.unroll.refine)?;
            log.validation.push(ValidationLog { iteration: it, step_psnr });
        }
        Ok(())
    };

    for it in 0..cfg.iterations {
        if cfg.eval_every > 0 && it % cfg.eval_every == 0 {
            validate(&params, it, &mut log)?;
            on_checkpoint(it, &params, &log)?;
        }
        let batch: Vec<&TrainSample> = (0..cfg.batch).map(|_| &train[rng.random_range(0..train.len())]).collect();
        let r = match batch_gradient(&batch, &params, &cfg.unroll) {
            Ok(r) if r.loss.is_finite() => r,
            Ok(r) => {
                log.aborted = Some(format!("iteration {it}: non-finite loss {}", r.loss));
                break;
            }
            Err(e @ Error::Numeric(_)) | Err(e @ Error::NonFinite(_)) => {
                log.aborted = Some(format!("iteration {it}: {e}"));
                break;
            }
            Err(e) => return Err(e),
        };
        let mut next = params.clone();
        opt.step(&mut next.data, &r.grad);
        next.sanitize();
        if !next.is_finite() {
            log.aborted = Some(format!("iteration {it}: non-finite parameters"));
            break;
        }
        params = next;
        log.iterations.push(IterationLog {
            iteration: it,
            loss: r.loss,
            step_mse: r.step_mse,
        });
    }
    if log.aborted.is_none() {
        if cfg.eval_every > 0 {
            validate(&params, cfg.iterations, &mut log)?;
        }
        on_checkpoint(cfg.iterations, &params, &log)?;
    }
    Ok(TrainOutcome { params, log })
}

pub fn train_head(cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_head_with(cfg, |_, _, _| Ok(()))
}

#[cfg(test)]
mod tests;
