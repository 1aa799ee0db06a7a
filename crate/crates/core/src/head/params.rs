use std::path::Path;

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{OUTPUT_DIM, STATE_DIM};
use crate::error::{Error, Result};
use crate::tensor_file::{NamedTensor, TensorFile};

pub const HEAD_FORMAT_VERSION: u32 = 1;
/// Smallest allowed residual step scale.
pub const MIN_STEP_SCALE: f64 = 1e-3;

/// Per-channel bounds on one residual step. The position bound is relative
/// to the scene extent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualBounds {
    pub position: f64,
    pub log_scale: f64,
    pub color: f64,
    pub opacity_logit: f64,
}

impl Default for ResidualBounds {
    fn default() -> Self {
        Self {
            position: 0.02,
            log_scale: 0.2,
            color: 0.2,
            opacity_logit: 1.0,
        }
    }
}

impl ResidualBounds {
    /// The ten per-channel bounds `τ` for a scene of the given extent.
    pub fn resolve(&self, extent: f64) -> [f64; OUTPUT_DIM] {
        let mut t = [0.0; OUTPUT_DIM];
        t[0..3].fill(self.position * extent);
        t[3..6].fill(self.log_scale);
        t[6..9].fill(self.color);
        t[9] = self.opacity_logit;
        t
    }

    pub fn validate(&self) -> Result<()> {
        let v = [self.position, self.log_scale, self.color, self.opacity_logit];
        if v.iter().all(|x| x.is_finite() && *x >= 0.0) {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("residual bounds must be finite and >= 0: {v:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadDims {
    pub d_model: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    /// Per-Gaussian appearance feature width `D_f`.
    pub feature_dim: usize,
    /// Cue width `D`.
    pub cue_dim: usize,
}

impl HeadDims {
    pub fn new(feature_dim: usize, cue_dim: usize) -> Self {
        Self {
            d_model: 64,
            heads: 4,
            mlp_hidden: 128,
            feature_dim,
            cue_dim,
        }
    }

    pub fn token_dim(&self) -> usize {
        STATE_DIM + self.feature_dim + 2 * self.cue_dim
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.mlp_hidden == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::InvalidArgument(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }
}

/// Named parameter tensors, in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Embed,
    EmbedBias,
    Query,
    QueryBias,
    Key,
    KeyBias,
    Value,
    ValueBias,
    Out,
    OutBias,
    Fc1,
    Fc1Bias,
    Fc2,
    Fc2Bias,
    StepScale,
}

impl Slot {
    pub const ALL: [Slot; 15] = [
        Slot::Embed,
        Slot::EmbedBias,
        Slot::Query,
        Slot::QueryBias,
        Slot::Key,
        Slot::KeyBias,
        Slot::Value,
        Slot::ValueBias,
        Slot::Out,
        Slot::OutBias,
        Slot::Fc1,
        Slot::Fc1Bias,
        Slot::Fc2,
        Slot::Fc2Bias,
        Slot::StepScale,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Slot::Embed => "embed.weight",
            Slot::EmbedBias => "embed.bias",
            Slot::Query => "attn.query.weight",
            Slot::QueryBias => "attn.query.bias",
            Slot::Key => "attn.key.weight",
            Slot::KeyBias => "attn.key.bias",
            Slot::Value => "attn.value.weight",
            Slot::ValueBias => "attn.value.bias",
            Slot::Out => "attn.out.weight",
            Slot::OutBias => "attn.out.bias",
            Slot::Fc1 => "mlp.fc1.weight",
            Slot::Fc1Bias => "mlp.fc1.bias",
            Slot::Fc2 => "mlp.fc2.weight",
            Slot::Fc2Bias => "mlp.fc2.bias",
            Slot::StepScale => "step_scale",
        }
    }

    /// `(rows, cols)`; vectors have one row.
    pub fn shape(self, d: &HeadDims) -> (usize, usize) {
        let m = d.d_model;
        match self {
            Slot::Embed => (d.token_dim(), m),
            Slot::Query | Slot::Key | Slot::Value | Slot::Out => (m, m),
            Slot::Fc1 => (m, d.mlp_hidden),
            Slot::Fc1Bias => (1, d.mlp_hidden),
            Slot::Fc2 => (d.mlp_hidden, OUTPUT_DIM),
            Slot::Fc2Bias | Slot::StepScale => (1, OUTPUT_DIM),
            _ => (1, m),
        }
    }

    fn is_vector(self) -> bool {
        !matches!(
            self,
            Slot::Embed | Slot::Query | Slot::Key | Slot::Value | Slot::Out | Slot::Fc1 | Slot::Fc2
        )
    }
}

/// Offsets of every slot inside a flat parameter buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub dims: HeadDims,
    offsets: [usize; 16],
}

impl Layout {
    pub fn new(dims: HeadDims) -> Self {
        let mut offsets = [0; 16];
        for (k, s) in Slot::ALL.iter().enumerate() {
            let (r, c) = s.shape(&dims);
            offsets[k + 1] = offsets[k] + r * c;
        }
        Self { dims, offsets }
    }

    pub fn len(&self) -> usize {
        self.offsets[15]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self, slot: Slot) -> std::ops::Range<usize> {
        let k = Slot::ALL.iter().position(|s| *s == slot).unwrap_or(0);
        self.offsets[k]..self.offsets[k + 1]
    }

    pub fn mat<'a>(&self, data: &'a [f64], slot: Slot) -> ArrayView2<'a, f64> {
        let (r, c) = slot.shape(&self.dims);
        ArrayView2::from_shape((r, c), &data[self.range(slot)]).expect("layout shape")
    }

    pub fn vec<'a>(&self, data: &'a [f64], slot: Slot) -> ArrayView1<'a, f64> {
        ArrayView1::from(&data[self.range(slot)])
    }

    pub fn mat_mut<'a>(&self, data: &'a mut [f64], slot: Slot) -> ArrayViewMut2<'a, f64> {
        let (r, c) = slot.shape(&self.dims);
        ArrayViewMut2::from_shape((r, c), &mut data[self.range(slot)]).expect("layout shape")
    }

    pub fn vec_mut<'a>(&self, data: &'a mut [f64], slot: Slot) -> ArrayViewMut1<'a, f64> {
        ArrayViewMut1::from(&mut data[self.range(slot)])
    }
}

/// Weights of the residual update head, shared across all refinement steps.
///
/// Values are kept representable in `f32`, so saving and reloading is exact.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub layout: Layout,
    pub bounds: ResidualBounds,
    pub data: Vec<f64>,
}

fn round_f32(v: &mut [f64]) {
    for x in v {
        *x = *x as f32 as f64;
    }
}

impl HeadParams {
    /// All-zero weights with unit step scales: predicts zero residuals.
    pub fn zeros(dims: HeadDims) -> Result<Self> {
        dims.validate()?;
        let layout = Layout::new(dims);
        let mut data = vec![0.0; layout.len()];
        data[layout.range(Slot::StepScale)].fill(1.0);
        Ok(Self {
            layout,
            bounds: ResidualBounds::default(),
            data,
        })
    }

    /// Seeded scaled-normal initialization. The output layer starts small so
    /// an untrained head makes gentle updates.
    pub fn init(dims: HeadDims, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for slot in Slot::ALL {
            if slot.is_vector() {
                continue;
            }
            let (rows, _) = slot.shape(&dims);
            let mut std = 1.0 / (rows as f64).sqrt();
            if slot == Slot::Fc2 {
                std *= 0.1;
            }
            let normal = Normal::new(0.0, std).expect("finite std");
            let range = p.layout.range(slot);
            for x in &mut p.data[range] {
                *x = normal.sample(&mut rng);
            }
        }
        round_f32(&mut p.data);
        Ok(p)
    }

    pub fn dims(&self) -> &HeadDims {
        &self.layout.dims
    }

    pub fn param_count(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rounds to `f32` and keeps step scales at or above [`MIN_STEP_SCALE`].
    pub fn sanitize(&mut self) {
        let r = self.layout.range(Slot::StepScale);
        for s in &mut self.data[r] {
            *s = s.max(MIN_STEP_SCALE);
        }
        round_f32(&mut self.data);
    }

    pub fn validate(&self) -> Result<()> {
        self.layout.dims.validate()?;
        self.bounds.validate()?;
        if self.data.len() != self.layout.len() {
            return Err(Error::Shape(format!(
                "head has {} values, layout needs {}",
                self.data.len(),
                self.layout.len()
            )));
        }
        if !self.is_finite() {
            return Err(Error::NonFinite("head parameters".into()));
        }
        if self.layout.vec(&self.data, Slot::StepScale).iter().any(|&s| s <= 0.0) {
            return Err(Error::InvalidArgument("step scales must be positive".into()));
        }
        Ok(())
    }

    pub fn to_tensor_file(&self) -> TensorFile {
        let d = &self.layout.dims;
        let mut meta = serde_json::Map::new();
        meta.insert("kind".into(), Value::from("gifsplat-head"));
        meta.insert("version".into(), Value::from(HEAD_FORMAT_VERSION));
        meta.insert("d_model".into(), Value::from(d.d_model));
        meta.insert("heads".into(), Value::from(d.heads));
        meta.insert("mlp_hidden".into(), Value::from(d.mlp_hidden));
        meta.insert("feature_dim".into(), Value::from(d.feature_dim));
        meta.insert("cue_dim".into(), Value::from(d.cue_dim));
        meta.insert("state_dim".into(), Value::from(STATE_DIM));
        meta.insert("bounds".into(), serde_json::to_value(self.bounds).expect("plain struct"));
        let tensors = Slot::ALL
            .iter()
            .map(|&s| {
                let (r, c) = s.shape(d);
                let shape = if s.is_vector() { vec![c] } else { vec![r, c] };
                let data = self.data[self.layout.range(s)].iter().map(|&v| v as f32).collect();
                NamedTensor::new(s.name(), shape, data).expect("layout shape")
            })
            .collect();
        TensorFile { meta, tensors }
    }

    pub fn from_tensor_file(file: &TensorFile) -> Result<Self> {
        let m = &file.meta;
        let get = |k: &str| -> Result<usize> {
            m.get(k)
                .and_then(Value::as_u64)
                .map(|v| v as usize)
                .ok_or_else(|| Error::Format(format!("head file missing integer {k:?}")))
        };
        if m.get("kind").and_then(Value::as_str) != Some("gifsplat-head") {
            return Err(Error::Format("not a head checkpoint".into()));
        }
        let version = get("version")?;
        if version != HEAD_FORMAT_VERSION as usize {
            return Err(Error::Format(format!("unsupported head version {version}")));
        }
        if get("state_dim")? != STATE_DIM {
            return Err(Error::Format("head state width mismatch".into()));
        }
        let dims = HeadDims {
            d_model: get("d_model")?,
            heads: get("heads")?,
            mlp_hidden: get("mlp_hidden")?,
            feature_dim: get("feature_dim")?,
            cue_dim: get("cue_dim")?,
        };
        dims.validate().map_err(|e| Error::Format(e.to_string()))?;
        let bounds: ResidualBounds = m
            .get("bounds")
            .cloned()
            .ok_or_else(|| Error::Format("head file missing bounds".into()))
            .and_then(|v| serde_json::from_value(v).map_err(|e| Error::Format(format!("head bounds: {e}"))))?;
        let layout = Layout::new(dims);
        let mut data = vec![0.0; layout.len()];
        for s in Slot::ALL {
            let (r, c) = s.shape(&dims);
            let shape = if s.is_vector() { vec![c] } else { vec![r, c] };
            let t = file.expect(s.name(), &shape)?;
            for (dst, &src) in data[layout.range(s)].iter_mut().zip(&t.data) {
                *dst = src as f64;
            }
        }
        let p = Self { layout, bounds, data };
        p.validate().map_err(|e| Error::Format(e.to_string()))?;
        Ok(p)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.to_tensor_file().write(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_tensor_file(&TensorFile::read(path)?)
    }
}
