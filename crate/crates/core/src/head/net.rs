use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;

use super::params::{HeadParams, Layout, Slot};
use super::window::WindowPartition;
use super::OUTPUT_DIM;
use crate::error::{Error, Result};

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

fn linear(x: &ArrayView2<f64>, w: ArrayView2<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    let mut y = x.dot(&w);
    y += &b;
    y
}

fn softmax_rows(s: &mut Array2<f64>) {
    for mut row in s.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row /= z;
    }
}

/// Intermediate values of one group of tokens, kept for the backward pass.
struct Cache {
    x: Array2<f64>,
    h0: Array2<f64>,
    attention: Option<Attention>,
    h1: Array2<f64>,
    u: Array2<f64>,
    a: Array2<f64>,
    y: Array2<f64>,
    t: Array2<f64>,
}

struct Attention {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    z: Array2<f64>,
}

fn forward_group(layout: &Layout, p: &[f64], x: Array2<f64>, attend: bool, tau: &[f64; OUTPUT_DIM]) -> (Array2<f64>, Cache) {
    let dims = &layout.dims;
    let h0 = linear(&x.view(), layout.mat(p, Slot::Embed), layout.vec(p, Slot::EmbedBias));
    let (h1, attention) = if attend {
        let q = linear(&h0.view(), layout.mat(p, Slot::Query), layout.vec(p, Slot::QueryBias));
        let k = linear(&h0.view(), layout.mat(p, Slot::Key), layout.vec(p, Slot::KeyBias));
        let v = linear(&h0.view(), layout.mat(p, Slot::Value), layout.vec(p, Slot::ValueBias));
        let dh = dims.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut z = Array2::zeros(h0.raw_dim());
        let mut probs = Vec::with_capacity(dims.heads);
        for hd in 0..dims.heads {
            let cols = s![.., hd * dh..(hd + 1) * dh];
            let mut sc = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            softmax_rows(&mut sc);
            z.slice_mut(cols).assign(&sc.dot(&v.slice(cols)));
            probs.push(sc);
        }
        let attn = linear(&z.view(), layout.mat(p, Slot::Out), layout.vec(p, Slot::OutBias));
        (&h0 + &attn, Some(Attention { q, k, v, probs, z }))
    } else {
        (h0.clone(), None)
    };
    let u = linear(&h1.view(), layout.mat(p, Slot::Fc1), layout.vec(p, Slot::Fc1Bias));
    let a = u.mapv(silu);
    let y = linear(&a.view(), layout.mat(p, Slot::Fc2), layout.vec(p, Slot::Fc2Bias));
    let step = layout.vec(p, Slot::StepScale);
    let mut t = y.clone();
    for mut row in t.rows_mut() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = (step[c] * *v).tanh();
        }
    }
    let mut out = t.clone();
    for mut row in out.rows_mut() {
        for (c, v) in row.iter_mut().enumerate() {
            *v *= tau[c];
        }
    }
    (
        out,
        Cache {
            x,
            h0,
            attention,
            h1,
            u,
            a,
            y,
            t,
        },
    )
}

fn add_into(grad: &mut [f64], layout: &Layout, slot: Slot, value: &Array2<f64>) {
    let mut g = layout.mat_mut(grad, slot);
    g += value;
}

fn add_bias(grad: &mut [f64], layout: &Layout, slot: Slot, rows: &Array2<f64>) {
    let mut g = layout.vec_mut(grad, slot);
    g += &rows.sum_axis(Axis(0));
}

/// Accumulates parameter gradients into `grad` and returns the token gradient.
fn backward_group(layout: &Layout, p: &[f64], c: &Cache, d_out: &Array2<f64>, tau: &[f64; OUTPUT_DIM], grad: &mut [f64]) -> Array2<f64> {
    let dims = &layout.dims;
    let step = layout.vec(p, Slot::StepScale);
    let mut dy = Array2::zeros(c.y.raw_dim());
    let mut d_step = Array1::<f64>::zeros(OUTPUT_DIM);
    for ((i, k), dv) in dy.indexed_iter_mut() {
        let dt = d_out[[i, k]] * tau[k] * (1.0 - c.t[[i, k]] * c.t[[i, k]]);
        d_step[k] += dt * c.y[[i, k]];
        *dv = dt * step[k];
    }
    {
        let mut g = layout.vec_mut(grad, Slot::StepScale);
        g += &d_step;
    }
    add_into(grad, layout, Slot::Fc2, &c.a.t().dot(&dy));
    add_bias(grad, layout, Slot::Fc2Bias, &dy);
    let mut du = dy.dot(&layout.mat(p, Slot::Fc2).t());
    du.zip_mut_with(&c.u, |d, &u| *d *= silu_grad(u));
    add_into(grad, layout, Slot::Fc1, &c.h1.t().dot(&du));
    add_bias(grad, layout, Slot::Fc1Bias, &du);
    let dh1 = du.dot(&layout.mat(p, Slot::Fc1).t());

    let mut dh0 = dh1.clone();
    if let Some(at) = &c.attention {
        add_into(grad, layout, Slot::Out, &at.z.t().dot(&dh1));
        add_bias(grad, layout, Slot::OutBias, &dh1);
        let dz = dh1.dot(&layout.mat(p, Slot::Out).t());
        let dh = dims.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = Array2::zeros(at.q.raw_dim());
        let mut dk = Array2::zeros(at.k.raw_dim());
        let mut dv = Array2::zeros(at.v.raw_dim());
        for (hd, a) in at.probs.iter().enumerate() {
            let cols = s![.., hd * dh..(hd + 1) * dh];
            let dz_h = dz.slice(cols);
            let da = dz_h.dot(&at.v.slice(cols).t());
            dv.slice_mut(cols).assign(&a.t().dot(&dz_h));
            let mut ds = a * &da;
            let row_dot = ds.sum_axis(Axis(1));
            for ((i, j), v) in ds.indexed_iter_mut() {
                *v -= a[[i, j]] * row_dot[i];
                *v *= scale;
            }
            dq.slice_mut(cols).assign(&ds.dot(&at.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&at.q.slice(cols)));
        }
        for (slot, bias, d) in [
            (Slot::Query, Slot::QueryBias, &dq),
            (Slot::Key, Slot::KeyBias, &dk),
            (Slot::Value, Slot::ValueBias, &dv),
        ] {
            add_into(grad, layout, slot, &c.h0.t().dot(d));
            add_bias(grad, layout, bias, d);
            dh0 += &d.dot(&layout.mat(p, slot).t());
        }
    }
    add_into(grad, layout, Slot::Embed, &c.x.t().dot(&dh0));
    add_bias(grad, layout, Slot::EmbedBias, &dh0);
    dh0.dot(&layout.mat(p, Slot::Embed).t())
}

/// Token groups processed independently: each window's attention members,
/// then each overflow member on its own.
fn groups(windows: &WindowPartition) -> Vec<(&[usize], bool)> {
    let mut out = Vec::new();
    for w in &windows.windows {
        if !w.members.is_empty() {
            out.push((w.members.as_slice(), true));
        }
        if !w.overflow.is_empty() {
            out.push((w.overflow.as_slice(), false));
        }
    }
    out
}

fn check_inputs(tokens: &Array2<f64>, windows: &WindowPartition, params: &HeadParams) -> Result<()> {
    let dims = params.dims();
    if tokens.ncols() != dims.token_dim() {
        return Err(Error::Shape(format!(
            "tokens have {} columns, head expects {}",
            tokens.ncols(),
            dims.token_dim()
        )));
    }
    if tokens.nrows() != windows.window_of.len() {
        return Err(Error::Shape(format!(
            "{} tokens for {} windowed gaussians",
            tokens.nrows(),
            windows.window_of.len()
        )));
    }
    if !params.is_finite() {
        return Err(Error::NonFinite("head parameters".into()));
    }
    Ok(())
}

/// Residuals `ΔG = τ ⊙ tanh(σ ⊙ U(tokens))` per Gaussian, with attention
/// confined to windows.
pub fn head_forward(tokens: &Array2<f64>, windows: &WindowPartition, params: &HeadParams) -> Result<Array2<f64>> {
    check_inputs(tokens, windows, params)?;
    let tau = params.bounds.resolve(windows.extent);
    let layout = &params.layout;
    let results: Vec<Array2<f64>> = groups(windows)
        .par_iter()
        .map(|(idx, attend)| forward_group(layout, &params.data, tokens.select(Axis(0), idx), *attend, &tau).0)
        .collect();
    let mut out = Array2::zeros((tokens.nrows(), OUTPUT_DIM));
    for ((idx, _), r) in groups(windows).iter().zip(results) {
        for (row, &i) in r.rows().into_iter().zip(idx.iter()) {
            out.row_mut(i).assign(&row);
        }
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("head output".into()));
    }
    Ok(out)
}

/// Gradients of a scalar loss with respect to the head parameters (flat,
/// in [`Layout`] order) and the tokens, given its gradient on `ΔG`.
pub fn head_backward(
    tokens: &Array2<f64>,
    windows: &WindowPartition,
    params: &HeadParams,
    d_delta: &Array2<f64>,
) -> Result<(Vec<f64>, Array2<f64>)> {
    check_inputs(tokens, windows, params)?;
    if d_delta.dim() != (tokens.nrows(), OUTPUT_DIM) {
        return Err(Error::Shape(format!("residual gradient {:?}", d_delta.dim())));
    }
    let tau = params.bounds.resolve(windows.extent);
    let layout = &params.layout;
    let gs = groups(windows);
    let partials: Vec<(Vec<f64>, Array2<f64>)> = gs
        .par_iter()
        .map(|(idx, attend)| {
            let (_, cache) = forward_group(layout, &params.data, tokens.select(Axis(0), idx), *attend, &tau);
            let mut grad = vec![0.0; layout.len()];
            let dx = backward_group(layout, &params.data, &cache, &d_delta.select(Axis(0), idx), &tau, &mut grad);
            (grad, dx)
        })
        .collect();
    let mut grad = vec![0.0; layout.len()];
    let mut d_tokens = Array2::zeros(tokens.raw_dim());
    for ((idx, _), (g, dx)) in gs.iter().zip(partials) {
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
        for (row, &i) in dx.rows().into_iter().zip(idx.iter()) {
            d_tokens.row_mut(i).assign(&row);
        }
    }
    Ok((grad, d_tokens))
}
