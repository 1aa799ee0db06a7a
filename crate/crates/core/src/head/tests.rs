use approx::assert_relative_eq;
use nalgebra::Vector3;
use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gaussian::{sigmoid, Gaussian, GaussianScene};
use crate::raster::SceneGradients;

fn dims() -> HeadDims {
    HeadDims {
        d_model: 8,
        heads: 2,
        mlp_hidden: 12,
        feature_dim: 2,
        cue_dim: 3,
    }
}

fn random_scene(n: usize, seed: u64, spread: f64) -> GaussianScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gs = (0..n)
        .map(|_| {
            let mut g = Gaussian::isotropic(
                Vector3::from_fn(|_, _| rng.random_range(-spread..spread)),
                rng.random_range(0.05..0.2),
                Vector3::from_fn(|_, _| rng.random_range(0.2..0.8)),
                rng.random_range(0.3..0.8),
            );
            g.log_scale[1] += 0.1;
            g
        })
        .collect();
    let feats = Array2::from_shape_fn((n, 2), |_| rng.random_range(-1.0..1.0));
    GaussianScene::new(gs, feats, 2.0).unwrap()
}

fn random_cues(n: usize, d: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((n, d), |_| rng.random_range(-0.5..0.5))
}

fn params(seed: u64) -> HeadParams {
    let mut p = HeadParams::init(dims(), seed).unwrap();
    // Larger output weights than the default so residuals are not tiny.
    let r = p.layout.range(Slot::Fc2);
    for v in &mut p.data[r] {
        *v *= 10.0;
    }
    p
}

#[test]
fn zero_params_predict_zero() {
    let s = random_scene(6, 1, 1.0);
    let w = build_windows(&s, 0.7, 0).unwrap();
    let t = build_tokens(&s, &random_cues(6, 3, 2), Some(&random_cues(6, 3, 3)), &w).unwrap();
    let out = head_forward(&t, &w, &HeadParams::zeros(dims()).unwrap()).unwrap();
    assert!(out.iter().all(|&v| v == 0.0));
}

#[test]
fn one_token_matches_closed_form() {
    let p = params(4);
    let lay = &p.layout;
    let x: Vec<f64> = (0..dims().token_dim()).map(|k| ((k * 7 % 5) as f64 - 2.0) * 0.3).collect();
    let matvec = |v: &[f64], slot: Slot, bias: Slot| -> Vec<f64> {
        let w = lay.mat(&p.data, slot);
        let b = lay.vec(&p.data, bias);
        (0..w.ncols())
            .map(|j| b[j] + (0..w.nrows()).map(|i| v[i] * w[[i, j]]).sum::<f64>())
            .collect()
    };
    // One token attends only to itself: the softmax weight is 1.
    let h0 = matvec(&x, Slot::Embed, Slot::EmbedBias);
    let v = matvec(&h0, Slot::Value, Slot::ValueBias);
    let o = matvec(&v, Slot::Out, Slot::OutBias);
    let h1: Vec<f64> = h0.iter().zip(&o).map(|(a, b)| a + b).collect();
    let u = matvec(&h1, Slot::Fc1, Slot::Fc1Bias);
    let a: Vec<f64> = u.iter().map(|&z| z / (1.0 + (-z).exp())).collect();
    let y = matvec(&a, Slot::Fc2, Slot::Fc2Bias);
    let step = lay.vec(&p.data, Slot::StepScale);
    let extent = 3.0;
    let tau = p.bounds.resolve(extent);
    let expect: Vec<f64> = (0..10).map(|k| tau[k] * (step[k] * y[k]).tanh()).collect();

    let w = WindowPartition {
        cell_size: 1.0,
        shifted: false,
        extent,
        windows: vec![Window {
            cell: [0, 0, 0],
            center: Vector3::zeros(),
            members: vec![0],
            overflow: vec![],
        }],
        window_of: vec![0],
    };
    let tokens = Array2::from_shape_vec((1, x.len()), x).unwrap();
    let got = head_forward(&tokens, &w, &p).unwrap();
    for k in 0..10 {
        assert_relative_eq!(got[[0, k]], expect[k], epsilon = 1e-12);
    }
}

#[test]
fn permutation_equivariant_within_windows() {
    let mut s = random_scene(7, 5, 0.4);
    for g in &mut s.gaussians {
        g.position += Vector3::repeat(5.0);
    }
    let w = build_windows(&s, 10.0, 0).unwrap();
    assert_eq!(w.len(), 1);
    let cues = random_cues(7, 3, 6);
    let p = params(7);
    let out = head_forward(&build_tokens(&s, &cues, None, &w).unwrap(), &w, &p).unwrap();

    let perm = [3, 0, 6, 1, 5, 2, 4];
    let ps = GaussianScene::new(
        perm.iter().map(|&i| s.gaussians[i].clone()).collect(),
        s.features.select(Axis(0), &perm),
        s.extent,
    )
    .unwrap();
    let pw = build_windows(&ps, 10.0, 0).unwrap();
    let pout = head_forward(&build_tokens(&ps, &cues.select(Axis(0), &perm), None, &pw).unwrap(), &pw, &p).unwrap();
    for (k, &i) in perm.iter().enumerate() {
        for c in 0..10 {
            assert_relative_eq!(pout[[k, c]], out[[i, c]], epsilon = 1e-12);
        }
    }
}

#[test]
fn windows_do_not_interact() {
    let s = random_scene(20, 8, 1.5);
    let w = build_windows(&s, 0.8, 0).unwrap();
    assert!(w.len() > 2);
    let p = params(9);
    let tokens = build_tokens(&s, &random_cues(20, 3, 10), Some(&random_cues(20, 3, 11)), &w).unwrap();
    let out = head_forward(&tokens, &w, &p).unwrap();
    let mut zeroed = tokens.clone();
    for &i in &w.windows[1].members {
        zeroed.row_mut(i).fill(0.0);
    }
    let out2 = head_forward(&zeroed, &w, &p).unwrap();
    for i in 0..20 {
        if w.window_of[i] != 1 {
            assert_eq!(out.row(i), out2.row(i));
        }
    }
}

#[test]
fn residuals_respect_bounds() {
    let s = random_scene(12, 12, 1.0);
    let w = build_windows(&s, 0.9, 1).unwrap();
    let mut p = params(13);
    let r = p.layout.range(Slot::Fc2);
    for v in &mut p.data[r] {
        *v *= 1e3;
    }
    let out = head_forward(&build_tokens(&s, &random_cues(12, 3, 14), None, &w).unwrap(), &w, &p).unwrap();
    let tau = p.bounds.resolve(s.extent);
    assert_relative_eq!(tau[0], 0.04);
    for row in out.rows() {
        for k in 0..10 {
            assert!(row[k].abs() <= tau[k]);
        }
    }
}

#[test]
fn token_layout() {
    let mut a = Gaussian::isotropic(Vector3::new(0.25, 0.75, 0.5), 1.0, Vector3::new(0.1, 0.2, 0.3), 0.5);
    a.log_scale = Vector3::new(-1.0, -2.0, -3.0);
    let mut b = a.clone();
    b.position = Vector3::new(1.9, 0.1, 0.6);
    b.opacity_logit = 2.0;
    let feats = Array2::from_shape_vec((2, 2), vec![5.0, 6.0, 7.0, 8.0]).unwrap();
    let s = GaussianScene::new(vec![a, b], feats, 4.0).unwrap();
    let w = build_windows(&s, 1.0, 0).unwrap();
    let o = Array2::from_shape_vec((2, 3), vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
    let pr = Array2::from_shape_vec((2, 3), vec![-0.1, -0.2, -0.3, -0.4, -0.5, -0.6]).unwrap();
    let t = build_tokens(&s, &o, Some(&pr), &w).unwrap();
    let row0 = [-0.25, 0.25, 0.0, -1.0, -2.0, -3.0, 0.1, 0.2, 0.3, 0.0, 5.0, 6.0, 0.1, 0.2, 0.3, -0.1, -0.2, -0.3];
    let row1 = [0.4, -0.4, 0.1, -1.0, -2.0, -3.0, 0.1, 0.2, 0.3, 2.0, 7.0, 8.0, 0.4, 0.5, 0.6, -0.4, -0.5, -0.6];
    for k in 0..18 {
        assert_relative_eq!(t[[0, k]], row0[k], epsilon = 1e-12);
        assert_relative_eq!(t[[1, k]], row1[k], epsilon = 1e-12);
    }
    let t_ifs = build_tokens(&s, &o, None, &w).unwrap();
    assert!(t_ifs.slice(ndarray::s![.., 15..]).iter().all(|&v| v == 0.0));
}

#[test]
fn gaussian_at_center_with_zero_state_has_zero_token() {
    let mut g = Gaussian::isotropic(Vector3::new(0.5, 0.5, 0.5), 1.0, Vector3::zeros(), 0.5);
    g.log_scale = Vector3::zeros();
    let s = GaussianScene::new(vec![g], Array2::zeros((1, 2)), 2.0).unwrap();
    let w = build_windows(&s, 1.0, 0).unwrap();
    let t = build_tokens(&s, &Array2::zeros((1, 3)), None, &w).unwrap();
    assert!(t.iter().all(|&v| v == 0.0));
}

#[test]
fn translating_by_whole_cells_keeps_state_tokens() {
    let s = random_scene(10, 15, 1.0);
    let mut moved = s.clone();
    for g in &mut moved.gaussians {
        g.position += Vector3::new(1.5, -3.0, 0.75);
    }
    let w = build_windows(&s, 0.75, 0).unwrap();
    let wm = build_windows(&moved, 0.75, 0).unwrap();
    let cues = random_cues(10, 3, 16);
    let a = build_tokens(&s, &cues, None, &w).unwrap();
    let b = build_tokens(&moved, &cues, None, &wm).unwrap();
    for (x, y) in a.iter().zip(b.iter()) {
        assert_relative_eq!(x, y, epsilon = 1e-9);
    }
}

#[test]
fn window_assignment_follows_floor_arithmetic() {
    let at = |p: [f64; 3]| Gaussian::isotropic(Vector3::from(p), 0.1, Vector3::zeros(), 0.5);
    // One point on the face x = 1.0 of the unshifted lattice.
    let s = GaussianScene::without_features(
        vec![at([1.0, 0.2, 0.2]), at([0.9, 0.2, 0.2]), at([1.6, 0.2, 0.2]), at([-0.2, 0.2, 0.2])],
        3.0,
    )
    .unwrap();
    let cell = 1.0;
    let w0 = build_windows(&s, cell, 0).unwrap();
    let w1 = build_windows(&s, cell, 1).unwrap();
    for (i, g) in s.gaussians.iter().enumerate() {
        let oracle0 = [0, 1, 2].map(|a| (g.position[a] / cell).floor() as i64);
        let oracle1 = [0, 1, 2].map(|a| ((g.position[a] + 0.5 * cell) / cell).floor() as i64);
        assert_eq!(w0.windows[w0.window_of[i]].cell, oracle0);
        assert_eq!(w1.windows[w1.window_of[i]].cell, oracle1);
    }
    // Unshifted: {-0.2}, {0.9}, {1.0, 1.6}. Shifted: {-0.2}, {0.9, 1.0}, {1.6}.
    assert_ne!(w0.window_of[0], w0.window_of[1]);
    assert_eq!(w0.window_of[0], w0.window_of[2]);
    assert_eq!(w1.window_of[0], w1.window_of[1]);
    assert_ne!(w1.window_of[0], w1.window_of[2]);
    assert_eq!(w0.windows[w0.window_of[3]].cell, [-1, 0, 0]);
    assert_relative_eq!(w1.windows[w1.window_of[0]].center[0], 1.0);
}

#[test]
fn clustered_and_single_cell_partitions() {
    let mut s = random_scene(9, 17, 0.2);
    for g in &mut s.gaussians {
        g.position += Vector3::repeat(2.5);
    }
    let w = build_windows(&s, 5.0, 0).unwrap();
    assert_eq!(w.len(), 1);
    assert_eq!(w.windows[0].members, (0..9).collect::<Vec<_>>());

    let mut two = random_scene(8, 18, 0.1);
    for g in two.gaussians.iter_mut().skip(4) {
        g.position += Vector3::new(3.0, 0.0, 0.0);
    }
    let w = build_windows(&two, 0.5, 0).unwrap();
    let a: Vec<usize> = (0..4).map(|i| w.window_of[i]).collect();
    let b: Vec<usize> = (4..8).map(|i| w.window_of[i]).collect();
    assert!(a.iter().all(|x| !b.contains(x)));
}

#[test]
fn overflow_keeps_most_opaque_members() {
    let n = MAX_WINDOW_MEMBERS + 20;
    let gs = (0..n)
        .map(|i| {
            let mut g = Gaussian::isotropic(Vector3::new(0.1, 0.1, 0.1), 0.1, Vector3::zeros(), 0.5);
            g.opacity_logit = ((i * 37) % n) as f64 * 0.01;
            g
        })
        .collect();
    let s = GaussianScene::without_features(gs, 1.0).unwrap();
    let w = build_windows(&s, 1.0, 0).unwrap();
    let win = &w.windows[0];
    assert_eq!(win.members.len(), MAX_WINDOW_MEMBERS);
    assert_eq!(win.overflow.len(), 20);
    let min_kept = win.members.iter().map(|&i| s.gaussians[i].opacity_logit).fold(f64::INFINITY, f64::min);
    let max_dropped = win.overflow.iter().map(|&i| s.gaussians[i].opacity_logit).fold(f64::NEG_INFINITY, f64::max);
    assert!(min_kept > max_dropped);
    assert!(win.members.windows(2).all(|p| p[0] < p[1]));
}

#[test]
fn update_with_zero_residual_is_exact() {
    let s = random_scene(5, 19, 1.0);
    let out = update_scene(&s, &Array2::zeros((5, 10))).unwrap();
    assert_eq!(out, s);
}

#[test]
fn update_opacity_and_color_clamp() {
    let mut g = Gaussian::isotropic(Vector3::zeros(), 0.1, Vector3::new(0.95, 0.5, 0.02), 0.5);
    g.opacity_logit = 0.0;
    let s = GaussianScene::without_features(vec![g], 1.0).unwrap();
    let mut d = Array2::zeros((1, 10));
    d[[0, 9]] = 1.0;
    d[[0, 6]] = 0.2;
    d[[0, 8]] = -0.2;
    d[[0, 3]] = 100.0;
    let out = update_scene(&s, &d).unwrap();
    let g = &out.gaussians[0];
    assert_relative_eq!(g.opacity(), 0.73106, epsilon = 1e-5);
    assert_relative_eq!(g.opacity(), sigmoid(1.0));
    assert_eq!(g.color[0], 1.0);
    assert_eq!(g.color[2], 0.0);
    assert_eq!(g.log_scale[0], 1.0f64.ln());
    d[[0, 4]] = f64::NAN;
    assert!(update_scene(&s, &d).is_err());
    assert!(update_scene(&s, &Array2::zeros((2, 10))).is_err());
}

#[test]
fn params_file_round_trip_and_count() {
    let p = HeadParams::init(HeadDims::new(12, 12), 3).unwrap();
    let expect = (10 + 12 + 24) * 64 + 64 + 4 * (64 * 64 + 64) + 64 * 128 + 128 + 128 * 10 + 10 + 10;
    assert_eq!(p.param_count(), expect);
    let bytes = p.to_tensor_file().to_bytes();
    let back = HeadParams::from_tensor_file(&crate::tensor_file::TensorFile::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(back, p);
    assert_eq!(back.to_tensor_file().to_bytes(), bytes);

    let mut file = p.to_tensor_file();
    file.meta.insert("d_model".into(), serde_json::Value::from(32));
    assert!(HeadParams::from_tensor_file(&file).is_err());
}

fn scalar_loss(out: &Array2<f64>, weights: &Array2<f64>) -> f64 {
    out.iter().zip(weights.iter()).map(|(a, b)| a * b).sum()
}

fn rel_ok(a: f64, n: f64) -> bool {
    (a - n).abs() <= 1e-7 + 1e-4 * a.abs().max(n.abs())
}

#[test]
fn backward_matches_finite_differences() {
    let s = random_scene(9, 20, 0.9);
    let w = build_windows(&s, 0.8, 0).unwrap();
    assert!(w.len() > 1);
    let tokens = build_tokens(&s, &random_cues(9, 3, 21), Some(&random_cues(9, 3, 22)), &w).unwrap();
    let mut p = params(23);
    let r = p.layout.range(Slot::StepScale);
    for (k, v) in p.data[r].iter_mut().enumerate() {
        *v = 0.5 + 0.1 * k as f64;
    }
    let weights = random_cues(9, 10, 24);
    let (grad, d_tok) = head_backward(&tokens, &w, &p, &weights).unwrap();

    let h = 1e-6;
    let mut bad = Vec::new();
    for k in 0..p.data.len() {
        let mut a = p.clone();
        a.data[k] += h;
        let mut b = p.clone();
        b.data[k] -= h;
        let fa = scalar_loss(&head_forward(&tokens, &w, &a).unwrap(), &weights);
        let fb = scalar_loss(&head_forward(&tokens, &w, &b).unwrap(), &weights);
        let num = (fa - fb) / (2.0 * h);
        if !rel_ok(grad[k], num) {
            bad.push((k, grad[k], num));
        }
    }
    assert!(bad.is_empty(), "parameter mismatches: {bad:?}");
    for i in 0..9 {
        for c in 0..tokens.ncols() {
            let mut ta = tokens.clone();
            ta[[i, c]] += h;
            let mut tb = tokens.clone();
            tb[[i, c]] -= h;
            let num = (scalar_loss(&head_forward(&ta, &w, &p).unwrap(), &weights)
                - scalar_loss(&head_forward(&tb, &w, &p).unwrap(), &weights))
                / (2.0 * h);
            assert!(rel_ok(d_tok[[i, c]], num), "token ({i},{c}): {} vs {num}", d_tok[[i, c]]);
        }
    }
}

#[test]
fn update_and_token_backward_match_finite_differences() {
    let s = random_scene(4, 25, 0.3);
    let w = build_windows(&s, 2.0, 0).unwrap();
    let delta = random_cues(4, 10, 26).mapv(|v| v * 0.1);
    let mut up = SceneGradients::zeros(4);
    let mut rng = ChaCha8Rng::seed_from_u64(27);
    for g in &mut up.gaussians {
        g.position = [0, 1, 2].map(|_| rng.random_range(-1.0..1.0));
        g.log_scale = [0, 1, 2].map(|_| rng.random_range(-1.0..1.0));
        g.color = [0, 1, 2].map(|_| rng.random_range(-1.0..1.0));
        g.opacity_logit = rng.random_range(-1.0..1.0);
    }
    let loss = |sc: &GaussianScene| -> f64 {
        sc.gaussians
            .iter()
            .zip(&up.gaussians)
            .map(|(g, u)| {
                (0..3)
                    .map(|a| g.position[a] * u.position[a] + g.log_scale[a] * u.log_scale[a] + g.color[a] * u.color[a])
                    .sum::<f64>()
                    + g.opacity_logit * u.opacity_logit
            })
            .sum()
    };
    let (d_prev, d_delta) = update_scene_backward(&s, &delta, &up);
    let h = 1e-6;
    for i in 0..4 {
        for c in 0..10 {
            let mut a = delta.clone();
            a[[i, c]] += h;
            let mut b = delta.clone();
            b[[i, c]] -= h;
            let num = (loss(&update_scene(&s, &a).unwrap()) - loss(&update_scene(&s, &b).unwrap())) / (2.0 * h);
            assert!(rel_ok(d_delta[[i, c]], num), "delta ({i},{c})");
        }
        let mut a = s.clone();
        a.gaussians[i].color[1] += h;
        let mut b = s.clone();
        b.gaussians[i].color[1] -= h;
        let num = (loss(&update_scene(&a, &delta).unwrap()) - loss(&update_scene(&b, &delta).unwrap())) / (2.0 * h);
        assert!(rel_ok(d_prev.gaussians[i].color[1], num));
    }

    // Token state path.
    let d_tok = random_cues(4, 18, 28);
    let mut grads = SceneGradients::zeros(4);
    tokens_backward(&w, &d_tok, &mut grads);
    let cues = Array2::zeros((4, 3));
    let tl = |sc: &GaussianScene| scalar_loss(&build_tokens(sc, &cues, None, &w).unwrap(), &d_tok);
    for i in 0..4 {
        let mut a = s.clone();
        a.gaussians[i].position[2] += h;
        let mut b = s.clone();
        b.gaussians[i].position[2] -= h;
        assert!(rel_ok(grads.gaussians[i].position[2], (tl(&a) - tl(&b)) / (2.0 * h)));
    }
}
