use approx::assert_relative_eq;
use nalgebra::{Matrix3, Vector3};

use super::*;
use crate::gaussian::Gaussian;

fn axis_camera() -> Camera {
    Camera::new(40.0, 40.0, 16.0, 16.0, 32, 32, Matrix3::identity(), Vector3::zeros()).unwrap()
}

fn scene(gs: Vec<Gaussian>) -> GaussianScene {
    GaussianScene::without_features(gs, 2.0).unwrap()
}

fn center(out: &RenderOutput) -> [f64; 3] {
    let px = out.image.pixel(16, 16);
    [px[0], px[1], px[2]]
}

#[test]
fn empty_scene_renders_background() {
    let out = render(&scene(vec![]), &axis_camera(), &RenderOptions::double()).unwrap();
    assert!(out.image.data.iter().all(|&v| v == 0.0));
    assert!(out.final_transmittance.iter().all(|&t| t == 1.0));
    let opts = RenderOptions {
        background: [0.2, 0.4, 0.6],
        ..RenderOptions::double()
    };
    let out = render(&scene(vec![]), &axis_camera(), &opts).unwrap();
    assert_eq!(out.image.pixel(3, 5), &[0.2, 0.4, 0.6]);
}

#[test]
fn single_splat_center_is_opacity_times_color() {
    let g = Gaussian::isotropic(Vector3::new(0.0, 0.0, 2.0), 0.1, Vector3::new(1.0, 0.0, 0.0), 0.9);
    for opts in [RenderOptions::double(), RenderOptions::default()] {
        let out = render(&scene(vec![g]), &axis_camera(), &opts).unwrap();
        let c = center(&out);
        assert_relative_eq!(c[0], 0.9, epsilon = 1e-6);
        assert_eq!(c[1], 0.0);
        assert_relative_eq!(out.depth[16 * 32 + 16], 2.0, epsilon = 1e-6);
    }
}

#[test]
fn two_coaxial_splats_composite_front_to_back() {
    let (a, b) = (0.6, 0.7);
    let c1 = Vector3::new(0.2, 0.5, 0.9);
    let c2 = Vector3::new(0.8, 0.1, 0.3);
    let front = Gaussian::isotropic(Vector3::new(0.0, 0.0, 2.0), 0.1, c1, a);
    let back = Gaussian::isotropic(Vector3::new(0.0, 0.0, 3.0), 0.15, c2, b);
    // Insertion order must not matter: depth sorting decides.
    let out = render(&scene(vec![back, front]), &axis_camera(), &RenderOptions::double()).unwrap();
    let got = center(&out);
    for ch in 0..3 {
        let oracle = a * c1[ch] + (1.0 - a) * b * c2[ch];
        assert_relative_eq!(got[ch], oracle, epsilon = 1e-12);
    }
    assert_relative_eq!(out.final_transmittance[16 * 32 + 16], (1.0 - a) * (1.0 - b), epsilon = 1e-12);
}

#[test]
fn splats_behind_near_plane_are_culled() {
    let g = Gaussian::isotropic(Vector3::new(0.0, 0.0, 0.005), 0.1, Vector3::repeat(1.0), 0.9);
    let out = render(&scene(vec![g]), &axis_camera(), &RenderOptions::double()).unwrap();
    assert!(out.image.data.iter().all(|&v| v == 0.0));
}

#[test]
fn non_finite_gaussian_is_named() {
    let mut g = Gaussian::isotropic(Vector3::new(0.0, 0.0, 2.0), 0.1, Vector3::repeat(1.0), 0.9);
    let ok = g;
    g.opacity_logit = f64::NAN;
    let s = GaussianScene {
        gaussians: vec![ok, ok, g],
        features: ndarray::Array2::zeros((3, 0)),
        extent: 1.0,
    };
    let err = render(&s, &axis_camera(), &RenderOptions::default()).unwrap_err();
    assert!(err.to_string().contains("gaussian 2"), "{err}");
}

#[test]
fn contributions_truncated_to_k_top_largest() {
    let gs: Vec<Gaussian> = (0..6)
        .map(|k| {
            Gaussian::isotropic(
                Vector3::new(0.0, 0.0, 2.0 + 0.1 * k as f64),
                0.1,
                Vector3::repeat(0.5),
                0.2 + 0.05 * k as f64,
            )
        })
        .collect();
    let s = scene(gs);
    let full = render(&s, &axis_camera(), &RenderOptions { k_top: 100, ..RenderOptions::double() }).unwrap();
    let cut = render(&s, &axis_camera(), &RenderOptions { k_top: 3, ..RenderOptions::double() }).unwrap();
    let p = 16 * 32 + 16;
    let mut all: Vec<f64> = full.contributions.pixel(p).iter().map(|c| c.weight).collect();
    all.sort_by(|a, b| b.total_cmp(a));
    let kept: Vec<f64> = cut.contributions.pixel(p).iter().map(|c| c.weight).collect();
    assert_eq!(kept.len(), 3);
    assert_eq!(kept, all[..3].to_vec());
    // Truncation only affects the lists, not the image.
    assert_eq!(full.image, cut.image);
}

#[test]
fn weights_are_conserved_before_truncation() {
    let gs: Vec<Gaussian> = (0..40)
        .map(|k| {
            let f = k as f64;
            let mut g = Gaussian::isotropic(
                Vector3::new(0.2 * (f * 0.7).sin(), 0.2 * (f * 1.3).cos(), 2.0 + 0.02 * f),
                0.05 + 0.002 * f,
                Vector3::new(0.1, 0.5, 0.9),
                0.3 + 0.015 * f,
            );
            g.rotation = crate::quat::Quat::new(1.0, 0.1 * f.sin(), 0.2, -0.1 * f.cos()).normalized();
            g
        })
        .collect();
    let opts = RenderOptions {
        k_top: usize::MAX,
        ..RenderOptions::double()
    };
    let out = render(&scene(gs), &axis_camera(), &opts).unwrap();
    for p in 0..out.contributions.pixel_count() {
        let s: f64 = out.contributions.pixel(p).iter().map(|c| c.weight).sum();
        assert!((s + out.final_transmittance[p] - 1.0).abs() <= 1e-5);
        assert!(out.contributions.pixel(p).iter().all(|c| c.weight >= 0.0));
    }
}

#[test]
fn raising_front_opacity_never_raises_back_weights() {
    let front = Gaussian::isotropic(Vector3::new(0.05, 0.0, 2.0), 0.1, Vector3::repeat(1.0), 0.3);
    let back = Gaussian::isotropic(Vector3::new(-0.05, 0.02, 2.5), 0.15, Vector3::repeat(0.5), 0.8);
    let opts = RenderOptions {
        k_top: usize::MAX,
        ..RenderOptions::double()
    };
    let back_weights = |logit: f64| {
        let mut f = front;
        f.opacity_logit = logit;
        let out = render(&scene(vec![f, back]), &axis_camera(), &opts).unwrap();
        (0..out.contributions.pixel_count())
            .map(|p| {
                out.contributions
                    .pixel(p)
                    .iter()
                    .find(|c| c.gaussian == 1)
                    .map_or(0.0, |c| c.weight)
            })
            .collect::<Vec<_>>()
    };
    let mut prev = back_weights(-3.0);
    for logit in [-1.0, 0.0, 1.0, 2.5, 5.0] {
        let next = back_weights(logit);
        for (a, b) in prev.iter().zip(&next) {
            assert!(b <= a);
        }
        prev = next;
    }
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let g = Gaussian::isotropic(Vector3::new(0.0, 0.0, 2.0), 0.1, Vector3::new(1.0, 0.0, 0.0), 0.9);
    let grads = render_backward(&scene(vec![g, g]), &axis_camera(), &RenderOptions::double(), &Image::zeros(32, 32, 3))
        .unwrap();
    assert_eq!(grads.len(), 2);
    assert!(grads.gaussians.iter().all(|g| g.to_array().iter().all(|&v| v == 0.0)));
}

#[test]
fn color_derivative_equals_center_weight() {
    let g = Gaussian::isotropic(Vector3::new(0.0, 0.0, 2.0), 0.1, Vector3::new(1.0, 0.0, 0.0), 0.9);
    let s = scene(vec![g]);
    let opts = RenderOptions::double();
    let out = render(&s, &axis_camera(), &opts).unwrap();
    let w = out.contributions.pixel(16 * 32 + 16)[0].weight;
    let mut up = Image::zeros(32, 32, 3);
    up.set(16, 16, 0, 1.0);
    let grads = render_backward(&s, &axis_camera(), &opts, &up).unwrap();
    assert_relative_eq!(grads.gaussians[0].color[0], w, epsilon = 1e-15);
    assert_relative_eq!(w, 0.9, epsilon = 1e-12);
    assert_eq!(grads.gaussians[0].color[1], 0.0);
}

#[test]
fn backward_rejects_wrong_shape() {
    let s = scene(vec![]);
    assert!(render_backward(&s, &axis_camera(), &RenderOptions::double(), &Image::zeros(16, 32, 3)).is_err());
}

#[test]
fn pooling_hand_weights() {
    // 2x1 image, w_1 = (0.6, 0.1), w_2 = (0.2, 0.5), buffer (1, 2).
    let c = |gaussian, weight| Contribution { gaussian, weight };
    let out = RenderOutput {
        image: Image::zeros(2, 1, 3),
        final_transmittance: vec![0.2, 0.4],
        depth: vec![1.0; 2],
        contributions: Contributions::from_lists(vec![vec![c(0, 0.6), c(1, 0.2)], vec![c(1, 0.5), c(0, 0.1)]]),
        gaussian_count: 2,
    };
    let buf = Image::new(2, 1, 1, vec![1.0, 2.0]).unwrap();
    let pooled = pool_over_pixels(&out, &buf).unwrap();
    assert_relative_eq!(pooled.weighted[[0, 0]], 0.8, epsilon = 1e-15);
    assert_relative_eq!(pooled.weighted[[1, 0]], 1.2, epsilon = 1e-15);
    assert_relative_eq!(pooled.weight[0], 0.7, epsilon = 1e-15);
    assert_relative_eq!(pooled.weight[1], 0.7, epsilon = 1e-15);

    let zero = pool_over_pixels(&out, &Image::zeros(2, 1, 1)).unwrap();
    assert!(zero.weighted.iter().all(|&v| v == 0.0));
    assert_eq!(zero.weight, pooled.weight);

    let constant = pool_over_pixels(&out, &Image::filled(2, 1, 1, 0.37)).unwrap();
    for i in 0..2 {
        assert_relative_eq!(constant.weighted[[i, 0]], constant.weight[i] * 0.37, epsilon = 1e-15);
    }
    assert!(pool_over_pixels(&out, &Image::zeros(3, 1, 1)).is_err());
}
