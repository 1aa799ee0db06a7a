use approx::assert_relative_eq;
use nalgebra::{Matrix3, Vector3};

use super::*;
use crate::camera::{Camera, View};
use crate::gaussian::{Gaussian, GaussianScene};
use crate::image::Image;
use crate::raster::{render, RenderOptions};
use crate::refine::RefineMode;

fn tiny_spec() -> SyntheticSceneSpec {
    SyntheticSceneSpec {
        min_count: 20,
        max_count: 30,
        width: 24,
        height: 24,
        ..SyntheticSceneSpec::default()
    }
}

fn self_views(scene: &GaussianScene, cams: &[Camera]) -> Vec<View> {
    cams.iter()
        .map(|c| View {
            image: render(scene, c, &RenderOptions::double()).unwrap().image,
            camera: c.clone(),
        })
        .collect()
}

#[test]
fn stage1_zero_when_renders_match() {
    let synth = generate_scene(&tiny_spec(), 1).unwrap();
    let views = self_views(&synth.truth, &synth.cameras);
    let (l, g) = stage1_loss(&synth.truth, &views, 1.0, &RenderOptions::double()).unwrap();
    assert_eq!(l, 0.0);
    assert!(g.gaussians.iter().all(|x| x.to_array().iter().all(|&v| v == 0.0)));
    let other = generate_scene(&tiny_spec(), 2).unwrap();
    let (l0, _) = stage1_loss(&other.truth, &views, 0.0, &RenderOptions::double()).unwrap();
    assert_eq!(l0, 0.0);
}

#[test]
fn stage1_single_pixel_difference() {
    let g = Gaussian::isotropic(Vector3::new(0.0, 0.0, 2.0), 0.3, Vector3::new(0.2, 0.3, 0.4), 0.6);
    let scene = GaussianScene::without_features(vec![g], 1.0).unwrap();
    let cam = Camera::new(60.0, 60.0, 31.5, 31.5, 64, 64, Matrix3::identity(), Vector3::zeros()).unwrap();
    let mut views = self_views(&scene, &[cam]);
    let v = views[0].image.get(10, 20, 1);
    views[0].image.set(10, 20, 1, v + 0.5);
    let (l, _) = stage1_loss(&scene, &views, 1.0, &RenderOptions::double()).unwrap();
    assert_relative_eq!(l, 0.25 / (64.0 * 64.0 * 3.0), epsilon = 1e-15);
}

#[test]
fn stage2_weighted_sum() {
    assert_relative_eq!(stage2_loss(&[0.4, 0.1], &[0.5, 1.0]).unwrap(), 0.3, epsilon = 1e-15);
    assert_eq!(stage2_loss(&[0.0, 0.0, 0.0], &default_step_weights(3)).unwrap(), 0.0);
    assert!(stage2_loss(&[0.4], &[0.5, 1.0]).is_err());
    assert_eq!(default_step_weights(3), vec![1.0 / 3.0, 2.0 / 3.0, 1.0]);
}

#[test]
fn stage2_single_step_matches_stage1() {
    let synth = generate_scene(&tiny_spec(), 3).unwrap();
    let other = generate_scene(&tiny_spec(), 4).unwrap();
    let views = synth.views();
    let opts = RenderOptions::double();
    let renders: Vec<Image> = views.iter().map(|v| render(&other.truth, &v.camera, &opts).unwrap().image).collect();
    let images: Vec<Image> = views.iter().map(|v| v.image.clone()).collect();
    let mse = trajectory_mse(&[renders.clone()], &images).unwrap();
    let (l1, _) = stage1_loss(&other.truth, &views, 0.7, &opts).unwrap();
    assert_relative_eq!(stage2_loss(&mse, &[0.7]).unwrap(), l1, epsilon = 1e-15);
    // A one-hot weight picks out that step.
    let traj = vec![renders.clone(), images.clone(), renders];
    let per_step = trajectory_mse(&traj, &images).unwrap();
    assert_eq!(per_step[1], 0.0);
    assert_eq!(stage2_loss(&per_step, &[0.0, 0.0, 1.0]).unwrap(), per_step[2]);
}

#[test]
fn generation_is_seeded_and_cameras_sit_on_the_ring() {
    let spec = SyntheticSceneSpec {
        camera_count: 4,
        arc_deg: 360.0,
        ..tiny_spec()
    };
    let a = generate_scene(&spec, 11).unwrap();
    assert_eq!(a, generate_scene(&spec, 11).unwrap());
    assert_ne!(a.truth, generate_scene(&spec, 12).unwrap().truth);
    let c = a.truth.centroid();
    for cam in &a.cameras {
        assert!(((cam.center() - c).norm() - spec.ring_radius * spec.extent).abs() <= 1e-6);
        // The centroid projects to the principal point.
        let pc = cam.world_to_camera(&c);
        assert!(pc.x.abs() < 1e-9 && pc.y.abs() < 1e-9 && pc.z > 0.0);
    }
    let plane = generate_scene(
        &SyntheticSceneSpec {
            palette: Palette::TexturedPlane,
            ..tiny_spec()
        },
        5,
    )
    .unwrap();
    assert!(plane.truth.gaussians.iter().all(|g| g.position.y == 0.0));
}

#[test]
fn depth_maps_are_consistent_with_covering_splats() {
    let synth = generate_scene(&tiny_spec(), 13).unwrap();
    let opts = RenderOptions::double();
    for (cam, depth) in synth.cameras.iter().zip(&synth.depths) {
        let again = render(&synth.truth, cam, &opts).unwrap();
        assert_eq!(&again.depth, depth);
        for (p, &d) in depth.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            assert!(d >= opts.near);
            // The expected depth lies within the span of the contributing
            // splats' depths, widened by one standard deviation.
            let zs: Vec<(f64, f64)> = again
                .contributions
                .pixel(p)
                .iter()
                .map(|c| {
                    let g = &synth.truth.gaussians[c.gaussian as usize];
                    let z = cam.world_to_camera(&g.position).z;
                    (z, g.scale().max())
                })
                .collect();
            let lo = zs.iter().map(|(z, s)| z - s).fold(f64::INFINITY, f64::min);
            let hi = zs.iter().map(|(z, s)| z + s).fold(f64::NEG_INFINITY, f64::max);
            assert!(d >= lo && d <= hi, "pixel {p}: depth {d} outside [{lo}, {hi}]");
        }
    }
}

#[test]
fn baseline_zero_rate_and_line_search() {
    let spec = tiny_spec();
    let s = make_sample(&spec, 21, &crate::features::FeatureExtractorSpec::Handcrafted).unwrap();
    let opts = RenderOptions::double();
    let still = gradient_descent_baseline(
        &s.init,
        &s.views,
        &DescentConfig {
            steps: 3,
            lr: 0.0,
            ..DescentConfig::default()
        },
        &opts,
    )
    .unwrap();
    for (a, b) in still.scene.gaussians.iter().zip(&s.init.gaussians) {
        assert_eq!(a.position, b.position);
        assert_eq!(a.color, b.color);
        assert_relative_eq!(a.rotation.w, b.rotation.w, epsilon = 1e-15);
    }
    assert!(still.losses.windows(2).all(|w| (w[0] - w[1]).abs() < 1e-15));

    let ls = gradient_descent_baseline(
        &s.init,
        &s.views,
        &DescentConfig {
            steps: 25,
            lr: 5.0,
            mode: DescentMode::LineSearch,
            ..DescentConfig::default()
        },
        &opts,
    )
    .unwrap();
    assert_eq!(ls.losses.len(), 26);
    assert!(ls.losses.windows(2).all(|w| w[1] <= w[0]));
    assert!(ls.losses[25] < ls.losses[0]);
    assert!(!ls.diverged);

    let wild = gradient_descent_baseline(
        &s.init,
        &s.views,
        &DescentConfig {
            steps: 50,
            lr: 1e4,
            ..DescentConfig::default()
        },
        &opts,
    )
    .unwrap();
    assert!(wild.diverged);
    assert!(wild.losses.len() < 52);
}

fn small_train_config(iterations: usize, lr: f64) -> TrainConfig {
    let refine = crate::refine::RefineConfig {
        steps: 2,
        ..crate::refine::RefineConfig::default()
    };
    TrainConfig {
        iterations,
        batch: 2,
        adam: AdamConfig { lr, ..AdamConfig::default() },
        seed: 3,
        scenes: 3,
        validation_scenes: 1,
        eval_every: 2,
        dataset: tiny_spec(),
        unroll: UnrollConfig {
            refine,
            weights: default_step_weights(2),
            loss: ViewLoss {
                feature_weight: 0.1,
                features: crate::features::FeatureExtractorSpec::Handcrafted,
            },
        },
        init: None,
    }
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let cfg = small_train_config(3, 0.0);
    let start = HeadParams::init(cfg.head_dims(), cfg.seed).unwrap();
    let mut calls = Vec::new();
    let out = train_head_with(&cfg, |it, _, _| {
        calls.push(it);
        Ok(())
    })
    .unwrap();
    assert_eq!(out.params, start);
    assert_eq!(out.log.iterations.len(), 3);
    assert_eq!(calls, vec![0, 2, 3]);
    assert_eq!(out.log.validation.len(), 3);
}

#[test]
fn training_is_deterministic_and_moves_parameters() {
    let cfg = small_train_config(2, 1e-3);
    let a = train_head(&cfg).unwrap();
    let b = train_head(&cfg).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.log, b.log);
    assert_ne!(a.params, HeadParams::init(cfg.head_dims(), cfg.seed).unwrap());
}

#[test]
fn unrolled_gradient_matches_forward_loss_and_mode() {
    let cfg = small_train_config(0, 0.0);
    let s = make_sample(&tiny_spec(), 31, &crate::features::FeatureExtractorSpec::Handcrafted).unwrap();
    let p = HeadParams::init(cfg.head_dims(), 1).unwrap();
    let g = unrolled_gradient(&s, &p, &cfg.unroll).unwrap();
    let f = unrolled_loss(&s, &p, &cfg.unroll).unwrap();
    assert_eq!(g.loss, f.loss);
    assert_eq!(g.step_mse.len(), 3);
    assert!(f.grad.is_empty());
    assert!(g.grad.iter().any(|&v| v != 0.0));
    let mut ifs = cfg.unroll.clone();
    ifs.refine.mode = RefineMode::IfSplat;
    assert!(unrolled_loss(&s, &p, &ifs).is_ok());
    let mut bad = cfg.unroll.clone();
    bad.weights = vec![1.0];
    assert!(unrolled_gradient(&s, &p, &bad).is_err());
}
