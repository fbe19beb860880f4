//! Library results checked against the independent implementations in
//! `common`.

mod common;

use candle_core::{DType, Device, Tensor};
use common::*;
use nalgebra::Vector3;
use occmocap::body_model::BodyModel;
use occmocap::global_fit::{solve_translation, CameraIntrinsics, FitConfig};
use occmocap::lifting_net::{loss_motion, LiftingOutput, LiftingTargets, LossWeights};
use occmocap::metrics::{pa_mpjpe, procrustes};
use occmocap::motion_repr::matrix_to_rot6d;
use rand::Rng;

#[test]
fn pa_mpjpe_matches_brute_force_alignment() {
    let mut r = rng(11);
    for _ in 0..10 {
        let frames = 2;
        let gt: Vec<Vec<Vector3<f64>>> = (0..frames).map(|_| random_points(&mut r, 14, 0.8)).collect();
        let pred: Vec<Vec<Vector3<f64>>> = gt
            .iter()
            .map(|g| {
                let rot = random_rotation(&mut r);
                let s = r.random_range(0.6..1.6);
                let t = Vector3::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(2.0..5.0));
                g.iter()
                    .map(|x| rot * x * s + t + Vector3::new(r.random_range(-0.1..0.1), r.random_range(-0.1..0.1), r.random_range(-0.1..0.1)))
                    .collect()
            })
            .collect();
        let got = pa_mpjpe(&pred, &gt).unwrap();
        let want = pa_mpjpe_oracle(&pred, &gt, &mut r);
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }
}

#[test]
fn procrustes_recovers_exact_similarity() {
    let mut r = rng(12);
    for _ in 0..20 {
        let x = random_points(&mut r, 10, 1.0);
        let rot = random_rotation(&mut r);
        let s = r.random_range(0.2..3.0);
        let t = Vector3::new(1.0, -2.0, 0.5);
        let y: Vec<_> = x.iter().map(|p| rot * p * s + t).collect();
        let sim = procrustes(&x, &y).unwrap();
        assert!((sim.scale - s).abs() < 1e-9);
        assert!((sim.rotation - rot).abs().max() < 1e-9);
        assert!((sim.translation - t).norm() < 1e-9);
    }
}

fn cam() -> CameraIntrinsics {
    CameraIntrinsics::new([1100.0, 1050.0], [480.0, 520.0]).unwrap()
}

fn skeleton(r: &mut impl Rng) -> Vec<Vector3<f64>> {
    (0..14)
        .map(|_| Vector3::new(r.random_range(-0.4..0.4), r.random_range(-0.9..0.9), r.random_range(-0.2..0.2)))
        .collect()
}

fn render(c: &CameraIntrinsics, joints: &[Vec<Vector3<f64>>], t: &[Vector3<f64>]) -> Vec<Vec<[f64; 2]>> {
    joints
        .iter()
        .zip(t)
        .map(|(f, tr)| f.iter().map(|x| c.project_point(&(x + tr)).unwrap()).collect())
        .collect()
}

#[test]
fn occluded_frame_matches_grid_search() {
    let mut r = rng(13);
    let c = cam();
    let cfg = FitConfig::default();
    for _ in 0..3 {
        let base = skeleton(&mut r);
        let joints: Vec<_> = (0..3).map(|_| base.clone()).collect();
        let t_star = Vector3::new(r.random_range(-0.5..0.5), r.random_range(-0.3..0.3), r.random_range(3.0..6.0));
        let truth = vec![t_star; 3];
        let pixels = render(&c, &joints, &truth);
        let mut weights = vec![vec![1.0; 14]; 3];
        weights[1] = vec![0.0; 14];
        let fit = solve_translation(&joints, &pixels, &weights, &c, &cfg).unwrap();
        let t = &fit.translations;

        let obj = |tt: &[Vector3<f64>]| translation_objective(&c, &joints, &pixels, &weights, cfg.smoothness_weight, tt);
        let start = (t[0] + t[2]) / 2.0 + Vector3::new(0.05, -0.05, 0.1);
        let oracle = grid_search_frame(obj, t, 1, start, 0.5, 8);
        assert!((oracle - t[1]).norm() < 1e-3, "{oracle} vs {}", t[1]);
        assert!((t[1] - t[0]).norm() < 1e-3 && (t[1] - t[2]).norm() < 1e-3);
        for (a, b) in t.iter().zip(&truth) {
            assert!((a - b).norm() < 1e-3);
        }
    }
}

#[test]
fn solver_objective_matches_written_out_objective_at_optimum() {
    let mut r = rng(14);
    let c = cam();
    let cfg = FitConfig::default();
    let joints: Vec<_> = (0..5).map(|_| skeleton(&mut r)).collect();
    let truth: Vec<_> = (0..5).map(|i| Vector3::new(0.1 * i as f64, 0.0, 4.0 + 0.05 * i as f64)).collect();
    let mut pixels = render(&c, &joints, &truth);
    for f in pixels.iter_mut().flatten() {
        f[0] += r.random_range(-2.0..2.0);
        f[1] += r.random_range(-2.0..2.0);
    }
    let weights: Vec<Vec<f64>> = (0..5).map(|_| (0..14).map(|_| r.random_range(0.2..1.0)).collect()).collect();
    let fit = solve_translation(&joints, &pixels, &weights, &c, &cfg).unwrap();
    let obj = |tt: &[Vector3<f64>]| translation_objective(&c, &joints, &pixels, &weights, cfg.smoothness_weight, tt);
    let at = obj(&fit.translations);
    assert!((fit.objective_history.last().unwrap() - at).abs() <= 1e-9 * at.max(1.0));
    for frame in 0..5 {
        let g = grid_search_frame(&obj, &fit.translations, frame, fit.translations[frame], 0.05, 6);
        let mut tt = fit.translations.clone();
        tt[frame] = g;
        assert!(obj(&tt) >= at - 1e-9 * at.max(1.0));
    }
}

/// Loss on random small instances against a loop-level re-implementation.
#[test]
fn motion_loss_matches_oracle() {
    let body = BodyModel::procedural();
    let dev = Device::Cpu;
    let bt = body.tensors(&dev, DType::F64).unwrap();
    let mut r = rng(15);
    for trial in 0..20 {
        let d = Dims {
            b: 1 + trial % 2,
            f: 2 + trial % 3,
            n: body.num_joints(),
            s: body.num_shape(),
        };
        let map_len = d.b * d.f * d.n * 6;
        let gt_map: Vec<f64> = (0..d.b * d.f * d.n)
            .flat_map(|_| matrix_to_rot6d(&random_rotation(&mut r)).unwrap())
            .collect();
        let out_map: Vec<f64> = gt_map.iter().map(|v| v + r.random_range(-0.3..0.3)).collect();
        assert_eq!(out_map.len(), map_len);
        let gt_beta: Vec<f64> = (0..d.b * d.s).map(|_| r.random_range(-1.5..1.5)).collect();
        let out_beta: Vec<f64> = (0..d.b * d.s).map(|_| r.random_range(-1.5..1.5)).collect();
        let w = LossWeights {
            map: r.random_range(0.1..2.0),
            vertices: r.random_range(0.1..2.0),
            joints: r.random_range(0.1..2.0),
            shape: r.random_range(0.1..2.0),
            smooth: r.random_range(0.1..2.0),
        };
        let t = |v: &[f64], shape: &[usize]| Tensor::from_slice(v, shape, &dev).unwrap();
        let out = LiftingOutput {
            map3d: t(&out_map, &[d.b, d.f, d.n, 6]),
            beta: t(&out_beta, &[d.b, d.s]),
        };
        let targets = LiftingTargets::new(&bt, &t(&gt_map, &[d.b, d.f, d.n, 6]), &t(&gt_beta, &[d.b, d.s])).unwrap();
        let got = loss_motion(&out, &targets, &bt, &w).unwrap().values().unwrap();
        let want = motion_loss_oracle(&body, d, &out_map, &out_beta, &gt_map, &gt_beta, &w);
        for (g, e) in got.iter().zip(&want) {
            assert!((g - e).abs() < 1e-6, "trial {trial}: {got:?} vs {want:?}");
        }
    }
}
