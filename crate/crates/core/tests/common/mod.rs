//! Independent reference implementations used by the integration and
//! acceptance tests. Nothing here calls into the code paths it checks.
#![allow(dead_code)]

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use occmocap::body_model::BodyModel;
use occmocap::global_fit::CameraIntrinsics;
use occmocap::lifting_net::LossWeights;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform rotation from a random unit quaternion.
pub fn random_rotation(rng: &mut impl Rng) -> Matrix3<f64> {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.1 && n <= 1.0 {
            let [w, x, y, z] = q.map(|v| v / n);
            return Matrix3::new(
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - w * z),
                2.0 * (x * z + w * y),
                2.0 * (x * y + w * z),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - w * x),
                2.0 * (x * z - w * y),
                2.0 * (y * z + w * x),
                1.0 - 2.0 * (x * x + y * y),
            );
        }
    }
}

pub fn random_points(rng: &mut impl Rng, n: usize, half: f64) -> Vec<Vector3<f64>> {
    (0..n)
        .map(|_| Vector3::new(rng.random_range(-half..half), rng.random_range(-half..half), rng.random_range(-half..half)))
        .collect()
}

/// Gram–Schmidt decoding written out component by component.
pub fn gs_decode(v: &[f64]) -> Matrix3<f64> {
    let n1 = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    let b1 = [v[0] / n1, v[1] / n1, v[2] / n1];
    let d = b1[0] * v[3] + b1[1] * v[4] + b1[2] * v[5];
    let u = [v[3] - d * b1[0], v[4] - d * b1[1], v[5] - d * b1[2]];
    let n2 = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
    let b2 = [u[0] / n2, u[1] / n2, u[2] / n2];
    let b3 = [
        b1[1] * b2[2] - b1[2] * b2[1],
        b1[2] * b2[0] - b1[0] * b2[2],
        b1[0] * b2[1] - b1[1] * b2[0],
    ];
    Matrix3::new(b1[0], b2[0], b3[0], b1[1], b2[1], b3[1], b1[2], b2[2], b3[2])
}

/// Linear blend skinning straight from the model arrays; root at origin.
pub fn body_oracle(body: &BodyModel, pose: &[Matrix3<f64>], beta: &[f64]) -> (Vec<Vector3<f64>>, Vec<Vector3<f64>>) {
    let mut rest_v = body.template();
    for (k, b) in beta.iter().enumerate() {
        for (x, d) in rest_v.iter_mut().zip(body.shape_dir(k)) {
            *x += d * *b;
        }
    }
    let n = body.num_joints();
    let nv = rest_v.len();
    let reg = body.joint_regressor();
    let rest_j: Vec<Vector3<f64>> = (0..n)
        .map(|j| (0..nv).map(|v| rest_v[v] * reg[j * nv + v]).sum())
        .collect();
    let mut g: Vec<(Matrix3<f64>, Vector3<f64>)> = Vec::with_capacity(n);
    for j in 0..n {
        g.push(match body.parents()[j] {
            None => (pose[j], rest_j[j]),
            Some(p) => (g[p].0 * pose[j], g[p].1 + g[p].0 * (rest_j[j] - rest_j[p])),
        });
    }
    let root = g[0].1;
    let w = body.skinning_weights();
    let verts = rest_v
        .iter()
        .enumerate()
        .map(|(v, x)| (0..n).map(|j| (g[j].0 * (x - rest_j[j]) + g[j].1) * w[v * n + j]).sum::<Vector3<f64>>() - root)
        .collect();
    let joints = g.iter().map(|(_, t)| t - root).collect();
    (verts, joints)
}

/// Dimensions of a flat (B, F, N, 6) motion map.
#[derive(Debug, Clone, Copy)]
pub struct Dims {
    pub b: usize,
    pub f: usize,
    pub n: usize,
    pub s: usize,
}

/// Sum-of-terms motion loss computed with plain loops:
/// (map, vertices, joints, shape, smooth, total).
pub fn motion_loss_oracle(
    body: &BodyModel,
    d: Dims,
    out_map: &[f64],
    out_beta: &[f64],
    gt_map: &[f64],
    gt_beta: &[f64],
    w: &LossWeights,
) -> [f64; 6] {
    let sq = |a: f64, b: f64| (a - b) * (a - b);
    let map = out_map.iter().zip(gt_map).map(|(a, b)| sq(*a, *b)).sum::<f64>() / out_map.len() as f64;

    let (mut sv, mut cv, mut sj, mut cj) = (0.0, 0usize, 0.0, 0usize);
    for bi in 0..d.b {
        for t in 0..d.f {
            let pose = |m: &[f64]| -> Vec<Matrix3<f64>> {
                (0..d.n)
                    .map(|j| {
                        let o = ((bi * d.f + t) * d.n + j) * 6;
                        gs_decode(&m[o..o + 6])
                    })
                    .collect()
            };
            let (pv, pj) = body_oracle(body, &pose(out_map), &out_beta[bi * d.s..(bi + 1) * d.s]);
            let (gv, gj) = body_oracle(body, &pose(gt_map), &gt_beta[bi * d.s..(bi + 1) * d.s]);
            for (a, b) in pv.iter().zip(&gv) {
                sv += (a - b).norm_squared();
                cv += 3;
            }
            for (a, b) in pj.iter().zip(&gj) {
                sj += (a - b).norm_squared();
                cj += 3;
            }
        }
    }
    let verts = sv / cv as f64;
    let joints = sj / cj as f64;

    let nb = out_beta.len() as f64;
    let shape = out_beta.iter().zip(gt_beta).map(|(a, b)| sq(*a, *b)).sum::<f64>() / nb
        + out_beta.iter().map(|a| a * a).sum::<f64>() / nb;

    let row = d.n * 6;
    let (mut ss, mut cs) = (0.0, 0usize);
    for bi in 0..d.b {
        for t in 0..d.f.saturating_sub(1) {
            let a = (bi * d.f + t) * row;
            let b = a + row;
            for i in 0..row {
                ss += sq(out_map[b + i], out_map[a + i]);
                cs += 1;
            }
        }
    }
    let smooth = if cs == 0 { 0.0 } else { ss / cs as f64 };
    let total = w.map * map + w.vertices * verts + w.joints * joints + w.shape * shape + w.smooth * smooth;
    [map, verts, joints, shape, smooth, total]
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

fn exp_so3(w: &Vector3<f64>) -> Matrix3<f64> {
    let th = w.norm();
    let k = skew(w);
    if th < 1e-12 {
        return Matrix3::identity() + k;
    }
    Matrix3::identity() + k * (th.sin() / th) + k * k * ((1.0 - th.cos()) / (th * th))
}

/// Similarity alignment of `x` onto `y` by Gauss–Newton over (rotation
/// increment, scale, translation) from `restarts` random starts; returns the
/// best aligned copy of `x`.
pub fn align_oracle(x: &[Vector3<f64>], y: &[Vector3<f64>], restarts: usize, rng: &mut impl Rng) -> Vec<Vector3<f64>> {
    let objective = |s: f64, r: &Matrix3<f64>, t: &Vector3<f64>| -> f64 {
        x.iter().zip(y).map(|(a, b)| (r * a * s + t - b).norm_squared()).sum()
    };
    let mut best: Option<(f64, f64, Matrix3<f64>, Vector3<f64>)> = None;
    for _ in 0..restarts {
        let mut r = random_rotation(rng);
        let mut s = rng.random_range(0.5..2.0);
        let mut t = Vector3::zeros();
        let mut f = objective(s, &r, &t);
        for _ in 0..200 {
            let mut h = SMatrix::<f64, 7, 7>::zeros();
            let mut g = SVector::<f64, 7>::zeros();
            for (a, b) in x.iter().zip(y) {
                let ra = r * a;
                let res = ra * s + t - b;
                let mut jac = SMatrix::<f64, 3, 7>::zeros();
                jac.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(&ra) * s));
                jac.fixed_view_mut::<3, 1>(0, 3).copy_from(&ra);
                jac.fixed_view_mut::<3, 3>(0, 4).copy_from(&Matrix3::identity());
                h += jac.transpose() * jac;
                g += jac.transpose() * res;
            }
            let Some(step) = h.lu().solve(&(-g)) else { break };
            let mut alpha = 1.0;
            let mut accepted = false;
            for _ in 0..30 {
                let w = Vector3::new(step[0], step[1], step[2]) * alpha;
                let r2 = exp_so3(&w) * r;
                let s2 = s + alpha * step[3];
                let t2 = t + Vector3::new(step[4], step[5], step[6]) * alpha;
                let f2 = objective(s2, &r2, &t2);
                if f2 <= f {
                    let done = f - f2 <= 1e-30 * f.max(1e-300) || step.norm() * alpha < 1e-15;
                    r = r2;
                    s = s2;
                    t = t2;
                    f = f2;
                    accepted = !done;
                    break;
                }
                alpha *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        if best.as_ref().is_none_or(|b| f < b.0) {
            best = Some((f, s, r, t));
        }
    }
    let (_, s, r, t) = best.unwrap();
    x.iter().map(|a| r * a * s + t).collect()
}

/// Frame-wise similarity-aligned MPJPE in mm, from [`align_oracle`].
pub fn pa_mpjpe_oracle(pred: &[Vec<Vector3<f64>>], gt: &[Vec<Vector3<f64>>], rng: &mut impl Rng) -> f64 {
    let mut total = 0.0;
    let mut count = 0;
    for (p, g) in pred.iter().zip(gt) {
        let a = align_oracle(p, g, 20, rng);
        for (u, v) in a.iter().zip(g) {
            total += (u - v).norm();
            count += 1;
        }
    }
    total / count as f64 * 1000.0
}

/// The translation objective written out from its definition: weighted
/// squared reprojection error plus squared scaled frame-to-frame change.
pub fn translation_objective(
    cam: &CameraIntrinsics,
    joints: &[Vec<Vector3<f64>>],
    pixels: &[Vec<[f64; 2]>],
    weights: &[Vec<f64>],
    lambda: f64,
    t: &[Vector3<f64>],
) -> f64 {
    let mut e = 0.0;
    for f in 0..joints.len() {
        for j in 0..joints[f].len() {
            let w = weights[f][j];
            if w == 0.0 {
                continue;
            }
            let x = joints[f][j] + t[f];
            let u = cam.focal[0] * x.x / x.z + cam.principal_point[0];
            let v = cam.focal[1] * x.y / x.z + cam.principal_point[1];
            e += w * ((u - pixels[f][j][0]).powi(2) + (v - pixels[f][j][1]).powi(2));
        }
    }
    for f in 1..t.len() {
        e += lambda * lambda * (t[f] - t[f - 1]).norm_squared();
    }
    e
}

/// Coarse-to-fine grid search over one frame's translation, the others held
/// fixed.
pub fn grid_search_frame(
    objective: impl Fn(&[Vector3<f64>]) -> f64,
    t: &[Vector3<f64>],
    frame: usize,
    start: Vector3<f64>,
    half_width: f64,
    levels: usize,
) -> Vector3<f64> {
    let mut center = start;
    let mut h = half_width;
    let steps = 10i32;
    let mut tt = t.to_vec();
    for _ in 0..levels {
        let mut best = (f64::INFINITY, center);
        for i in -steps..=steps {
            for j in -steps..=steps {
                for k in -steps..=steps {
                    let c = center + Vector3::new(i as f64, j as f64, k as f64) * (h / steps as f64);
                    tt[frame] = c;
                    let e = objective(&tt);
                    if e < best.0 {
                        best = (e, c);
                    }
                }
            }
        }
        center = best.1;
        h /= 5.0;
    }
    center
}
