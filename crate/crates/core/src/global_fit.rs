//! Per-frame global translation from local-frame 3D joints and detected 2D
//! joints: confidence-weighted reprojection error plus a first-order
//! smoothness penalty, minimized with Gauss–Newton and step halving.

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::metrics::Sequence;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub focal: [f64; 2],
    pub principal_point: [f64; 2],
}

impl CameraIntrinsics {
    pub fn new(focal: [f64; 2], principal_point: [f64; 2]) -> Result<Self> {
        if !(focal[0] > 0.0 && focal[1] > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "focal length must be positive, got {focal:?}"
            )));
        }
        Ok(Self {
            focal,
            principal_point,
        })
    }

    pub fn project_point(&self, x: &Vector3<f64>) -> Result<[f64; 2]> {
        if !(x.z > 0.0) {
            return Err(Error::NonPositiveDepth(x.z));
        }
        Ok([
            self.focal[0] * x.x / x.z + self.principal_point[0],
            self.focal[1] * x.y / x.z + self.principal_point[1],
        ])
    }
}

/// Pinhole projection of camera-frame points to pixels.
pub fn project(camera: &CameraIntrinsics, points: &[Vector3<f64>]) -> Result<Vec<[f64; 2]>> {
    points.iter().map(|p| camera.project_point(p)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    /// Pixels of reprojection error equivalent to one meter of frame-to-frame
    /// translation change.
    pub smoothness_weight: f64,
    pub max_iterations: usize,
    pub step_tolerance: f64,
    pub max_halvings: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            smoothness_weight: 100.0,
            max_iterations: 50,
            step_tolerance: 1e-6,
            max_halvings: 10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TranslationFit {
    pub translations: Vec<Vector3<f64>>,
    pub converged: bool,
    pub iterations: usize,
    /// Objective at the initial guess and after every accepted step.
    pub objective_history: Vec<f64>,
}

struct Problem<'a> {
    joints: &'a Sequence,
    detections: &'a [Vec<[f64; 2]>],
    weights: &'a [Vec<f64>],
    camera: CameraIntrinsics,
    lambda: f64,
}

impl Problem<'_> {
    fn frames(&self) -> usize {
        self.joints.len()
    }

    /// Residual vector, or `None` when a weighted joint falls behind the camera.
    fn residuals(&self, t: &[Vector3<f64>]) -> Option<Vec<f64>> {
        let mut r = Vec::new();
        for f in 0..self.frames() {
            for (j, x) in self.joints[f].iter().enumerate() {
                let w = self.weights[f][j];
                if w <= 0.0 {
                    continue;
                }
                let p = self.camera.project_point(&(x + t[f])).ok()?;
                let sw = w.sqrt();
                r.push(sw * (p[0] - self.detections[f][j][0]));
                r.push(sw * (p[1] - self.detections[f][j][1]));
            }
        }
        for f in 1..self.frames() {
            let d = (t[f] - t[f - 1]) * self.lambda;
            r.extend([d.x, d.y, d.z]);
        }
        Some(r)
    }

    fn objective(&self, t: &[Vector3<f64>]) -> f64 {
        self.residuals(t)
            .map_or(f64::INFINITY, |r| r.iter().map(|x| x * x).sum())
    }

    /// Gauss–Newton normal equations JᵀJ and Jᵀr at `t`.
    fn normal_equations(&self, t: &[Vector3<f64>]) -> (DMatrix<f64>, DVector<f64>) {
        let n = 3 * self.frames();
        let mut h = DMatrix::zeros(n, n);
        let mut g = DVector::zeros(n);
        let [fx, fy] = self.camera.focal;
        for f in 0..self.frames() {
            for (j, x) in self.joints[f].iter().enumerate() {
                let w = self.weights[f][j];
                if w <= 0.0 {
                    continue;
                }
                let p = x + t[f];
                let z = p.z;
                let sw = w.sqrt();
                let rows = [
                    (
                        [fx / z, 0.0, -fx * p.x / (z * z)],
                        fx * p.x / z + self.camera.principal_point[0] - self.detections[f][j][0],
                    ),
                    (
                        [0.0, fy / z, -fy * p.y / (z * z)],
                        fy * p.y / z + self.camera.principal_point[1] - self.detections[f][j][1],
                    ),
                ];
                for (jac, res) in rows {
                    let jac = jac.map(|v| v * sw);
                    let res = res * sw;
                    for a in 0..3 {
                        g[3 * f + a] += jac[a] * res;
                        for b in 0..3 {
                            h[(3 * f + a, 3 * f + b)] += jac[a] * jac[b];
                        }
                    }
                }
            }
        }
        let l2 = self.lambda * self.lambda;
        for f in 1..self.frames() {
            let d = t[f] - t[f - 1];
            for a in 0..3 {
                let (i, k) = (3 * (f - 1) + a, 3 * f + a);
                h[(i, i)] += l2;
                h[(k, k)] += l2;
                h[(i, k)] -= l2;
                h[(k, i)] -= l2;
                g[k] += l2 * d[a];
                g[i] -= l2 * d[a];
            }
        }
        (h, g)
    }

    /// Weak-perspective guess per frame; frames without enough confident
    /// joints copy the nearest initialized frame.
    fn initial_guess(&self) -> Vec<Option<Vector3<f64>>> {
        let [fx, fy] = self.camera.focal;
        let [cx, cy] = self.camera.principal_point;
        (0..self.frames())
            .map(|f| {
                let vis: Vec<usize> = (0..self.joints[f].len())
                    .filter(|&j| self.weights[f][j] > 0.0)
                    .collect();
                if vis.len() < 2 {
                    return None;
                }
                let n = vis.len() as f64;
                let q: Vec<[f64; 2]> = vis
                    .iter()
                    .map(|&j| {
                        let p = self.detections[f][j];
                        [(p[0] - cx) / fx, (p[1] - cy) / fy]
                    })
                    .collect();
                let qc = [
                    q.iter().map(|p| p[0]).sum::<f64>() / n,
                    q.iter().map(|p| p[1]).sum::<f64>() / n,
                ];
                let jc = vis.iter().map(|&j| self.joints[f][j]).sum::<Vector3<f64>>() / n;
                let size2d = (q
                    .iter()
                    .map(|p| (p[0] - qc[0]).powi(2) + (p[1] - qc[1]).powi(2))
                    .sum::<f64>()
                    / n)
                    .sqrt();
                let size3d = (vis
                    .iter()
                    .map(|&j| {
                        let d = self.joints[f][j] - jc;
                        d.x * d.x + d.y * d.y
                    })
                    .sum::<f64>()
                    / n)
                    .sqrt();
                if !(size2d > 1e-12 && size3d > 1e-12) {
                    return None;
                }
                let z0 = size3d / size2d;
                Some(Vector3::new(qc[0] * z0 - jc.x, qc[1] * z0 - jc.y, z0 - jc.z))
            })
            .collect()
    }
}

fn fill_gaps(guess: Vec<Option<Vector3<f64>>>) -> Option<Vec<Vector3<f64>>> {
    let known: Vec<usize> = (0..guess.len()).filter(|&i| guess[i].is_some()).collect();
    if known.is_empty() {
        return None;
    }
    Some(
        (0..guess.len())
            .map(|i| {
                guess[i].unwrap_or_else(|| {
                    let before = known.iter().rev().find(|&&k| k < i);
                    let after = known.iter().find(|&&k| k > i);
                    match (before, after) {
                        (Some(&a), Some(&b)) => {
                            let s = (i - a) as f64 / (b - a) as f64;
                            guess[a].unwrap() * (1.0 - s) + guess[b].unwrap() * s
                        }
                        (Some(&a), None) => guess[a].unwrap(),
                        (None, Some(&b)) => guess[b].unwrap(),
                        (None, None) => unreachable!(),
                    }
                })
            })
            .collect(),
    )
}

/// Solves for one translation per frame.
///
/// `joints` are local-frame 3D joints (meters), `detections` the matching
/// 2D joints (pixels) and `weights` their confidences; zero-weight joints do
/// not contribute.
pub fn solve_translation(
    joints: &Sequence,
    detections: &[Vec<[f64; 2]>],
    weights: &[Vec<f64>],
    camera: &CameraIntrinsics,
    cfg: &FitConfig,
) -> Result<TranslationFit> {
    let frames = joints.len();
    if frames == 0 {
        return Err(Error::Degenerate("no frames to fit"));
    }
    if detections.len() != frames || weights.len() != frames {
        return Err(shape_err("detections", frames, detections.len().min(weights.len())));
    }
    for f in 0..frames {
        let k = joints[f].len();
        if detections[f].len() != k || weights[f].len() != k {
            return Err(shape_err("joints per frame", k, detections[f].len()));
        }
    }
    if weights.iter().flatten().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::InvalidConfig("confidences must be finite and non-negative".into()));
    }
    if !weights.iter().any(|w| w.iter().filter(|x| **x > 0.0).count() >= 2) {
        return Err(Error::Unsolvable("no frame has two or more confident joints"));
    }
    let problem = Problem {
        joints,
        detections,
        weights,
        camera: *camera,
        lambda: cfg.smoothness_weight,
    };
    let mut t = fill_gaps(problem.initial_guess())
        .ok_or(Error::Unsolvable("no frame supports an initial depth estimate"))?;
    let mut obj = problem.objective(&t);
    if !obj.is_finite() {
        return Err(Error::Unsolvable("initial guess places joints behind the camera"));
    }
    let mut history = vec![obj];
    let mut converged = false;
    let mut iterations = 0;

    while iterations < cfg.max_iterations {
        iterations += 1;
        let (mut h, g) = problem.normal_equations(&t);
        let step = match h.clone().cholesky() {
            Some(ch) => ch.solve(&(-&g)),
            None => {
                // rank-deficient (e.g. depth unobservable); damp lightly
                let mu = 1e-9 * h.diagonal().max().max(1e-12);
                for i in 0..h.nrows() {
                    h[(i, i)] += mu;
                }
                match h.cholesky() {
                    Some(ch) => ch.solve(&(-&g)),
                    None => break,
                }
            }
        };
        let step_norm = step.norm();
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..=cfg.max_halvings {
            let cand: Vec<Vector3<f64>> = t
                .iter()
                .enumerate()
                .map(|(f, x)| x + Vector3::new(step[3 * f], step[3 * f + 1], step[3 * f + 2]) * scale)
                .collect();
            let c = problem.objective(&cand);
            if c <= obj {
                accepted = Some((cand, c));
                break;
            }
            scale *= 0.5;
        }
        match accepted {
            Some((cand, c)) => {
                t = cand;
                obj = c;
                history.push(obj);
                if step_norm * scale < cfg.step_tolerance {
                    converged = true;
                    break;
                }
            }
            None => {
                // no descent left at working precision
                converged = step_norm < cfg.step_tolerance.sqrt();
                break;
            }
        }
    }
    Ok(TranslationFit {
        translations: t,
        converged,
        iterations,
        objective_history: history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cam() -> CameraIntrinsics {
        CameraIntrinsics::new([1000.0, 1000.0], [500.0, 500.0]).unwrap()
    }

    fn skeleton(rng: &mut impl Rng, joints: usize) -> Vec<Vector3<f64>> {
        (0..joints)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-0.4..0.4),
                    rng.random_range(-0.9..0.9),
                    rng.random_range(-0.2..0.2),
                )
            })
            .collect()
    }

    fn render(
        joints: &[Vec<Vector3<f64>>],
        t: &[Vector3<f64>],
    ) -> Vec<Vec<[f64; 2]>> {
        joints
            .iter()
            .zip(t)
            .map(|(f, tr)| f.iter().map(|x| cam().project_point(&(x + tr)).unwrap()).collect())
            .collect()
    }

    #[test]
    fn projection_examples() {
        let c = cam();
        assert_eq!(project(&c, &[Vector3::new(0.0, 0.0, 1.0)]).unwrap()[0], [500.0, 500.0]);
        assert_eq!(project(&c, &[Vector3::new(0.5, 0.0, 1.0)]).unwrap()[0], [1000.0, 500.0]);
        let x = Vector3::new(0.3, -0.2, 2.5);
        let a = c.project_point(&x).unwrap();
        let b = c.project_point(&(x * 2.0)).unwrap();
        assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
        assert!(matches!(
            c.project_point(&Vector3::new(0.0, 0.0, 0.0)),
            Err(Error::NonPositiveDepth(_))
        ));
        assert!(CameraIntrinsics::new([0.0, 1.0], [0.0; 2]).is_err());
    }

    #[test]
    fn recovers_known_translation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let frames = 12;
        let joints: Vec<_> = (0..frames).map(|_| skeleton(&mut rng, 14)).collect();
        let truth: Vec<_> = (0..frames)
            .map(|f| Vector3::new(0.2 + 0.01 * f as f64, -0.1, 4.0 + 0.02 * f as f64))
            .collect();
        let det = render(&joints, &truth);
        let w = vec![vec![1.0; 14]; frames];
        // smoothness pulls against the moving truth; disable it for the exact inverse
        let cfg = FitConfig {
            smoothness_weight: 0.0,
            ..Default::default()
        };
        let fit = solve_translation(&joints, &det, &w, &cam(), &cfg).unwrap();
        assert!(fit.converged);
        for (a, b) in fit.translations.iter().zip(&truth) {
            assert!((a - b).norm() < 1e-4, "{a} vs {b}");
        }
        // constant translation: smoothness residuals vanish at the truth
        let truth = vec![Vector3::new(-0.3, 0.2, 3.0); frames];
        let det = render(&joints, &truth);
        let fit = solve_translation(&joints, &det, &w, &cam(), &FitConfig::default()).unwrap();
        for (a, b) in fit.translations.iter().zip(&truth) {
            assert!((a - b).norm() < 1e-4);
        }
    }

    #[test]
    fn single_frame() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let joints = vec![skeleton(&mut rng, 14)];
        let truth = vec![Vector3::new(0.1, 0.3, 5.0)];
        let det = render(&joints, &truth);
        let fit = solve_translation(&joints, &det, &[vec![1.0; 14]], &cam(), &FitConfig::default()).unwrap();
        assert!((fit.translations[0] - truth[0]).norm() < 1e-4);
    }

    #[test]
    fn objective_never_increases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let joints: Vec<_> = (0..8).map(|_| skeleton(&mut rng, 14)).collect();
            let truth: Vec<_> = (0..8)
                .map(|_| Vector3::new(rng.random_range(-1.0..1.0), 0.0, rng.random_range(3.0..8.0)))
                .collect();
            let mut det = render(&joints, &truth);
            for f in det.iter_mut().flatten() {
                f[0] += rng.random_range(-5.0..5.0);
                f[1] += rng.random_range(-5.0..5.0);
            }
            let w: Vec<Vec<f64>> = (0..8).map(|_| (0..14).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
            let fit = solve_translation(&joints, &det, &w, &cam(), &FitConfig::default()).unwrap();
            for pair in fit.objective_history.windows(2) {
                assert!(pair[1] <= pair[0]);
            }
        }
    }

    #[test]
    fn zero_confidence_joint_is_ignored() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let joints: Vec<_> = (0..4).map(|_| skeleton(&mut rng, 14)).collect();
        let truth = vec![Vector3::new(0.0, 0.0, 4.0); 4];
        let det = render(&joints, &truth);
        let mut w = vec![vec![0.9; 14]; 4];
        w[2][5] = 0.0;
        let mut moved = det.clone();
        moved[2][5] = [-4000.0, 12345.0];
        let a = solve_translation(&joints, &det, &w, &cam(), &FitConfig::default()).unwrap();
        let b = solve_translation(&joints, &moved, &w, &cam(), &FitConfig::default()).unwrap();
        for (x, y) in a.translations.iter().zip(&b.translations) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn all_zero_confidence_is_unsolvable() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let joints: Vec<_> = (0..3).map(|_| skeleton(&mut rng, 14)).collect();
        let det = render(&joints, &vec![Vector3::new(0.0, 0.0, 4.0); 3]);
        let w = vec![vec![0.0; 14]; 3];
        assert!(matches!(
            solve_translation(&joints, &det, &w, &cam(), &FitConfig::default()),
            Err(Error::Unsolvable(_))
        ));
    }
}
