//! Joint and mesh error metrics. Inputs are frame-major point sequences in
//! meters; outputs are millimeters (mm/frame² for acceleration error).

use nalgebra::{Matrix3, Vector3};

use crate::error::{shape_err, Error, Result};

/// Per-frame point sets.
pub type Sequence = [Vec<Vector3<f64>>];

/// Pelvis of the LSP skeleton: midpoint of the two hips.
pub const LSP_PELVIS: &[usize] = &crate::body_model::LSP_HIPS;

/// How each frame is translated before comparing.
#[derive(Debug, Clone, Copy)]
pub enum Root<'a> {
    /// Compare as-is.
    None,
    /// Subtract the mean of these point indices, separately for pred and gt.
    Mean(&'a [usize]),
    /// Subtract a given per-frame root (used for meshes, whose root comes
    /// from the skeleton rather than from a vertex).
    Given {
        pred: &'a [Vector3<f64>],
        gt: &'a [Vector3<f64>],
    },
}

fn check_shapes(pred: &Sequence, gt: &Sequence) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(shape_err("frame count", gt.len(), pred.len()));
    }
    if pred.is_empty() {
        return Err(Error::Degenerate("empty sequence"));
    }
    for (p, g) in pred.iter().zip(gt) {
        if p.len() != g.len() || p.is_empty() {
            return Err(shape_err("points per frame", g.len(), p.len()));
        }
    }
    Ok(())
}

fn root_offset(frame: &[Vector3<f64>], idx: &[usize]) -> Vector3<f64> {
    idx.iter().map(|&i| frame[i]).sum::<Vector3<f64>>() / idx.len() as f64
}

fn roots(root: Root<'_>, pred: &Sequence, gt: &Sequence) -> Result<Vec<(Vector3<f64>, Vector3<f64>)>> {
    match root {
        Root::None => Ok(vec![(Vector3::zeros(), Vector3::zeros()); pred.len()]),
        Root::Mean(idx) => {
            if idx.is_empty() || idx.iter().any(|&i| i >= pred[0].len()) {
                return Err(Error::Degenerate("root index out of range"));
            }
            Ok(pred
                .iter()
                .zip(gt)
                .map(|(p, g)| (root_offset(p, idx), root_offset(g, idx)))
                .collect())
        }
        Root::Given { pred: rp, gt: rg } => {
            if rp.len() != pred.len() || rg.len() != pred.len() {
                return Err(shape_err("root track", pred.len(), rp.len().min(rg.len())));
            }
            Ok(rp.iter().copied().zip(rg.iter().copied()).collect())
        }
    }
}

fn mean_distance(pred: &Sequence, gt: &Sequence, root: Root<'_>) -> Result<f64> {
    check_shapes(pred, gt)?;
    let roots = roots(root, pred, gt)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for ((p, g), (rp, rg)) in pred.iter().zip(gt).zip(roots) {
        for (a, b) in p.iter().zip(g) {
            total += ((a - rp) - (b - rg)).norm();
            count += 1;
        }
    }
    Ok(total / count as f64 * 1000.0)
}

/// Mean per-joint position error after root alignment, in mm.
pub fn mpjpe(pred: &Sequence, gt: &Sequence, root: Root<'_>) -> Result<f64> {
    mean_distance(pred, gt, root)
}

/// Per-vertex error after root alignment, in mm.
pub fn pve(pred: &Sequence, gt: &Sequence, root: Root<'_>) -> Result<f64> {
    mean_distance(pred, gt, root)
}

/// Scale, rotation and translation minimizing Σ‖s·R·x + t − y‖².
#[derive(Debug, Clone, Copy)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x * self.scale + self.translation
    }
}

/// Closed-form similarity Procrustes (SVD of the cross-covariance) aligning
/// `source` onto `target`.
pub fn procrustes(source: &[Vector3<f64>], target: &[Vector3<f64>]) -> Result<Similarity> {
    if source.len() != target.len() {
        return Err(shape_err("procrustes points", target.len(), source.len()));
    }
    if source.len() < 3 {
        return Err(Error::Degenerate("procrustes needs at least 3 points"));
    }
    let n = source.len() as f64;
    let mu_x = source.iter().sum::<Vector3<f64>>() / n;
    let mu_y = target.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    let mut var_x = 0.0;
    let mut spread_x = Matrix3::zeros();
    let mut spread_y = Matrix3::zeros();
    for (x, y) in source.iter().zip(target) {
        let (xc, yc) = (x - mu_x, y - mu_y);
        cov += yc * xc.transpose();
        var_x += xc.norm_squared();
        spread_x += xc * xc.transpose();
        spread_y += yc * yc.transpose();
    }
    for spread in [spread_x, spread_y] {
        let ev = spread.symmetric_eigenvalues();
        let mut ev: Vec<f64> = ev.iter().copied().collect();
        ev.sort_by(|a, b| b.total_cmp(a));
        if !(ev[1] > 1e-12 * ev[0].max(1e-300)) {
            return Err(Error::Degenerate("collinear point set"));
        }
    }
    let svd = cov.svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested Vᵀ");
    let d = (u * v_t).determinant().signum();
    let fix = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    let rotation = u * fix * v_t;
    let s = svd.singular_values;
    let scale = (s[0] + s[1] + d * s[2]) / var_x;
    let translation = mu_y - rotation * mu_x * scale;
    Ok(Similarity {
        scale,
        rotation,
        translation,
    })
}

/// MPJPE after per-frame similarity Procrustes alignment, in mm.
pub fn pa_mpjpe(pred: &Sequence, gt: &Sequence) -> Result<f64> {
    check_shapes(pred, gt)?;
    let aligned = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| {
            let sim = procrustes(p, g)?;
            Ok(p.iter().map(|x| sim.apply(x)).collect())
        })
        .collect::<Result<Vec<Vec<_>>>>()?;
    mean_distance(&aligned, gt, Root::None)
}

/// Mean norm of the second-difference mismatch, in mm/frame².
pub fn accel_error(pred: &Sequence, gt: &Sequence) -> Result<f64> {
    check_shapes(pred, gt)?;
    if pred.len() < 3 {
        return Err(Error::Degenerate("acceleration error needs at least 3 frames"));
    }
    let accel = |s: &Sequence, t: usize, j: usize| s[t + 1][j] - s[t][j] * 2.0 + s[t - 1][j];
    let mut total = 0.0;
    let mut count = 0usize;
    for t in 1..pred.len() - 1 {
        for j in 0..pred[t].len() {
            total += (accel(pred, t, j) - accel(gt, t, j)).norm();
            count += 1;
        }
    }
    Ok(total / count as f64 * 1000.0)
}
