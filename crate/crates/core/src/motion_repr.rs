//! Motion maps: frame-by-joint grids of 2D joint coordinates or 6D joint
//! rotations, plus the bounding-box normalization and the 6D rotation
//! encoding they rely on.

use candle_core::{Tensor, D};
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Norm regularizer used by the differentiable Gram–Schmidt decoder.
pub const ROT6D_EPS: f64 = 1e-8;

/// 6D encoding of the identity rotation.
pub const IDENTITY_6D: [f64; 6] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];

/// Square crop around a person, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bbox {
    pub center: [f64; 2],
    pub scale: f64,
}

impl Bbox {
    pub fn new(center: [f64; 2], scale: f64) -> Result<Self> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::InvalidBbox(scale));
        }
        Ok(Self { center, scale })
    }

    /// Tight box around `points` (center of the extent, scale = longer side),
    /// enlarged by `pad` (0.2 = 20%).
    pub fn enclosing(points: &[[f64; 2]], pad: f64) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Degenerate("bounding box of an empty point set"));
        }
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for p in points {
            for c in 0..2 {
                lo[c] = lo[c].min(p[c]);
                hi[c] = hi[c].max(p[c]);
            }
        }
        let center = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0];
        let extent = (hi[0] - lo[0]).max(hi[1] - lo[1]);
        // a single visible point still needs a usable box
        let extent = if extent > 0.0 { extent } else { 1.0 };
        Self::new(center, extent * (1.0 + pad))
    }
}

pub fn normalize_pose2d(joints: &[[f64; 2]], bbox: &Bbox) -> Result<Vec<[f64; 2]>> {
    if !(bbox.scale > 0.0) {
        return Err(Error::InvalidBbox(bbox.scale));
    }
    Ok(joints
        .iter()
        .map(|j| {
            [
                (j[0] - bbox.center[0]) / bbox.scale,
                (j[1] - bbox.center[1]) / bbox.scale,
            ]
        })
        .collect())
}

pub fn denormalize_pose2d(joints: &[[f64; 2]], bbox: &Bbox) -> Result<Vec<[f64; 2]>> {
    if !(bbox.scale > 0.0) {
        return Err(Error::InvalidBbox(bbox.scale));
    }
    Ok(joints
        .iter()
        .map(|j| {
            [
                j[0] * bbox.scale + bbox.center[0],
                j[1] * bbox.scale + bbox.center[1],
            ]
        })
        .collect())
}

/// F×K×2 grid of 2D joint coordinates, row-major (frame, joint, xy).
#[derive(Debug, Clone, PartialEq)]
pub struct Map2D {
    frames: usize,
    joints: usize,
    values: Vec<f64>,
}

impl Map2D {
    pub fn zeros(frames: usize, joints: usize) -> Self {
        Self {
            frames,
            joints,
            values: vec![0.0; frames * joints * 2],
        }
    }

    pub fn from_values(frames: usize, joints: usize, values: Vec<f64>) -> Result<Self> {
        if frames == 0 || joints == 0 {
            return Err(Error::InvalidConfig("motion map needs F > 0 and K > 0".into()));
        }
        if values.len() != frames * joints * 2 {
            return Err(shape_err("Map2D", frames * joints * 2, values.len()));
        }
        Ok(Self {
            frames,
            joints,
            values,
        })
    }

    pub fn from_frames(frames: &[Vec<[f64; 2]>]) -> Result<Self> {
        let k = frames.first().map_or(0, Vec::len);
        if frames.iter().any(|f| f.len() != k) {
            return Err(Error::Degenerate("ragged joint count across frames"));
        }
        let values = frames.iter().flatten().flat_map(|p| *p).collect();
        Self::from_values(frames.len(), k, values)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, f: usize, k: usize) -> [f64; 2] {
        let i = (f * self.joints + k) * 2;
        [self.values[i], self.values[i + 1]]
    }

    pub fn set(&mut self, f: usize, k: usize, v: [f64; 2]) {
        let i = (f * self.joints + k) * 2;
        self.values[i] = v[0];
        self.values[i + 1] = v[1];
    }

    pub fn frame(&self, f: usize) -> Vec<[f64; 2]> {
        (0..self.joints).map(|k| self.get(f, k)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// F×K occlusion flags; `true` marks an occluded joint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OcclusionMask {
    frames: usize,
    joints: usize,
    mask: Vec<bool>,
}

impl OcclusionMask {
    pub fn none(frames: usize, joints: usize) -> Self {
        Self {
            frames,
            joints,
            mask: vec![false; frames * joints],
        }
    }

    pub fn all(frames: usize, joints: usize) -> Self {
        Self {
            frames,
            joints,
            mask: vec![true; frames * joints],
        }
    }

    pub fn from_flags(frames: usize, joints: usize, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != frames * joints {
            return Err(shape_err("OcclusionMask", frames * joints, mask.len()));
        }
        Ok(Self {
            frames,
            joints,
            mask,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn flags(&self) -> &[bool] {
        &self.mask
    }

    pub fn get(&self, f: usize, k: usize) -> bool {
        self.mask[f * self.joints + k]
    }

    pub fn set(&mut self, f: usize, k: usize, occluded: bool) {
        self.mask[f * self.joints + k] = occluded;
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    pub fn ratio(&self) -> f64 {
        self.count() as f64 / self.mask.len().max(1) as f64
    }

    fn check_against(&self, map: &Map2D) -> Result<()> {
        if self.frames != map.frames || self.joints != map.joints {
            return Err(shape_err(
                "occlusion mask",
                format!("{}x{}", map.frames, map.joints),
                format!("{}x{}", self.frames, self.joints),
            ));
        }
        Ok(())
    }
}

/// The value written into occluded pixels of a 2D motion map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OcclusionToken(pub [f64; 2]);

/// A 2D motion map in which occluded joints carry the occlusion token.
#[derive(Debug, Clone, PartialEq)]
pub struct OccludedMap2D {
    pub map: Map2D,
    pub mask: OcclusionMask,
}

pub fn apply_occlusion_token(
    map: &Map2D,
    mask: &OcclusionMask,
    token: OcclusionToken,
) -> Result<OccludedMap2D> {
    mask.check_against(map)?;
    let mut out = map.clone();
    for f in 0..map.frames {
        for k in 0..map.joints {
            if mask.get(f, k) {
                out.set(f, k, token.0);
            }
        }
    }
    Ok(OccludedMap2D {
        map: out,
        mask: mask.clone(),
    })
}

/// Tensor form of token substitution: `map` is (..., 2), `mask` is (...) with
/// 1 at occluded entries, `token` is (2). Gradients reach the token.
pub fn apply_token_tensor(map: &Tensor, mask: &Tensor, token: &Tensor) -> Result<Tensor> {
    let m = mask.unsqueeze(D::Minus1)?;
    let keep = m.affine(-1.0, 1.0)?;
    let out = map.broadcast_mul(&keep)?.add(&m.broadcast_mul(token)?)?;
    Ok(out)
}

/// F×N×6 grid of per-joint 6D rotations.
#[derive(Debug, Clone, PartialEq)]
pub struct Map3D {
    frames: usize,
    joints: usize,
    values: Vec<f64>,
}

impl Map3D {
    pub fn from_values(frames: usize, joints: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != frames * joints * 6 {
            return Err(shape_err("Map3D", frames * joints * 6, values.len()));
        }
        Ok(Self {
            frames,
            joints,
            values,
        })
    }

    pub fn from_rotations(rotations: &[Vec<Matrix3<f64>>]) -> Result<Self> {
        let n = rotations.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(rotations.len() * n * 6);
        for frame in rotations {
            if frame.len() != n {
                return Err(Error::Degenerate("ragged joint count across frames"));
            }
            for r in frame {
                values.extend(matrix_to_rot6d(r)?);
            }
        }
        Self::from_values(rotations.len(), n, values)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, f: usize, n: usize) -> [f64; 6] {
        let i = (f * self.joints + n) * 6;
        let mut out = [0.0; 6];
        out.copy_from_slice(&self.values[i..i + 6]);
        out
    }

    /// Decodes every entry into a rotation matrix, frame by frame.
    pub fn rotations(&self) -> Result<Vec<Vec<Matrix3<f64>>>> {
        (0..self.frames)
            .map(|f| {
                (0..self.joints)
                    .map(|n| rot6d_to_matrix(&self.get(f, n)))
                    .collect()
            })
            .collect()
    }
}

/// Decodes a 6D rotation (two stacked 3-vectors) by Gram–Schmidt; the third
/// column is the cross product of the first two.
pub fn rot6d_to_matrix(v: &[f64; 6]) -> Result<Matrix3<f64>> {
    let a1 = Vector3::new(v[0], v[1], v[2]);
    let a2 = Vector3::new(v[3], v[4], v[5]);
    let n1 = a1.norm();
    if !(n1 > 1e-12) || !n1.is_finite() {
        return Err(Error::SingularRotation("first column is zero"));
    }
    let b1 = a1 / n1;
    let u2 = a2 - b1 * b1.dot(&a2);
    let n2 = u2.norm();
    if !(n2 > 1e-12 * a2.norm().max(1.0)) {
        return Err(Error::SingularRotation("columns are parallel"));
    }
    let b2 = u2 / n2;
    let b3 = b1.cross(&b2);
    Ok(Matrix3::from_columns(&[b1, b2, b3]))
}

/// Largest entry of |RᵀR − I|, with det(R) < 0 reported as a violation too.
pub fn rotation_deviation(r: &Matrix3<f64>) -> f64 {
    let dev = (r.transpose() * r - Matrix3::identity()).abs().max();
    if r.determinant() <= 0.0 {
        dev.max(1.0)
    } else {
        dev
    }
}

pub fn matrix_to_rot6d(r: &Matrix3<f64>) -> Result<[f64; 6]> {
    let dev = rotation_deviation(r);
    if !(dev <= 1e-5) {
        return Err(Error::NotRotation(dev));
    }
    Ok([
        r[(0, 0)],
        r[(1, 0)],
        r[(2, 0)],
        r[(0, 1)],
        r[(1, 1)],
        r[(2, 1)],
    ])
}

/// Differentiable 6D decoding: (..., 6) → (..., 3, 3), columns b1, b2, b3.
pub fn rot6d_to_matrix_tensor(x: &Tensor) -> Result<Tensor> {
    let a1 = x.narrow(D::Minus1, 0, 3)?;
    let a2 = x.narrow(D::Minus1, 3, 3)?;
    let b1 = a1.broadcast_div(&norm_last(&a1)?)?;
    let proj = b1.mul(&a2)?.sum_keepdim(D::Minus1)?;
    let u2 = a2.sub(&b1.broadcast_mul(&proj)?)?;
    let b2 = u2.broadcast_div(&norm_last(&u2)?)?;
    let b3 = cross_last(&b1, &b2)?;
    Ok(Tensor::stack(&[b1, b2, b3], D::Minus1)?)
}

fn norm_last(x: &Tensor) -> candle_core::Result<Tensor> {
    x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?.affine(1.0, ROT6D_EPS)
}

fn cross_last(a: &Tensor, b: &Tensor) -> candle_core::Result<Tensor> {
    let c = |t: &Tensor, i: usize| t.narrow(D::Minus1, i, 1);
    let (a0, a1, a2) = (c(a, 0)?, c(a, 1)?, c(a, 2)?);
    let (b0, b1, b2) = (c(b, 0)?, c(b, 1)?, c(b, 2)?);
    let x = a1.mul(&b2)?.sub(&a2.mul(&b1)?)?;
    let y = a2.mul(&b0)?.sub(&a0.mul(&b2)?)?;
    let z = a0.mul(&b1)?.sub(&a1.mul(&b0)?)?;
    Tensor::cat(&[x, y, z], D::Minus1)
}

/// Rotation from an axis-angle vector (Rodrigues).
pub fn axis_angle_to_matrix(w: &Vector3<f64>) -> Matrix3<f64> {
    nalgebra::Rotation3::new(*w).into_inner()
}
