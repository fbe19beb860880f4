//! Lifting network: 2D motion maps to per-joint 6D rotations and one shape
//! vector per sequence, plus the motion loss it is trained with.
//!
//! The network reuses the prior's ST layer, encodes the ST features with its
//! own spatial transformer, and adds the result to the prior's temporal
//! features before two heads. Without a prior it owns an ST layer and token
//! and uses its spatial features alone.

use candle_core::{DType, Tensor};
use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::body_model::BodyTensors;
use crate::error::{shape_err, Result};
use crate::motion_repr::{apply_token_tensor, matrix_to_rot6d, rot6d_to_matrix_tensor, IDENTITY_6D};
use crate::nn::{Init, Mlp, ParamStore};
use crate::prior_net::{ModelConfig, PriorNet, SpatialEncoder, StLayer, TokenMode};

/// 6D offset added to the map head output. Every joint starts at the
/// identity except the root, which starts flipped 180° about x so that an
/// upright body faces a y-down camera.
pub fn reference_map(joints: usize) -> Vec<f64> {
    let flip = Matrix3::from_diagonal(&nalgebra::Vector3::new(1.0, -1.0, -1.0));
    let root = matrix_to_rot6d(&flip).expect("flip is a rotation");
    (0..joints)
        .flat_map(|n| if n == 0 { root } else { IDENTITY_6D })
        .collect()
}

enum Front {
    Prior(PriorNet),
    Own { token: Tensor, st: StLayer },
}

pub struct LiftingNet {
    cfg: ModelConfig,
    front: Front,
    spatial: SpatialEncoder,
    map_head: Mlp,
    shape_head: Mlp,
    reference: Tensor,
}

#[derive(Debug, Clone)]
pub struct LiftingOutput {
    /// (B, F, N, 6).
    pub map3d: Tensor,
    /// (B, shape_params).
    pub beta: Tensor,
}

impl LiftingNet {
    /// With `use_prior` the prior's parameters are registered under
    /// `prior.*` alongside the lifting parameters under `lifting.*`.
    pub fn new(ps: &mut ParamStore, cfg: &ModelConfig, use_prior: bool) -> Result<Self> {
        cfg.validate()?;
        let front = if use_prior {
            Front::Prior(PriorNet::new(ps, cfg)?)
        } else {
            let token = match cfg.token {
                TokenMode::Learned => ps.create("lifting.token", &[2], Init::Value(cfg.token_init.to_vec()))?,
                TokenMode::ZeroFill => Tensor::zeros(2, ps.dtype(), ps.device())?,
            };
            Front::Own {
                token,
                st: StLayer::new(ps, "lifting.st", cfg)?,
            }
        };
        let width = cfg.joints * cfg.feature_dim();
        let reference = Tensor::from_vec(reference_map(cfg.body_joints), cfg.body_joints * 6, ps.device())?
            .to_dtype(ps.dtype())?;
        Ok(Self {
            cfg: cfg.clone(),
            front,
            spatial: SpatialEncoder::new(ps, "lifting.spatial", cfg)?,
            map_head: Mlp::new(ps, "lifting.map_head", width, cfg.head_hidden, cfg.body_joints * 6)?,
            shape_head: Mlp::new(ps, "lifting.shape_head", width, cfg.head_hidden, cfg.shape_params)?,
            reference,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn uses_prior(&self) -> bool {
        matches!(self.front, Front::Prior(_))
    }

    pub fn prior(&self) -> Option<&PriorNet> {
        match &self.front {
            Front::Prior(p) => Some(p),
            Front::Own { .. } => None,
        }
    }

    /// `map` (B, F, K, 2), `mask` (B, F, K) with 1 = occluded.
    pub fn forward(&self, map: &Tensor, mask: &Tensor) -> Result<LiftingOutput> {
        let (b, f, k, c) = map.dims4()?;
        if (f, k, c) != (self.cfg.frames, self.cfg.joints, 2) {
            return Err(shape_err(
                "lifting input",
                format!("(B, {}, {}, 2)", self.cfg.frames, self.cfg.joints),
                format!("{:?}", map.dims()),
            ));
        }
        if mask.dims() != &map.dims()[..3] {
            return Err(shape_err("lifting mask", format!("{:?}", &map.dims()[..3]), format!("{:?}", mask.dims())));
        }
        let d = self.cfg.feature_dim();
        let fused = match &self.front {
            Front::Prior(prior) => {
                let st = prior.st_layer().forward(&prior.occlude(map, mask)?)?;
                let temporal = prior.encode(&st)?;
                self.spatial.forward(&st)?.reshape((b, f, k * d))?.add(&temporal)?
            }
            Front::Own { token, st } => {
                let st = st.forward(&apply_token_tensor(map, mask, token)?)?;
                self.spatial.forward(&st)?.reshape((b, f, k * d))?
            }
        };
        let n = self.cfg.body_joints;
        let map3d = self
            .map_head
            .forward(&fused)?
            .broadcast_add(&self.reference)?
            .reshape((b, f, n, 6))?;
        let beta = self.shape_head.forward(&fused.mean(1)?)?;
        Ok(LiftingOutput { map3d, beta })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub map: f64,
    pub vertices: f64,
    pub joints: f64,
    pub shape: f64,
    pub smooth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            map: 1.0,
            vertices: 1.0,
            joints: 1.0,
            shape: 1.0,
            smooth: 1.0,
        }
    }
}

/// Ground truth for [`loss_motion`]; vertices and joints come from the
/// ground-truth parameters through the same body model.
#[derive(Debug, Clone)]
pub struct LiftingTargets {
    /// (B, F, N, 6).
    pub map3d: Tensor,
    /// (B, shape_params).
    pub beta: Tensor,
    /// (B·F, V, 3), root-relative.
    pub vertices: Tensor,
    /// (B·F, N, 3), root-relative.
    pub joints: Tensor,
}

impl LiftingTargets {
    pub fn new(body: &BodyTensors, map3d: &Tensor, beta: &Tensor) -> Result<Self> {
        let (vertices, joints) = pose_body(body, map3d, beta)?;
        Ok(Self {
            map3d: map3d.clone(),
            beta: beta.clone(),
            vertices: vertices.detach(),
            joints: joints.detach(),
        })
    }
}

/// Runs the body model on every frame of a (B, F, N, 6) map with one shape
/// vector per sequence.
pub fn pose_body(body: &BodyTensors, map3d: &Tensor, beta: &Tensor) -> Result<(Tensor, Tensor)> {
    let (b, f, n, six) = map3d.dims4()?;
    if six != 6 || n != body.num_joints() {
        return Err(shape_err("motion map", format!("(B, F, {}, 6)", body.num_joints()), format!("{:?}", map3d.dims())));
    }
    let (bb, s) = beta.dims2()?;
    if bb != b {
        return Err(shape_err("beta batch", b, bb));
    }
    let rotations = rot6d_to_matrix_tensor(&map3d.reshape((b * f, n, 6))?)?.contiguous()?;
    let betas = beta.unsqueeze(1)?.broadcast_as((b, f, s))?.reshape((b * f, s))?;
    body.forward(&rotations, &betas)
}

#[derive(Debug, Clone)]
pub struct LossTerms {
    pub rec_map: Tensor,
    pub rec_vertices: Tensor,
    pub rec_joints: Tensor,
    pub shape: Tensor,
    pub smooth: Tensor,
    pub total: Tensor,
}

impl LossTerms {
    /// (rec_map, rec_vertices, rec_joints, shape, smooth, total) as numbers.
    pub fn values(&self) -> Result<[f64; 6]> {
        let v = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        Ok([
            v(&self.rec_map)?,
            v(&self.rec_vertices)?,
            v(&self.rec_joints)?,
            v(&self.shape)?,
            v(&self.smooth)?,
            v(&self.total)?,
        ])
    }
}

fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok(a.sub(b)?.sqr()?.mean_all()?)
}

/// Mean squared difference between consecutive frames of a (B, F, N, 6) map.
pub fn smoothness(map3d: &Tensor) -> Result<Tensor> {
    let f = map3d.dim(1)?;
    if f < 2 {
        return Ok(Tensor::zeros((), map3d.dtype(), map3d.device())?);
    }
    let next = map3d.narrow(1, 1, f - 1)?;
    let prev = map3d.narrow(1, 0, f - 1)?;
    mse(&next, &prev)
}

/// Reconstruction on map, vertices and joints, shape regularization and
/// temporal smoothness, each a mean squared error, combined with `weights`.
pub fn loss_motion(
    out: &LiftingOutput,
    gt: &LiftingTargets,
    body: &BodyTensors,
    weights: &LossWeights,
) -> Result<LossTerms> {
    if out.map3d.dims() != gt.map3d.dims() {
        return Err(shape_err("loss_motion map", format!("{:?}", gt.map3d.dims()), format!("{:?}", out.map3d.dims())));
    }
    if out.beta.dims() != gt.beta.dims() {
        return Err(shape_err("loss_motion beta", format!("{:?}", gt.beta.dims()), format!("{:?}", out.beta.dims())));
    }
    let (vertices, joints) = pose_body(body, &out.map3d, &out.beta)?;
    let rec_map = mse(&out.map3d, &gt.map3d)?;
    let rec_vertices = mse(&vertices, &gt.vertices)?;
    let rec_joints = mse(&joints, &gt.joints)?;
    let shape = mse(&out.beta, &gt.beta)?.add(&out.beta.sqr()?.mean_all()?)?;
    let smooth = smoothness(&out.map3d)?;
    let total = ((rec_map.affine(weights.map, 0.0)? + rec_vertices.affine(weights.vertices, 0.0)?)?
        + rec_joints.affine(weights.joints, 0.0)?)?;
    let total = ((total + shape.affine(weights.shape, 0.0)?)? + smooth.affine(weights.smooth, 0.0)?)?;
    Ok(LossTerms {
        rec_map,
        rec_vertices,
        rec_joints,
        shape,
        smooth,
        total,
    })
}

/// Converts a (B, F, N, 6) map to per-frame rotation matrices, batch item
/// `index` only.
pub fn map_rotations(map3d: &Tensor, index: usize) -> Result<Vec<Vec<Matrix3<f64>>>> {
    let (_, f, n, _) = map3d.dims4()?;
    let r = rot6d_to_matrix_tensor(&map3d.get(index)?.to_dtype(DType::F64)?)?;
    let flat: Vec<f64> = r.flatten_all()?.to_vec1()?;
    Ok((0..f)
        .map(|t| {
            (0..n)
                .map(|j| {
                    let o = (t * n + j) * 9;
                    Matrix3::from_row_slice(&flat[o..o + 9])
                })
                .collect()
        })
        .collect())
}
