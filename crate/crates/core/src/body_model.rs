//! A small SMPL-style body: linear shape blending, forward kinematics along a
//! 24-joint tree and linear blend skinning. The shipped mesh is generated
//! procedurally (a few vertices per bone); real SMPL-format parameters can be
//! loaded from a safetensors archive with the array names listed on
//! [`BodyModel::load`].

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::motion_repr::rotation_deviation;

pub const NUM_BODY_JOINTS: usize = 24;
pub const NUM_SHAPE_PARAMS: usize = 10;
pub const NUM_LSP_JOINTS: usize = 14;

/// SMPL kinematic tree.
pub const SMPL_PARENTS: [Option<usize>; NUM_BODY_JOINTS] = [
    None,
    Some(0),
    Some(0),
    Some(0),
    Some(1),
    Some(2),
    Some(3),
    Some(4),
    Some(5),
    Some(6),
    Some(7),
    Some(8),
    Some(9),
    Some(9),
    Some(9),
    Some(12),
    Some(13),
    Some(14),
    Some(16),
    Some(17),
    Some(18),
    Some(19),
    Some(20),
    Some(21),
];

/// LSP order: r-ankle, r-knee, r-hip, l-hip, l-knee, l-ankle, r-wrist,
/// r-elbow, r-shoulder, l-shoulder, l-elbow, l-wrist, neck. Head top has no
/// body joint and is regressed from the crown vertex.
pub const LSP_FROM_SMPL: [usize; 13] = [8, 5, 2, 1, 4, 7, 21, 19, 17, 16, 18, 20, 12];

/// LSP indices of the two hips; their midpoint is the LSP pelvis.
pub const LSP_HIPS: [usize; 2] = [2, 3];

// Rest offsets from the parent joint (meters, y up, +x toward the body's left)
// and limb radius used to place the ring of vertices around each joint.
const REST_LAYOUT: [([f64; 3], f64); NUM_BODY_JOINTS] = [
    ([0.0, 0.0, 0.0], 0.11),
    ([0.07, -0.09, 0.0], 0.08),
    ([-0.07, -0.09, 0.0], 0.08),
    ([0.0, 0.11, -0.02], 0.11),
    ([0.03, -0.38, 0.0], 0.06),
    ([-0.03, -0.38, 0.0], 0.06),
    ([0.0, 0.13, 0.0], 0.12),
    ([-0.01, -0.40, -0.04], 0.045),
    ([0.01, -0.40, -0.04], 0.045),
    ([0.0, 0.06, 0.02], 0.12),
    ([0.02, -0.06, 0.12], 0.035),
    ([-0.02, -0.06, 0.12], 0.035),
    ([0.0, 0.21, -0.03], 0.05),
    ([0.08, 0.12, -0.01], 0.05),
    ([-0.08, 0.12, -0.01], 0.05),
    ([0.0, 0.09, 0.05], 0.09),
    ([0.11, 0.03, -0.01], 0.05),
    ([-0.11, 0.03, -0.01], 0.05),
    ([0.26, -0.01, -0.02], 0.04),
    ([-0.26, -0.01, -0.02], 0.04),
    ([0.25, 0.01, 0.0], 0.03),
    ([-0.25, 0.01, 0.0], 0.03),
    ([0.08, -0.01, -0.01], 0.03),
    ([-0.08, -0.01, -0.01], 0.03),
];

const ARM_JOINTS: [usize; 10] = [13, 14, 16, 17, 18, 19, 20, 21, 22, 23];

#[derive(Debug, Clone, PartialEq)]
pub struct BodyModel {
    /// V×3, row-major.
    template: Vec<f64>,
    /// V×3×B, row-major.
    shape_dirs: Vec<f64>,
    parents: Vec<Option<usize>>,
    /// N×V.
    joint_regressor: Vec<f64>,
    /// 14×V.
    lsp_regressor: Vec<f64>,
    /// V×N.
    skinning_weights: Vec<f64>,
    num_vertices: usize,
    num_shape: usize,
}

/// Posed body in the model's local frame (root joint at the origin).
#[derive(Debug, Clone)]
pub struct BodyPose {
    pub vertices: Vec<Vector3<f64>>,
    pub joints: Vec<Vector3<f64>>,
}

/// Device-resident copy of the model used by the differentiable forward.
#[derive(Debug, Clone)]
pub struct BodyTensors {
    template: Tensor,
    /// B × (V·3)
    shape_dirs: Tensor,
    joint_regressor: Tensor,
    lsp_regressor: Tensor,
    skinning_weights: Tensor,
    parents: Vec<Option<usize>>,
    num_vertices: usize,
}

impl BodyModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        template: Vec<f64>,
        shape_dirs: Vec<f64>,
        parents: Vec<Option<usize>>,
        joint_regressor: Vec<f64>,
        lsp_regressor: Vec<f64>,
        skinning_weights: Vec<f64>,
    ) -> Result<Self> {
        let n = parents.len();
        if template.len() % 3 != 0 || template.is_empty() {
            return Err(Error::InvalidBodyModel("template must be V×3".into()));
        }
        let v = template.len() / 3;
        if shape_dirs.len() % (v * 3) != 0 {
            return Err(shape_err("shape_dirs", format!("{v}x3xB"), shape_dirs.len()));
        }
        let b = shape_dirs.len() / (v * 3);
        if joint_regressor.len() != n * v {
            return Err(shape_err("joint_regressor", n * v, joint_regressor.len()));
        }
        if lsp_regressor.len() != NUM_LSP_JOINTS * v {
            return Err(shape_err("lsp_regressor", NUM_LSP_JOINTS * v, lsp_regressor.len()));
        }
        if skinning_weights.len() != v * n {
            return Err(shape_err("skinning_weights", v * n, skinning_weights.len()));
        }
        validate_tree(&parents)?;
        check_rows(&joint_regressor, v, "joint regressor")?;
        check_rows(&lsp_regressor, v, "LSP regressor")?;
        check_rows(&skinning_weights, n, "skinning weights")?;
        if template.iter().chain(&shape_dirs).any(|x| !x.is_finite()) {
            return Err(Error::InvalidBodyModel("non-finite template or shape dirs".into()));
        }
        Ok(Self {
            template,
            shape_dirs,
            parents,
            joint_regressor,
            lsp_regressor,
            skinning_weights,
            num_vertices: v,
            num_shape: b,
        })
    }

    /// Procedural stick-figure body with 120 vertices: a ring of four
    /// vertices around every joint, one vertex halfway along every bone, and
    /// a crown vertex above the head.
    pub fn procedural() -> Self {
        let n = NUM_BODY_JOINTS;
        let mut rest = vec![Vector3::zeros(); n];
        for j in 1..n {
            let p = SMPL_PARENTS[j].unwrap();
            rest[j] = rest[p] + Vector3::from(REST_LAYOUT[j].0);
        }

        let v_count = 5 * (n - 1) + 4 + 1;
        let mut template = vec![Vector3::zeros(); v_count];
        let mut weights = vec![0.0; v_count * n];
        let mut regressor = vec![0.0; n * v_count];
        // (bone owner joint, radial offset from its axis, ring center) per vertex
        let mut owner = vec![0usize; v_count];
        let mut radial = vec![Vector3::zeros(); v_count];

        for c in 1..n {
            let p = SMPL_PARENTS[c].unwrap();
            let dir = (rest[c] - rest[p]).normalize();
            let reference = if dir.z.abs() < 0.9 {
                Vector3::z()
            } else {
                Vector3::x()
            };
            let u = dir.cross(&reference).normalize();
            let w = dir.cross(&u);
            let r = REST_LAYOUT[c].1;
            let base = 5 * (c - 1);
            for (i, off) in [u * r, -u * r, w * r, -w * r].into_iter().enumerate() {
                template[base + i] = rest[c] + off;
                radial[base + i] = off;
                owner[base + i] = c;
                weights[(base + i) * n + p] = 0.5;
                weights[(base + i) * n + c] = 0.5;
                regressor[c * v_count + base + i] = 0.25;
            }
            let off = u * REST_LAYOUT[p].1.min(r) * 0.8;
            template[base + 4] = (rest[c] + rest[p]) / 2.0 + off;
            radial[base + 4] = off;
            owner[base + 4] = c;
            weights[(base + 4) * n + p] = 1.0;
        }
        let pelvis = 5 * (n - 1);
        let r0 = REST_LAYOUT[0].1;
        for (i, off) in [
            Vector3::x() * r0,
            -Vector3::x() * r0,
            Vector3::z() * r0,
            -Vector3::z() * r0,
        ]
        .into_iter()
        .enumerate()
        {
            template[pelvis + i] = off;
            radial[pelvis + i] = off;
            weights[(pelvis + i) * n] = 1.0;
            regressor[pelvis + i] = 0.25;
        }
        let crown = v_count - 1;
        template[crown] = rest[15] + Vector3::new(0.0, 0.11, 0.0);
        owner[crown] = 15;
        weights[crown * n + 15] = 1.0;

        let mut lsp = vec![0.0; NUM_LSP_JOINTS * v_count];
        for (row, &j) in LSP_FROM_SMPL.iter().enumerate() {
            lsp[row * v_count..(row + 1) * v_count]
                .copy_from_slice(&regressor[j * v_count..(j + 1) * v_count]);
        }
        lsp[13 * v_count + crown] = 1.0;

        // Shape directions: overall size, leg length, girth, torso length,
        // shoulder width, then five small seeded per-bone offsets.
        let b = NUM_SHAPE_PARAMS;
        let mut dirs = vec![0.0; v_count * 3 * b];
        let mut set = |v: usize, k: usize, d: Vector3<f64>| {
            for c in 0..3 {
                dirs[(v * 3 + c) * b + k] = d[c];
            }
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_b0d1);
        let random_offsets: Vec<Vec<Vector3<f64>>> = (0..5)
            .map(|_| {
                (0..n)
                    .map(|_| {
                        Vector3::new(
                            rng.random_range(-1.0..1.0),
                            rng.random_range(-1.0..1.0),
                            rng.random_range(-1.0..1.0),
                        ) * 0.01
                    })
                    .collect()
            })
            .collect();
        for (v, x) in template.iter().enumerate() {
            set(v, 0, x * 0.06);
            if x.y < 0.0 {
                set(v, 1, Vector3::new(0.0, 0.08 * x.y, 0.0));
            }
            set(v, 2, radial[v] * 0.3);
            if x.y > 0.0 {
                set(v, 3, Vector3::new(0.0, 0.06 * x.y, 0.0));
            }
            if ARM_JOINTS.contains(&owner[v]) {
                set(v, 4, Vector3::new(0.04 * x.x.signum(), 0.0, 0.0));
            }
            for (k, offsets) in random_offsets.iter().enumerate() {
                set(v, 5 + k, offsets[owner[v]]);
            }
        }

        Self::new(
            template.iter().flat_map(|v| [v.x, v.y, v.z]).collect(),
            dirs,
            SMPL_PARENTS.to_vec(),
            regressor,
            lsp,
            weights,
        )
        .expect("procedural body model is valid")
    }

    /// Loads SMPL-format parameters from a safetensors archive.
    ///
    /// Arrays (any float dtype; `kintree_parents` integer with -1 at the root):
    /// `v_template` V×3, `shapedirs` V×3×B, `J_regressor` N×V,
    /// `lsp_regressor` 14×V, `weights` V×N, `kintree_parents` N.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let tensors = candle_core::safetensors::load(path.as_ref(), &Device::Cpu)?;
        let get = |name: &str| -> Result<Vec<f64>> {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::InvalidBodyModel(format!("missing array `{name}`")))?;
            Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?)
        };
        let parents = get("kintree_parents")?
            .into_iter()
            .map(|p| if p < 0.0 { None } else { Some(p as usize) })
            .collect();
        Self::new(
            get("v_template")?,
            get("shapedirs")?,
            parents,
            get("J_regressor")?,
            get("lsp_regressor")?,
            get("weights")?,
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let (v, n, b) = (self.num_vertices, self.parents.len(), self.num_shape);
        let dev = Device::Cpu;
        let parents: Vec<i64> = self
            .parents
            .iter()
            .map(|p| p.map_or(-1, |p| p as i64))
            .collect();
        let tensors: HashMap<String, Tensor> = [
            ("v_template", Tensor::from_slice(&self.template, (v, 3), &dev)?),
            ("shapedirs", Tensor::from_slice(&self.shape_dirs, (v, 3, b), &dev)?),
            ("J_regressor", Tensor::from_slice(&self.joint_regressor, (n, v), &dev)?),
            (
                "lsp_regressor",
                Tensor::from_slice(&self.lsp_regressor, (NUM_LSP_JOINTS, v), &dev)?,
            ),
            ("weights", Tensor::from_slice(&self.skinning_weights, (v, n), &dev)?),
            ("kintree_parents", Tensor::from_vec(parents, n, &dev)?),
        ]
        .into_iter()
        .map(|(k, t)| (k.to_string(), t))
        .collect();
        candle_core::safetensors::save(&tensors, path.as_ref())?;
        Ok(())
    }

    pub fn num_vertices(&self) -> usize {
        self.num_vertices
    }

    pub fn num_joints(&self) -> usize {
        self.parents.len()
    }

    pub fn num_shape(&self) -> usize {
        self.num_shape
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parents
    }

    pub fn template(&self) -> Vec<Vector3<f64>> {
        self.template
            .chunks_exact(3)
            .map(|c| Vector3::new(c[0], c[1], c[2]))
            .collect()
    }

    /// Shape direction `k` as a per-vertex displacement.
    pub fn shape_dir(&self, k: usize) -> Vec<Vector3<f64>> {
        let b = self.num_shape;
        (0..self.num_vertices)
            .map(|v| {
                Vector3::new(
                    self.shape_dirs[(v * 3) * b + k],
                    self.shape_dirs[(v * 3 + 1) * b + k],
                    self.shape_dirs[(v * 3 + 2) * b + k],
                )
            })
            .collect()
    }

    pub fn joint_regressor(&self) -> &[f64] {
        &self.joint_regressor
    }

    pub fn lsp_regressor(&self) -> &[f64] {
        &self.lsp_regressor
    }

    pub fn skinning_weights(&self) -> &[f64] {
        &self.skinning_weights
    }

    /// Joints of the unposed body for shape `beta`, in model coordinates.
    pub fn rest_joints(&self, beta: &[f64]) -> Result<Vec<Vector3<f64>>> {
        let verts = self.shaped_vertices(beta)?;
        Ok(regress(&self.joint_regressor, &verts))
    }

    fn shaped_vertices(&self, beta: &[f64]) -> Result<Vec<Vector3<f64>>> {
        if beta.len() != self.num_shape {
            return Err(shape_err("beta", self.num_shape, beta.len()));
        }
        let b = self.num_shape;
        Ok((0..self.num_vertices)
            .map(|v| {
                let mut p = Vector3::new(
                    self.template[v * 3],
                    self.template[v * 3 + 1],
                    self.template[v * 3 + 2],
                );
                for c in 0..3 {
                    let row = &self.shape_dirs[(v * 3 + c) * b..(v * 3 + c + 1) * b];
                    p[c] += row.iter().zip(beta).map(|(d, s)| d * s).sum::<f64>();
                }
                p
            })
            .collect())
    }

    pub fn tensors(&self, device: &Device, dtype: DType) -> Result<BodyTensors> {
        let (v, n, b) = (self.num_vertices, self.parents.len(), self.num_shape);
        let load = |data: &[f64], shape: (usize, usize)| -> Result<Tensor> {
            Ok(Tensor::from_slice(data, shape, device)?.to_dtype(dtype)?)
        };
        Ok(BodyTensors {
            template: load(&self.template, (v, 3))?,
            shape_dirs: load(&self.shape_dirs, (v * 3, b))?.t()?.contiguous()?,
            joint_regressor: load(&self.joint_regressor, (n, v))?,
            lsp_regressor: load(&self.lsp_regressor, (NUM_LSP_JOINTS, v))?,
            skinning_weights: load(&self.skinning_weights, (v, n))?,
            parents: self.parents.clone(),
            num_vertices: v,
        })
    }

    /// Poses the body. `pose` holds one rotation per joint, relative to the
    /// parent joint; the result has the root joint at the origin.
    pub fn forward(&self, pose: &[Matrix3<f64>], beta: &[f64]) -> Result<BodyPose> {
        Ok(self.forward_frames(&[pose.to_vec()], beta)?.remove(0))
    }

    /// [`forward`](Self::forward) for several frames sharing one shape.
    pub fn forward_frames(&self, poses: &[Vec<Matrix3<f64>>], beta: &[f64]) -> Result<Vec<BodyPose>> {
        let n = self.num_joints();
        if beta.len() != self.num_shape {
            return Err(shape_err("beta", self.num_shape, beta.len()));
        }
        let mut flat = Vec::with_capacity(poses.len() * n * 9);
        for pose in poses {
            if pose.len() != n {
                return Err(shape_err("pose", n, pose.len()));
            }
            for r in pose {
                let dev = rotation_deviation(r);
                if !(dev < 1e-6) {
                    return Err(Error::NotRotation(dev));
                }
                for a in 0..3 {
                    for c in 0..3 {
                        flat.push(r[(a, c)]);
                    }
                }
            }
        }
        let m = poses.len();
        let dev = Device::Cpu;
        let bt = self.tensors(&dev, DType::F64)?;
        let rot = Tensor::from_vec(flat, (m, n, 3, 3), &dev)?;
        let betas = Tensor::from_slice(beta, (1, self.num_shape), &dev)?.repeat((m, 1))?;
        let (verts, joints) = bt.forward(&rot, &betas)?;
        let verts: Vec<Vec<Vec<f64>>> = verts.to_vec3()?;
        let joints: Vec<Vec<Vec<f64>>> = joints.to_vec3()?;
        let to_vecs =
            |rows: Vec<Vec<f64>>| rows.into_iter().map(|p| Vector3::new(p[0], p[1], p[2])).collect();
        Ok(verts
            .into_iter()
            .zip(joints)
            .map(|(v, j)| BodyPose {
                vertices: to_vecs(v),
                joints: to_vecs(j),
            })
            .collect())
    }

    /// LSP joints as a fixed linear combination of vertices.
    pub fn regress_joints_lsp(&self, vertices: &[Vector3<f64>]) -> Result<Vec<Vector3<f64>>> {
        if vertices.len() != self.num_vertices {
            return Err(shape_err("vertices", self.num_vertices, vertices.len()));
        }
        Ok(regress(&self.lsp_regressor, vertices))
    }
}

fn regress(regressor: &[f64], vertices: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
    regressor
        .chunks_exact(vertices.len())
        .map(|row| {
            row.iter()
                .zip(vertices)
                .fold(Vector3::zeros(), |acc, (w, v)| acc + v * *w)
        })
        .collect()
}

fn validate_tree(parents: &[Option<usize>]) -> Result<()> {
    if parents.is_empty() {
        return Err(Error::InvalidBodyModel("empty kinematic tree".into()));
    }
    if parents[0].is_some() {
        return Err(Error::InvalidBodyModel("joint 0 must be the root".into()));
    }
    for (j, p) in parents.iter().enumerate().skip(1) {
        // parents must precede children, which also rules out cycles
        match p {
            Some(p) if *p < j => {}
            Some(_) => {
                return Err(Error::InvalidBodyModel(format!(
                    "joint {j} is not preceded by its parent"
                )))
            }
            None => return Err(Error::InvalidBodyModel(format!("second root at joint {j}"))),
        }
    }
    Ok(())
}

fn check_rows(data: &[f64], width: usize, what: &str) -> Result<()> {
    for (i, row) in data.chunks_exact(width).enumerate() {
        if row.iter().any(|w| *w < 0.0 || !w.is_finite()) {
            return Err(Error::InvalidBodyModel(format!("{what} row {i} has negative weights")));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidBodyModel(format!("{what} row {i} sums to {s}")));
        }
    }
    Ok(())
}

impl BodyTensors {
    pub fn num_vertices(&self) -> usize {
        self.num_vertices
    }

    pub fn num_joints(&self) -> usize {
        self.parents.len()
    }

    /// Differentiable forward pass. `rotations` is (M, N, 3, 3), `beta` is
    /// (M, B); returns vertices (M, V, 3) and joints (M, N, 3) with the root
    /// joint at the origin.
    pub fn forward(&self, rotations: &Tensor, beta: &Tensor) -> Result<(Tensor, Tensor)> {
        let (m, n, _, _) = rotations.dims4()?;
        if n != self.parents.len() {
            return Err(shape_err("rotations", self.parents.len(), n));
        }
        let v = self.num_vertices;
        let offsets = beta.matmul(&self.shape_dirs)?.reshape((m, v, 3))?;
        let rest_v = offsets.broadcast_add(&self.template)?;
        let rest_j = self.joint_regressor.broadcast_matmul(&rest_v)?;

        let mut global_rot: Vec<Tensor> = Vec::with_capacity(n);
        let mut global_pos: Vec<Tensor> = Vec::with_capacity(n);
        for j in 0..n {
            let local = rotations.narrow(1, j, 1)?.squeeze(1)?;
            let joint = rest_j.narrow(1, j, 1)?.squeeze(1)?;
            match self.parents[j] {
                None => {
                    global_rot.push(local);
                    global_pos.push(joint);
                }
                Some(p) => {
                    let parent_joint = rest_j.narrow(1, p, 1)?.squeeze(1)?;
                    let bone = joint.sub(&parent_joint)?.unsqueeze(2)?;
                    let moved = global_rot[p].matmul(&bone)?.squeeze(2)?;
                    global_pos.push(global_pos[p].add(&moved)?);
                    global_rot.push(global_rot[p].matmul(&local)?);
                }
            }
        }
        let rot = Tensor::stack(&global_rot, 1)?.contiguous()?;
        let pos = Tensor::stack(&global_pos, 1)?.contiguous()?;
        let rest_rotated = rot.matmul(&rest_j.unsqueeze(3)?)?.squeeze(3)?;
        let trans = pos.sub(&rest_rotated)?;
        let affine = Tensor::cat(&[rot.reshape((m, n, 9))?, trans], 2)?;
        let blended = self.skinning_weights.broadcast_matmul(&affine)?;
        let blend_rot = blended.narrow(2, 0, 9)?.reshape((m, v, 3, 3))?;
        let blend_trans = blended.narrow(2, 9, 3)?;
        let posed = blend_rot
            .matmul(&rest_v.unsqueeze(3)?)?
            .squeeze(3)?
            .add(&blend_trans)?;

        let root = pos.narrow(1, 0, 1)?;
        let verts = posed.broadcast_sub(&root)?;
        let joints = pos.broadcast_sub(&root)?;
        Ok((verts, joints))
    }

    /// (M, V, 3) vertices → (M, 14, 3) LSP joints.
    pub fn lsp_joints(&self, vertices: &Tensor) -> Result<Tensor> {
        Ok(self.lsp_regressor.broadcast_matmul(vertices)?)
    }
}

/// Flattens (…, 3) rows into nalgebra vectors.
pub fn tensor_to_points(t: &Tensor) -> Result<Vec<Vector3<f64>>> {
    let flat: Vec<f64> = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    if t.dim(D::Minus1)? != 3 {
        return Err(shape_err("points", 3, t.dim(D::Minus1)?));
    }
    Ok(flat
        .chunks_exact(3)
        .map(|c| Vector3::new(c[0], c[1], c[2]))
        .collect())
}
