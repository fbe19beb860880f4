use candle_core::{DType, Device, Tensor};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::body_model::{tensor_to_points, BodyModel};
use crate::data_pipeline::{ingest_detections, DetectionFile, IngestedDetections};
use crate::error::{Error, Result};
use crate::global_fit::solve_translation;
use crate::lifting_net::{map_rotations, pose_body, LiftingNet};
use crate::motion_repr::OcclusionToken;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferredFrame {
    /// Joint rotations relative to the parent, row-major 3×3.
    pub pose: Vec<[f64; 9]>,
    /// Camera-space position of the root joint, meters.
    pub translation: [f64; 3],
    /// Camera-space LSP joints.
    pub joints: Vec<[f64; 3]>,
    /// Camera-space mesh vertices.
    pub vertices: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Inference {
    pub beta: Vec<f64>,
    pub frames: Vec<InferredFrame>,
    pub occluded_joints: usize,
    pub translation_converged: bool,
    /// Set when translations could not be recovered; outputs are then in
    /// the body's local frame.
    pub warning: Option<String>,
}

/// Window start frames covering `total` frames with windows of `len`; the
/// last window is aligned to the end when `total` is not a multiple.
fn windows(total: usize, len: usize) -> Vec<usize> {
    if total <= len {
        return vec![0];
    }
    let mut starts: Vec<usize> = (0..total - len + 1).step_by(len).collect();
    if starts.last() != Some(&(total - len)) {
        starts.push(total - len);
    }
    starts
}

/// Detections → network input → rotations and shape → body model →
/// translations. Sequences of any length are processed in windows of the
/// model's frame count; shorter ones are padded by repeating the last frame.
pub fn infer(
    net: &LiftingNet,
    body: &BodyModel,
    detections: &DetectionFile,
    cfg: &ExperimentConfig,
) -> Result<Inference> {
    let ing = ingest_detections(detections, cfg.eval.threshold, OcclusionToken([0.0, 0.0]))?;
    let total = ing.pixels.len();
    let f = net.config().frames;
    let k = net.config().joints;
    if ing.occluded.map.joints() != k {
        return Err(Error::ShapeMismatch {
            what: "detected joints",
            expected: k.to_string(),
            got: ing.occluded.map.joints().to_string(),
        });
    }
    let dev = Device::Cpu;
    let bt = body.tensors(&dev, DType::F32)?;

    let mut rotations = vec![Vec::new(); total];
    let mut local_verts = vec![Vec::new(); total];
    let mut local_lsp = vec![Vec::new(); total];
    let mut filled = vec![false; total];
    let mut betas = Vec::new();
    for start in windows(total, f) {
        let idx: Vec<usize> = (0..f).map(|i| (start + i).min(total - 1)).collect();
        let (map, mask) = window_tensors(&ing, &idx, k, &dev)?;
        let out = net.forward(&map, &mask)?;
        let map3d = out.map3d.to_dtype(DType::F64)?;
        let rots = map_rotations(&map3d, 0)?;
        let (verts, _) = pose_body(&bt, &out.map3d, &out.beta)?;
        let lsp = bt.lsp_joints(&verts)?;
        betas.push(out.beta.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?);
        for (i, &t) in idx.iter().enumerate() {
            if filled[t] {
                continue;
            }
            rotations[t] = rots[i].clone();
            local_verts[t] = tensor_to_points(&verts.get(i)?)?;
            local_lsp[t] = tensor_to_points(&lsp.get(i)?)?;
            filled[t] = true;
        }
    }
    let beta: Vec<f64> = (0..betas[0].len())
        .map(|j| betas.iter().map(|b| b[j]).sum::<f64>() / betas.len() as f64)
        .collect();
    if local_verts.iter().flatten().chain(local_lsp.iter().flatten()).any(|p| !p.iter().all(|v| v.is_finite())) {
        return Err(Error::Degenerate("network output is not finite"));
    }

    let (translations, converged, warning) =
        match solve_translation(&local_lsp, &ing.pixels, &ing.weights, &detections.intrinsics, &cfg.fit) {
            Ok(fit) => (fit.translations, fit.converged, None),
            Err(e @ (Error::Unsolvable(_) | Error::Degenerate(_))) => {
                (vec![Vector3::zeros(); total], false, Some(format!("translation not recovered: {e}")))
            }
            Err(e) => return Err(e),
        };
    let arr = |v: &Vector3<f64>| [v.x, v.y, v.z];
    let frames = (0..total)
        .map(|t| {
            let tr = translations[t];
            InferredFrame {
                pose: rotations[t]
                    .iter()
                    .map(|r| {
                        let mut m = [0.0; 9];
                        for a in 0..3 {
                            for b in 0..3 {
                                m[a * 3 + b] = r[(a, b)];
                            }
                        }
                        m
                    })
                    .collect(),
                translation: arr(&tr),
                joints: local_lsp[t].iter().map(|p| arr(&(p + tr))).collect(),
                vertices: local_verts[t].iter().map(|p| arr(&(p + tr))).collect(),
            }
        })
        .collect();
    Ok(Inference {
        beta,
        frames,
        occluded_joints: ing.occluded.mask.count(),
        translation_converged: converged,
        warning,
    })
}

fn window_tensors(ing: &IngestedDetections, idx: &[usize], k: usize, dev: &Device) -> Result<(Tensor, Tensor)> {
    let mut map = Vec::with_capacity(idx.len() * k * 2);
    let mut mask = Vec::with_capacity(idx.len() * k);
    for &t in idx {
        for j in 0..k {
            map.extend_from_slice(&ing.occluded.map.get(t, j));
            mask.push(if ing.occluded.mask.get(t, j) { 1f32 } else { 0.0 });
        }
    }
    let map: Vec<f32> = map.into_iter().map(|v| v as f32).collect();
    Ok((
        Tensor::from_vec(map, (1, idx.len(), k, 2), dev)?,
        Tensor::from_vec(mask, (1, idx.len(), k), dev)?,
    ))
}
