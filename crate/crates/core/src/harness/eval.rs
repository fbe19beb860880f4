use candle_core::{DType, Device, Tensor};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::body_model::{tensor_to_points, BodyModel, BodyTensors};
use crate::data_pipeline::{batch_tensors, mask_tensor, sample_rng, MotionSample};
use crate::error::{Error, Result};
use crate::lifting_net::{pose_body, LiftingNet};
use crate::metrics::{accel_error, mpjpe, pa_mpjpe, pve, Root, LSP_PELVIS};
use crate::motion_repr::{OcclusionMask, OcclusionToken};
use crate::occlusion_synth::{occlude_to_ratio, OcclusionConfig};
use crate::prior_net::{loss_self, PriorNet};

/// Masks at `ratio` for an evaluation set. They depend on (seed, sample
/// index) only, so every model variant sees the same occlusions.
pub fn eval_masks(samples: &[MotionSample], occlusion: &OcclusionConfig, ratio: f64, seed: u64) -> Vec<OcclusionMask> {
    let cfg = occlusion.with_ratio(ratio);
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = sample_rng(seed ^ 0x6576_616c, i as u64);
            occlude_to_ratio(&s.clean2d, &cfg, OcclusionToken([0.0, 0.0]), &mut rng).1.mask
        })
        .collect()
}

/// Per-sequence network output, posed through the body model.
#[derive(Debug, Clone)]
pub struct Prediction {
    /// F×N×6, row-major.
    pub map3d: Vec<f64>,
    pub beta: Vec<f64>,
    /// Root-relative vertices per frame.
    pub vertices: Vec<Vec<Vector3<f64>>>,
    /// Root-relative LSP joints per frame.
    pub lsp: Vec<Vec<Vector3<f64>>>,
}

fn split_frames(points: Vec<Vector3<f64>>, frames: usize) -> Vec<Vec<Vector3<f64>>> {
    let per = points.len() / frames;
    points.chunks(per).map(<[_]>::to_vec).collect()
}

fn posed(body: &BodyTensors, map3d: &Tensor, beta: &Tensor) -> Result<Vec<(Vec<Vec<Vector3<f64>>>, Vec<Vec<Vector3<f64>>>)>> {
    let (b, f, _, _) = map3d.dims4()?;
    let (verts, _) = pose_body(body, map3d, beta)?;
    let lsp = body.lsp_joints(&verts)?;
    let v = verts.dims()[1];
    let k = lsp.dims()[1];
    (0..b)
        .map(|i| {
            let vi = tensor_to_points(&verts.narrow(0, i * f, f)?)?;
            let li = tensor_to_points(&lsp.narrow(0, i * f, f)?)?;
            debug_assert_eq!(vi.len(), f * v);
            debug_assert_eq!(li.len(), f * k);
            Ok((split_frames(vi, f), split_frames(li, f)))
        })
        .collect()
}

pub fn predict(
    net: &LiftingNet,
    body: &BodyModel,
    samples: &[MotionSample],
    masks: &[OcclusionMask],
    batch_size: usize,
) -> Result<Vec<Prediction>> {
    if samples.len() != masks.len() {
        return Err(Error::Degenerate("one mask per sample required"));
    }
    let dev = Device::Cpu;
    let bt = body.tensors(&dev, DType::F32)?;
    let mut out = Vec::with_capacity(samples.len());
    for (chunk, mchunk) in samples.chunks(batch_size.max(1)).zip(masks.chunks(batch_size.max(1))) {
        let refs: Vec<&MotionSample> = chunk.iter().collect();
        let b = batch_tensors(&refs, &dev, DType::F32)?;
        let mask = mask_tensor(&mchunk.iter().collect::<Vec<_>>(), &dev, DType::F32)?;
        let o = net.forward(&b.clean, &mask)?;
        let maps: Vec<f64> = o.map3d.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        let betas: Vec<Vec<f64>> = o.beta.to_dtype(DType::F64)?.to_vec2()?;
        if maps.iter().any(|v| !v.is_finite()) || betas.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Degenerate("network output is not finite"));
        }
        let per = maps.len() / chunk.len();
        for (i, (verts, lsp)) in posed(&bt, &o.map3d, &o.beta)?.into_iter().enumerate() {
            out.push(Prediction {
                map3d: maps[i * per..(i + 1) * per].to_vec(),
                beta: betas[i].clone(),
                vertices: verts,
                lsp,
            });
        }
    }
    Ok(out)
}

/// Ground-truth vertices and LSP joints per sample, root-relative.
pub fn ground_truth(body: &BodyModel, samples: &[MotionSample]) -> Result<Vec<(Vec<Vec<Vector3<f64>>>, Vec<Vec<Vector3<f64>>>)>> {
    let dev = Device::Cpu;
    let bt = body.tensors(&dev, DType::F64)?;
    samples
        .iter()
        .map(|s| {
            let (f, n) = (s.frames(), s.gt3d.joints());
            let map = Tensor::from_slice(s.gt3d.values(), (1, f, n, 6), &dev)?;
            let beta = Tensor::from_slice(&s.beta, (1, s.beta.len()), &dev)?;
            Ok(posed(&bt, &map, &beta)?.remove(0))
        })
        .collect()
}

/// Errors in mm (mm/frame² for acceleration), averaged over sequences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sequences: usize,
    pub occlusion_ratio: f64,
    pub mpjpe: f64,
    pub pa_mpjpe: f64,
    pub pve: f64,
    pub accel: f64,
}

fn pelvis(seq: &[Vec<Vector3<f64>>]) -> Vec<Vector3<f64>> {
    seq.iter()
        .map(|f| LSP_PELVIS.iter().map(|&i| f[i]).sum::<Vector3<f64>>() / LSP_PELVIS.len() as f64)
        .collect()
}

/// Scores predictions against ground truth. Joints are the 14 LSP joints
/// and vertices the full mesh, both aligned at the LSP pelvis.
pub fn score(
    predictions: &[Prediction],
    truth: &[(Vec<Vec<Vector3<f64>>>, Vec<Vec<Vector3<f64>>>)],
    masks: &[OcclusionMask],
) -> Result<EvalReport> {
    if predictions.is_empty() || predictions.len() != truth.len() {
        return Err(Error::Degenerate("predictions and ground truth must be non-empty and paired"));
    }
    let mut acc = [0.0; 4];
    for (p, (gv, gl)) in predictions.iter().zip(truth) {
        let (pp, gp) = (pelvis(&p.lsp), pelvis(gl));
        acc[0] += mpjpe(&p.lsp, gl, Root::Mean(LSP_PELVIS))?;
        acc[1] += pa_mpjpe(&p.lsp, gl)?;
        acc[2] += pve(&p.vertices, gv, Root::Given { pred: &pp, gt: &gp })?;
        acc[3] += if gl.len() >= 3 { accel_error(&p.lsp, gl)? } else { 0.0 };
    }
    let n = predictions.len() as f64;
    let ratio = masks.iter().map(OcclusionMask::ratio).sum::<f64>() / masks.len().max(1) as f64;
    Ok(EvalReport {
        sequences: predictions.len(),
        occlusion_ratio: ratio,
        mpjpe: acc[0] / n,
        pa_mpjpe: acc[1] / n,
        pve: acc[2] / n,
        accel: acc[3] / n,
    })
}

pub fn evaluate(
    net: &LiftingNet,
    body: &BodyModel,
    samples: &[MotionSample],
    masks: &[OcclusionMask],
    batch_size: usize,
) -> Result<EvalReport> {
    let preds = predict(net, body, samples, masks, batch_size)?;
    score(&preds, &ground_truth(body, samples)?, masks)
}

/// Masked reconstruction error (normalized units) of the prior.
pub fn evaluate_prior(prior: &PriorNet, samples: &[MotionSample], masks: &[OcclusionMask], batch_size: usize) -> Result<f64> {
    let dev = Device::Cpu;
    let (mut total, mut count) = (0.0, 0.0);
    for (chunk, mchunk) in samples.chunks(batch_size.max(1)).zip(masks.chunks(batch_size.max(1))) {
        let refs: Vec<&MotionSample> = chunk.iter().collect();
        let b = batch_tensors(&refs, &dev, DType::F32)?;
        let mask = mask_tensor(&mchunk.iter().collect::<Vec<_>>(), &dev, DType::F32)?;
        let out = prior.forward(&b.clean, &mask)?;
        let masked: f64 = mchunk.iter().map(|m| m.count() as f64).sum();
        let l = loss_self(&out.pred, &b.clean, &mask)?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        total += l * masked;
        count += masked;
    }
    Ok(if count > 0.0 { total / count } else { 0.0 })
}
