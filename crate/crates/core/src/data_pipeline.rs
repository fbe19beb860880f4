//! Synthetic motion generation, sample archives, batching and ingestion of
//! 2D detector output.

use std::collections::BTreeMap;
use std::f64::consts::{PI, TAU};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use nalgebra::{Matrix3, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::archive::{load_archive, save_archive};
use crate::body_model::{BodyModel, NUM_LSP_JOINTS};
use crate::error::{shape_err, Error, Result};
use crate::global_fit::CameraIntrinsics;
use crate::motion_repr::{
    apply_occlusion_token, axis_angle_to_matrix, denormalize_pose2d, normalize_pose2d, Bbox, Map2D, Map3D,
    OccludedMap2D, OcclusionMask, OcclusionToken,
};
use crate::occlusion_synth::{occlude_to_ratio, OcclusionConfig};

pub const SAMPLE_SCHEMA: &str = "occmocap.motion_sample";
pub const SAMPLE_VERSION: u32 = 1;
pub const DEFAULT_THRESHOLD: f64 = 0.6;
pub const BBOX_PAD: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub frames: usize,
    pub frame_rate: f64,
    /// Peak amplitude of each sinusoid, radians.
    pub amplitude: f64,
    pub max_harmonics: usize,
    /// Sinusoid frequencies, Hz.
    pub frequency_range: (f64, f64),
    /// Standard deviation of the sampled shape parameters.
    pub shape_std: f64,
    pub focal_range: (f64, f64),
    pub principal_point: [f64; 2],
    pub depth_range: (f64, f64),
    /// Horizontal drift speed bound, m/s.
    pub max_speed: f64,
    pub occlusion: OcclusionConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            frames: 16,
            frame_rate: 30.0,
            amplitude: 0.3,
            max_harmonics: 3,
            frequency_range: (0.3, 1.5),
            shape_std: 1.0,
            focal_range: (900.0, 1300.0),
            principal_point: [500.0, 500.0],
            depth_range: (4.0, 7.0),
            max_speed: 0.5,
            occlusion: OcclusionConfig::default(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("synth: {m}")));
        if self.frames == 0 {
            return bad("frames must be positive");
        }
        if !(self.frame_rate > 0.0) {
            return bad("frame_rate must be positive");
        }
        if !(self.amplitude >= 0.0) || self.max_harmonics > 3 {
            return bad("amplitude must be non-negative and max_harmonics at most 3");
        }
        if !(self.frequency_range.0 >= 0.0 && self.frequency_range.0 <= self.frequency_range.1) {
            return bad("invalid frequency_range");
        }
        if !(self.focal_range.0 > 0.0 && self.focal_range.0 <= self.focal_range.1) {
            return bad("invalid focal_range");
        }
        if !(self.depth_range.0 > 1.0 && self.depth_range.0 <= self.depth_range.1) {
            return bad("depth_range must start beyond 1 m");
        }
        if !(self.shape_std >= 0.0 && self.max_speed >= 0.0) {
            return bad("shape_std and max_speed must be non-negative");
        }
        self.occlusion.validate()
    }
}

/// One training or evaluation sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSample {
    /// Bbox-normalized LSP joints.
    pub clean2d: Map2D,
    /// `clean2d` with occluded joints replaced by the token.
    pub occluded: OccludedMap2D,
    pub gt3d: Map3D,
    pub beta: Vec<f64>,
    pub intrinsics: CameraIntrinsics,
    pub translations: Vec<Vector3<f64>>,
    pub bboxes: Vec<Bbox>,
    pub frame_rate: f64,
}

impl MotionSample {
    pub fn frames(&self) -> usize {
        self.clean2d.frames()
    }

    pub fn mask(&self) -> &OcclusionMask {
        &self.occluded.mask
    }

    /// Root-relative LSP joints of the ground truth, per frame.
    pub fn lsp_joints(&self, body: &BodyModel) -> Result<Vec<Vec<Vector3<f64>>>> {
        let poses = body.forward_frames(&self.gt3d.rotations()?, &self.beta)?;
        poses.iter().map(|p| body.regress_joints_lsp(&p.vertices)).collect()
    }

    /// LSP joints in camera coordinates, per frame.
    pub fn camera_joints(&self, body: &BodyModel) -> Result<Vec<Vec<Vector3<f64>>>> {
        Ok(self
            .lsp_joints(body)?
            .into_iter()
            .zip(&self.translations)
            .map(|(js, t)| js.into_iter().map(|j| j + t).collect())
            .collect())
    }

    /// Checks shapes and returns the largest pixel distance between the
    /// reprojected ground truth and the denormalized clean map.
    pub fn check_consistency(&self, body: &BodyModel) -> Result<f64> {
        let f = self.frames();
        let k = self.clean2d.joints();
        if k != NUM_LSP_JOINTS {
            return Err(shape_err("clean2d joints", NUM_LSP_JOINTS, k));
        }
        if self.occluded.map.frames() != f || self.occluded.map.joints() != k {
            return Err(shape_err("occluded map", format!("{f}x{k}"), format!("{}x{}", self.occluded.map.frames(), self.occluded.map.joints())));
        }
        if self.occluded.mask.frames() != f || self.occluded.mask.joints() != k {
            return Err(shape_err("mask", format!("{f}x{k}"), format!("{}x{}", self.occluded.mask.frames(), self.occluded.mask.joints())));
        }
        if self.gt3d.frames() != f || self.gt3d.joints() != body.num_joints() {
            return Err(shape_err("gt3d", format!("{f}x{}", body.num_joints()), format!("{}x{}", self.gt3d.frames(), self.gt3d.joints())));
        }
        if self.beta.len() != body.num_shape() {
            return Err(shape_err("beta", body.num_shape(), self.beta.len()));
        }
        if self.translations.len() != f || self.bboxes.len() != f {
            return Err(shape_err("per-frame tracks", f, self.translations.len().min(self.bboxes.len())));
        }
        let mut worst: f64 = 0.0;
        for (t, joints) in self.camera_joints(body)?.iter().enumerate() {
            let pixels = denormalize_pose2d(&self.clean2d.frame(t), &self.bboxes[t])?;
            for (j, p) in joints.iter().zip(pixels) {
                let q = self.intrinsics.project_point(j)?;
                worst = worst.max((q[0] - p[0]).hypot(q[1] - p[1]));
            }
        }
        Ok(worst)
    }

    /// Writes the sample as a safetensors archive (all arrays f64 except the
    /// u8 mask, little-endian).
    ///
    /// Arrays: `clean2d` F×K×2, `occluded2d` F×K×2, `mask` F×K, `gt3d`
    /// F×N×6, `beta` B, `intrinsics` 4 (fx fy cx cy), `translations` F×3,
    /// `bboxes` F×3 (cx cy scale), `frame_rate` 1.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let dev = Device::Cpu;
        let (f, k) = (self.frames(), self.clean2d.joints());
        let n = self.gt3d.joints();
        let mut t = BTreeMap::new();
        t.insert("clean2d".into(), Tensor::from_slice(self.clean2d.values(), (f, k, 2), &dev)?);
        t.insert("occluded2d".into(), Tensor::from_slice(self.occluded.map.values(), (f, k, 2), &dev)?);
        let mask: Vec<u8> = self.occluded.mask.flags().iter().map(|&b| u8::from(b)).collect();
        t.insert("mask".into(), Tensor::from_vec(mask, (f, k), &dev)?);
        t.insert("gt3d".into(), Tensor::from_slice(self.gt3d.values(), (f, n, 6), &dev)?);
        t.insert("beta".into(), Tensor::from_slice(&self.beta, self.beta.len(), &dev)?);
        let c = &self.intrinsics;
        let cam = [c.focal[0], c.focal[1], c.principal_point[0], c.principal_point[1]];
        t.insert("intrinsics".into(), Tensor::from_slice(&cam, 4, &dev)?);
        let tr: Vec<f64> = self.translations.iter().flat_map(|v| [v.x, v.y, v.z]).collect();
        t.insert("translations".into(), Tensor::from_vec(tr, (f, 3), &dev)?);
        let bb: Vec<f64> = self.bboxes.iter().flat_map(|b| [b.center[0], b.center[1], b.scale]).collect();
        t.insert("bboxes".into(), Tensor::from_vec(bb, (f, 3), &dev)?);
        t.insert("frame_rate".into(), Tensor::from_slice(&[self.frame_rate], 1, &dev)?);
        save_archive(path, SAMPLE_SCHEMA, SAMPLE_VERSION, &t, &BTreeMap::new())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let a = load_archive(path, SAMPLE_SCHEMA, SAMPLE_VERSION)?;
        let dims = |name: &str| -> Result<Vec<usize>> { Ok(a.tensor(name)?.dims().to_vec()) };
        let vals = |name: &str| -> Result<Vec<f64>> { Ok(a.tensor(name)?.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?) };
        let cd = dims("clean2d")?;
        let gd = dims("gt3d")?;
        if cd.len() != 3 || gd.len() != 3 {
            return Err(Error::Archive("clean2d and gt3d must be rank 3".into()));
        }
        let (f, k, n) = (cd[0], cd[1], gd[1]);
        let clean2d = Map2D::from_values(f, k, vals("clean2d")?)?;
        let flags = vals("mask")?.into_iter().map(|v| v != 0.0).collect();
        let mask = OcclusionMask::from_flags(f, k, flags)?;
        let occ_map = Map2D::from_values(f, k, vals("occluded2d")?)?;
        let gt3d = Map3D::from_values(f, n, vals("gt3d")?)?;
        let cam = vals("intrinsics")?;
        if cam.len() != 4 {
            return Err(shape_err("intrinsics", 4, cam.len()));
        }
        let intrinsics = CameraIntrinsics::new([cam[0], cam[1]], [cam[2], cam[3]])?;
        let tr = vals("translations")?;
        let bb = vals("bboxes")?;
        if tr.len() != 3 * f || bb.len() != 3 * f {
            return Err(shape_err("per-frame tracks", 3 * f, tr.len().min(bb.len())));
        }
        let translations = tr.chunks(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect();
        let bboxes = bb.chunks(3).map(|c| Bbox::new([c[0], c[1]], c[2])).collect::<Result<_>>()?;
        Ok(Self {
            clean2d,
            occluded: OccludedMap2D { map: occ_map, mask },
            gt3d,
            beta: vals("beta")?,
            intrinsics,
            translations,
            bboxes,
            frame_rate: vals("frame_rate")?.first().copied().unwrap_or(30.0),
        })
    }
}

/// Independent RNG stream for sample `index` of a dataset seeded with `seed`.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

struct Sinusoids {
    offset: Vector3<f64>,
    terms: Vec<(Vector3<f64>, f64, f64)>,
}

impl Sinusoids {
    fn sample(rng: &mut impl Rng, cfg: &SynthConfig, offset_scale: f64) -> Self {
        let offset = Vector3::from_fn(|_, _| rng.random_range(-1.0..=1.0) * offset_scale);
        let count = if cfg.max_harmonics == 0 { 0 } else { rng.random_range(1..=cfg.max_harmonics) };
        let terms = (0..count)
            .map(|_| {
                let amp = Vector3::from_fn(|_, _| rng.random_range(-1.0..=1.0) * cfg.amplitude);
                (amp, uniform(rng, cfg.frequency_range), rng.random_range(0.0..TAU))
            })
            .collect();
        Self { offset, terms }
    }

    fn at(&self, t: f64) -> Vector3<f64> {
        self.terms
            .iter()
            .fold(self.offset, |acc, (a, f, p)| acc + a * (TAU * f * t + p).sin())
    }
}

/// 180° about x: the body's up axis (+y) maps to the camera's up (−y).
pub fn camera_flip() -> Matrix3<f64> {
    Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0))
}

/// Draws one sequence: smooth joint-angle trajectories, a smooth translation
/// track, a random camera, projected and bbox-normalized LSP joints, and a
/// synthetic occlusion of the configured ratio.
pub fn generate_synthetic_motion(
    rng: &mut impl Rng,
    body: &BodyModel,
    cfg: &SynthConfig,
    token: OcclusionToken,
) -> Result<MotionSample> {
    cfg.validate()?;
    let (f, n) = (cfg.frames, body.num_joints());
    let focal = uniform(rng, cfg.focal_range);
    let intrinsics = CameraIntrinsics::new([focal, focal], cfg.principal_point)?;

    let joints: Vec<Sinusoids> = (1..n).map(|_| Sinusoids::sample(rng, cfg, cfg.amplitude)).collect();
    let tilt = Sinusoids::sample(rng, cfg, 0.3 * cfg.amplitude);
    let yaw0 = rng.random_range(-PI..PI);
    let yaw_rate = rng.random_range(-1.0..=1.0) * cfg.amplitude;
    let beta: Vec<f64> = (0..body.num_shape())
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            cfg.shape_std * z
        })
        .collect();

    let depth = uniform(rng, cfg.depth_range);
    let start = Vector3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.2..0.2), depth);
    let heading = rng.random_range(0.0..TAU);
    let speed = uniform(rng, (0.0, cfg.max_speed));
    let velocity = Vector3::new(speed * heading.cos(), 0.0, speed * heading.sin());
    let bob = rng.random_range(0.0..0.03);
    let bob_phase = rng.random_range(0.0..TAU);

    let mut rotations = Vec::with_capacity(f);
    let mut translations = Vec::with_capacity(f);
    for i in 0..f {
        let t = i as f64 / cfg.frame_rate;
        let yaw = axis_angle_to_matrix(&Vector3::new(0.0, yaw0 + yaw_rate * t, 0.0));
        let mut pose = vec![camera_flip() * yaw * axis_angle_to_matrix(&(0.5 * tilt.at(t)))];
        pose.extend(joints.iter().map(|s| axis_angle_to_matrix(&s.at(t))));
        rotations.push(pose);
        let sway = Vector3::new(0.0, bob * (TAU * 2.0 * t + bob_phase).sin(), 0.0);
        translations.push(start + velocity * t + sway);
    }

    let poses = body.forward_frames(&rotations, &beta)?;
    let mut frames2d = Vec::with_capacity(f);
    let mut bboxes = Vec::with_capacity(f);
    for (pose, tr) in poses.iter().zip(&translations) {
        let cam: Vec<Vector3<f64>> = body
            .regress_joints_lsp(&pose.vertices)?
            .into_iter()
            .map(|j| j + tr)
            .collect();
        let pixels = crate::global_fit::project(&intrinsics, &cam)?;
        let bbox = Bbox::enclosing(&pixels, BBOX_PAD)?;
        frames2d.push(normalize_pose2d(&pixels, &bbox)?);
        bboxes.push(bbox);
    }
    let clean2d = Map2D::from_frames(&frames2d)?;
    let (_, occluded) = occlude_to_ratio(&clean2d, &cfg.occlusion, token, rng);
    Ok(MotionSample {
        clean2d,
        occluded,
        gt3d: Map3D::from_rotations(&rotations)?,
        beta,
        intrinsics,
        translations,
        bboxes,
        frame_rate: cfg.frame_rate,
    })
}

/// `count` samples; sample `i` uses stream `i` of `seed`, so any subset can
/// be regenerated independently.
pub fn generate_dataset(
    body: &BodyModel,
    cfg: &SynthConfig,
    seed: u64,
    count: usize,
    token: OcclusionToken,
) -> Result<Vec<MotionSample>> {
    (0..count)
        .map(|i| generate_synthetic_motion(&mut sample_rng(seed, i as u64), body, cfg, token))
        .collect()
}

pub fn save_dataset(samples: &[MotionSample], dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let p = dir.join(format!("sample_{i:06}.safetensors"));
            s.save(&p)?;
            Ok(p)
        })
        .collect()
}

/// Loads every `*.safetensors` sample in `dir`, in file-name order.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<MotionSample>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir.as_ref())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "safetensors"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Archive(format!("no samples in {}", dir.as_ref().display())));
    }
    paths.iter().map(MotionSample::load).collect()
}

/// Index batches over `len` samples. Order is shuffled with `shuffle_seed`
/// when given; the last batch may be short.
pub fn make_batches(len: usize, batch_size: usize, shuffle_seed: Option<u64>) -> Result<Vec<Vec<usize>>> {
    if len == 0 {
        return Err(Error::Degenerate("cannot batch an empty sample set"));
    }
    if batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..len).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Stacked network inputs and targets for a batch of samples.
#[derive(Debug, Clone)]
pub struct BatchTensors {
    /// (B, F, K, 2) clean normalized maps.
    pub clean: Tensor,
    /// (B, F, K), 1 = occluded.
    pub mask: Tensor,
    /// (B, F, N, 6).
    pub gt3d: Tensor,
    /// (B, shape_params).
    pub beta: Tensor,
}

pub fn batch_tensors(samples: &[&MotionSample], device: &Device, dtype: DType) -> Result<BatchTensors> {
    let masks: Vec<&OcclusionMask> = samples.iter().map(|s| s.mask()).collect();
    let first = samples.first().ok_or(Error::Degenerate("empty batch"))?;
    let (f, k, n, s) = (first.frames(), first.clean2d.joints(), first.gt3d.joints(), first.beta.len());
    let b = samples.len();
    let mut clean = Vec::with_capacity(b * f * k * 2);
    let mut gt = Vec::with_capacity(b * f * n * 6);
    let mut beta = Vec::with_capacity(b * s);
    for x in samples {
        if x.frames() != f || x.clean2d.joints() != k || x.gt3d.joints() != n || x.beta.len() != s {
            return Err(shape_err("batch sample", format!("F={f} K={k} N={n} B={s}"), "a different layout"));
        }
        clean.extend_from_slice(x.clean2d.values());
        gt.extend_from_slice(x.gt3d.values());
        beta.extend_from_slice(&x.beta);
    }
    Ok(BatchTensors {
        clean: Tensor::from_vec(clean, (b, f, k, 2), device)?.to_dtype(dtype)?,
        mask: mask_tensor(&masks, device, dtype)?,
        gt3d: Tensor::from_vec(gt, (b, f, n, 6), device)?.to_dtype(dtype)?,
        beta: Tensor::from_vec(beta, (b, s), device)?.to_dtype(dtype)?,
    })
}

pub fn mask_tensor(masks: &[&OcclusionMask], device: &Device, dtype: DType) -> Result<Tensor> {
    let first = masks.first().ok_or(Error::Degenerate("empty batch"))?;
    let (f, k) = (first.frames(), first.joints());
    let mut flat = Vec::with_capacity(masks.len() * f * k);
    for m in masks {
        if m.frames() != f || m.joints() != k {
            return Err(shape_err("mask", format!("{f}x{k}"), format!("{}x{}", m.frames(), m.joints())));
        }
        flat.extend(m.flags().iter().map(|&b| if b { 1.0 } else { 0.0 }));
    }
    Ok(Tensor::from_vec(flat, (masks.len(), f, k), device)?.to_dtype(dtype)?)
}

/// 2D detector output for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionFrame {
    /// (x, y, confidence) per joint, pixels.
    pub joints: Vec<[f64; 3]>,
    /// Externally provided crop; derived from the visible joints otherwise.
    pub bbox: Option<Bbox>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionFile {
    pub intrinsics: CameraIntrinsics,
    pub frames: Vec<DetectionFrame>,
}

impl DetectionFile {
    pub fn joints(&self) -> usize {
        self.frames.first().map_or(0, |f| f.joints.len())
    }

    /// Parses the line-oriented text format:
    ///
    /// ```text
    /// joints 14
    /// frames 2
    /// intrinsics 1000 1000 500 500
    /// frame 0
    /// bbox 480 510 320        (optional)
    /// 512.3 300.1 0.93        (K lines: x y confidence)
    /// ...
    /// ```
    ///
    /// Blank lines and lines starting with `#` are ignored.
    pub fn parse(text: &str, path: Option<&Path>) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse {
            path: path.map(Path::to_path_buf),
            line,
            msg,
        };
        let lines: Vec<(usize, &str)> = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
            .collect();
        let mut pos = 0usize;
        let next = |pos: &mut usize| {
            let line = lines.get(*pos).copied();
            *pos += usize::from(line.is_some());
            line
        };
        let last_line = text.lines().count().max(1);

        let header = |pos: &mut usize, key: &str| -> Result<(usize, Vec<f64>)> {
            let (no, line) = next(pos)
                .ok_or_else(|| err(last_line, format!("missing `{key}` header")))?;
            let mut parts = line.split_whitespace();
            if parts.next() != Some(key) {
                return Err(err(no, format!("expected `{key}`, found `{line}`")));
            }
            let vals = parts
                .map(|p| p.parse::<f64>().map_err(|_| err(no, format!("`{p}` is not a number"))))
                .collect::<Result<Vec<_>>>()?;
            Ok((no, vals))
        };
        let count = |no: usize, v: &[f64], key: &str| -> Result<usize> {
            match v {
                [x] if *x >= 1.0 && x.fract() == 0.0 => Ok(*x as usize),
                _ => Err(err(no, format!("`{key}` takes one positive integer"))),
            }
        };
        let (no, v) = header(&mut pos, "joints")?;
        let k = count(no, &v, "joints")?;
        let (no, v) = header(&mut pos, "frames")?;
        let f = count(no, &v, "frames")?;
        let (no, v) = header(&mut pos, "intrinsics")?;
        if v.len() != 4 {
            return Err(err(no, "`intrinsics` takes fx fy cx cy".into()));
        }
        let intrinsics = CameraIntrinsics::new([v[0], v[1]], [v[2], v[3]]).map_err(|e| err(no, e.to_string()))?;

        let mut frames = Vec::with_capacity(f);
        for t in 0..f {
            let (no, v) = header(&mut pos, "frame")?;
            if v.len() != 1 || v[0] != t as f64 {
                return Err(err(no, format!("expected `frame {t}`")));
            }
            let bbox = match lines.get(pos) {
                Some(&(no, l)) if l.starts_with("bbox") => {
                    let (_, v) = header(&mut pos, "bbox")?;
                    if v.len() != 3 {
                        return Err(err(no, "`bbox` takes cx cy scale".into()));
                    }
                    Some(Bbox::new([v[0], v[1]], v[2]).map_err(|e| err(no, e.to_string()))?)
                }
                _ => None,
            };
            let mut joints = Vec::with_capacity(k);
            for j in 0..k {
                let (no, line) = next(&mut pos)
                    .ok_or_else(|| err(last_line, format!("frame {t}: expected {k} joints, found {j}")))?;
                let vals = line
                    .split_whitespace()
                    .map(|p| p.parse::<f64>().map_err(|_| err(no, format!("frame {t}: `{p}` is not a number"))))
                    .collect::<Result<Vec<_>>>()?;
                let [x, y, c] = vals[..] else {
                    return Err(err(no, format!("frame {t}, joint {j}: expected `x y confidence`")));
                };
                if !(x.is_finite() && y.is_finite()) {
                    return Err(err(no, format!("frame {t}, joint {j}: non-finite coordinate")));
                }
                if !(0.0..=1.0).contains(&c) {
                    return Err(err(no, format!("frame {t}, joint {j}: confidence {c} outside [0, 1]")));
                }
                joints.push([x, y, c]);
            }
            frames.push(DetectionFrame { joints, bbox });
        }
        if let Some((no, line)) = next(&mut pos) {
            return Err(err(no, format!("unexpected trailing content `{line}`")));
        }
        Ok(Self { intrinsics, frames })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, Some(path))
    }

    pub fn to_text(&self) -> String {
        let c = &self.intrinsics;
        let mut s = String::new();
        let _ = writeln!(s, "joints {}", self.joints());
        let _ = writeln!(s, "frames {}", self.frames.len());
        let _ = writeln!(
            s,
            "intrinsics {} {} {} {}",
            c.focal[0], c.focal[1], c.principal_point[0], c.principal_point[1]
        );
        for (t, fr) in self.frames.iter().enumerate() {
            let _ = writeln!(s, "frame {t}");
            if let Some(b) = fr.bbox {
                let _ = writeln!(s, "bbox {} {} {}", b.center[0], b.center[1], b.scale);
            }
            for j in &fr.joints {
                let _ = writeln!(s, "{} {} {}", j[0], j[1], j[2]);
            }
        }
        s
    }
}

/// Detections turned into network input.
#[derive(Debug, Clone, PartialEq)]
pub struct IngestedDetections {
    pub occluded: OccludedMap2D,
    pub bboxes: Vec<Bbox>,
    /// Detected joints, pixels.
    pub pixels: Vec<Vec<[f64; 2]>>,
    /// Per-joint confidences, zeroed where the joint counts as occluded.
    pub weights: Vec<Vec<f64>>,
}

/// Marks joints with confidence strictly below `threshold` as occluded,
/// normalizes each frame by its bbox and writes the token into occluded
/// joints.
///
/// Frames without a provided bbox use the box around their visible joints,
/// padded 20%; frames with no visible joint borrow the nearest frame's box.
pub fn ingest_detections(file: &DetectionFile, threshold: f64, token: OcclusionToken) -> Result<IngestedDetections> {
    let f = file.frames.len();
    let k = file.joints();
    if f == 0 || k == 0 {
        return Err(Error::Degenerate("detection file has no frames or joints"));
    }
    if file.frames.iter().any(|fr| fr.joints.len() != k) {
        return Err(shape_err("detection joints per frame", k, "a different count"));
    }
    let mut mask = OcclusionMask::none(f, k);
    let mut own: Vec<Option<Bbox>> = Vec::with_capacity(f);
    for (t, fr) in file.frames.iter().enumerate() {
        let mut visible = Vec::new();
        for (j, p) in fr.joints.iter().enumerate() {
            if p[2] < threshold {
                mask.set(t, j, true);
            } else {
                visible.push([p[0], p[1]]);
            }
        }
        own.push(match fr.bbox {
            Some(b) => Some(b),
            None if !visible.is_empty() => Some(Bbox::enclosing(&visible, BBOX_PAD)?),
            None => None,
        });
    }
    let known: Vec<usize> = (0..f).filter(|&t| own[t].is_some()).collect();
    if known.is_empty() {
        return Err(Error::Degenerate("no frame has a visible joint or a bbox"));
    }
    let bboxes: Vec<Bbox> = (0..f)
        .map(|t| {
            let nearest = known
                .iter()
                .min_by_key(|&&s| (s as i64 - t as i64).unsigned_abs())
                .expect("non-empty");
            own[t].unwrap_or_else(|| own[*nearest].expect("known frame"))
        })
        .collect();

    let pixels: Vec<Vec<[f64; 2]>> = file
        .frames
        .iter()
        .map(|fr| fr.joints.iter().map(|p| [p[0], p[1]]).collect())
        .collect();
    let normalized = pixels
        .iter()
        .zip(&bboxes)
        .map(|(p, b)| normalize_pose2d(p, b))
        .collect::<Result<Vec<_>>>()?;
    let map = Map2D::from_frames(&normalized)?;
    let weights = file
        .frames
        .iter()
        .enumerate()
        .map(|(t, fr)| {
            fr.joints
                .iter()
                .enumerate()
                .map(|(j, p)| if mask.get(t, j) { 0.0 } else { p[2] })
                .collect()
        })
        .collect();
    Ok(IngestedDetections {
        occluded: apply_occlusion_token(&map, &mask, token)?,
        bboxes,
        pixels,
        weights,
    })
}

/// Renders a sample's clean projections as a detection file, with
/// confidence 1 for visible joints and `occluded_confidence` for masked ones.
pub fn sample_to_detections(sample: &MotionSample, occluded_confidence: f64) -> Result<DetectionFile> {
    let frames = (0..sample.frames())
        .map(|t| {
            let px = denormalize_pose2d(&sample.clean2d.frame(t), &sample.bboxes[t])?;
            Ok(DetectionFrame {
                joints: px
                    .iter()
                    .enumerate()
                    .map(|(j, p)| {
                        let c = if sample.mask().get(t, j) { occluded_confidence } else { 1.0 };
                        [p[0], p[1], c]
                    })
                    .collect(),
                bbox: None,
            })
        })
        .collect::<Result<_>>()?;
    Ok(DetectionFile {
        intrinsics: sample.intrinsics,
        frames,
    })
}
