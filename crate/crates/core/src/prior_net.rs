//! Self-supervised spatial-temporal motion prior.
//!
//! An occluded 2D motion map (B, F, K, 2) passes through three parallel
//! dilated 3×3 convolutions over the frame × joint grid (the ST layer), a
//! transformer across the K joints of each frame, a transformer across the
//! F frames on flattened K·D features, and a LayerNorm + linear head that
//! regresses the full 2D map.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::body_model::{NUM_BODY_JOINTS, NUM_LSP_JOINTS, NUM_SHAPE_PARAMS};
use crate::error::{shape_err, Error, Result};
use crate::motion_repr::{apply_token_tensor, Map2D, OcclusionMask};
use crate::nn::{Conv2d, Init, LayerNorm, Linear, ParamStore, Transformer};

/// How occluded pixels are filled before the network sees them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenMode {
    /// A trainable 2-vector shared by all joints and frames.
    Learned,
    /// Constant zero (the baseline without an occlusion token).
    ZeroFill,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub frames: usize,
    pub joints: usize,
    pub dilations: [usize; 3],
    pub branch_channels: usize,
    pub kernel: usize,
    pub spatial_depth: usize,
    pub spatial_heads: usize,
    pub temporal_depth: usize,
    pub temporal_heads: usize,
    pub mlp_ratio: f64,
    pub token: TokenMode,
    /// Starting value of the learned token, in normalized map units.
    pub token_init: [f64; 2],
    pub body_joints: usize,
    pub shape_params: usize,
    pub head_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            frames: 16,
            joints: NUM_LSP_JOINTS,
            dilations: [1, 2, 5],
            branch_channels: 16,
            kernel: 3,
            spatial_depth: 2,
            spatial_heads: 4,
            temporal_depth: 2,
            temporal_heads: 4,
            mlp_ratio: 2.0,
            token: TokenMode::Learned,
            token_init: [0.0, 0.0],
            body_joints: NUM_BODY_JOINTS,
            shape_params: NUM_SHAPE_PARAMS,
            head_hidden: 256,
        }
    }
}

impl ModelConfig {
    /// Width of each ST-layer feature pixel.
    pub fn feature_dim(&self) -> usize {
        3 * self.branch_channels
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(format!("model: {m}")));
        if self.frames == 0 || self.joints == 0 || self.branch_channels == 0 {
            return bad("frames, joints and branch_channels must be positive".into());
        }
        if self.kernel % 2 == 0 {
            return bad("kernel must be odd".into());
        }
        let d = self.feature_dim();
        if self.spatial_heads == 0 || d % self.spatial_heads != 0 {
            return bad(format!("feature dim {d} not divisible by spatial_heads"));
        }
        let td = self.joints * d;
        if self.temporal_heads == 0 || td % self.temporal_heads != 0 {
            return bad(format!("temporal width {td} not divisible by temporal_heads"));
        }
        Ok(())
    }
}

/// Three parallel dilated convolutions, concatenated on the channel axis.
#[derive(Debug, Clone)]
pub struct StLayer {
    branches: Vec<Conv2d>,
}

impl StLayer {
    pub fn new(ps: &mut ParamStore, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let branches = cfg
            .dilations
            .iter()
            .enumerate()
            .map(|(i, &d)| Conv2d::new(ps, &format!("{name}.conv{i}"), 2, cfg.branch_channels, cfg.kernel, d))
            .collect::<Result<_>>()?;
        Ok(Self { branches })
    }

    /// (B, F, K, 2) → (B, F, K, 3·C).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let img = x.permute((0, 3, 1, 2))?.contiguous()?;
        let outs = self
            .branches
            .iter()
            .map(|c| c.forward(&img))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&outs, 1)?.permute((0, 2, 3, 1))?.contiguous()?)
    }
}

/// Per-joint transformer applied independently to every frame.
#[derive(Debug, Clone)]
pub struct SpatialEncoder {
    position: Tensor,
    transformer: Transformer,
}

impl SpatialEncoder {
    pub fn new(ps: &mut ParamStore, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.feature_dim();
        Ok(Self {
            position: ps.create(&format!("{name}.pos"), &[cfg.joints, d], Init::Normal(0.02))?,
            transformer: Transformer::new(
                ps,
                &format!("{name}.transformer"),
                d,
                cfg.spatial_depth,
                cfg.spatial_heads,
                cfg.mlp_ratio,
            )?,
        })
    }

    /// (B, F, K, D) → (B, F, K, D).
    pub fn forward(&self, f: &Tensor) -> Result<Tensor> {
        let (b, fr, k, d) = f.dims4()?;
        let tokens = f.broadcast_add(&self.position)?.reshape((b * fr, k, d))?;
        Ok(self.transformer.forward(&tokens)?.reshape((b, fr, k, d))?)
    }
}

#[derive(Debug, Clone)]
pub struct PriorOutput {
    /// Reconstructed full map (B, F, K, 2).
    pub pred: Tensor,
    /// Temporal-transformer features before the head, (B, F, K·D).
    pub features: Tensor,
}

#[derive(Debug, Clone)]
pub struct PriorNet {
    cfg: ModelConfig,
    token: Tensor,
    st: StLayer,
    spatial: SpatialEncoder,
    temporal_pos: Tensor,
    temporal: Transformer,
    head_norm: LayerNorm,
    head: Linear,
}

impl PriorNet {
    /// Registers parameters under `prior.*`.
    pub fn new(ps: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.feature_dim();
        let td = cfg.joints * d;
        let token = match cfg.token {
            TokenMode::Learned => ps.create("prior.token", &[2], Init::Value(cfg.token_init.to_vec()))?,
            TokenMode::ZeroFill => Tensor::zeros(2, ps.dtype(), ps.device())?,
        };
        Ok(Self {
            cfg: cfg.clone(),
            token,
            st: StLayer::new(ps, "prior.st", cfg)?,
            spatial: SpatialEncoder::new(ps, "prior.spatial", cfg)?,
            temporal_pos: ps.create("prior.temporal.pos", &[cfg.frames, td], Init::Normal(0.02))?,
            temporal: Transformer::new(
                ps,
                "prior.temporal.transformer",
                td,
                cfg.temporal_depth,
                cfg.temporal_heads,
                cfg.mlp_ratio,
            )?,
            head_norm: LayerNorm::new(ps, "prior.head.norm", td)?,
            head: Linear::new(ps, "prior.head.fc", td, cfg.joints * 2)?,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn token(&self) -> &Tensor {
        &self.token
    }

    pub fn token_value(&self) -> Result<[f64; 2]> {
        let v: Vec<f64> = self.token.to_dtype(candle_core::DType::F64)?.to_vec1()?;
        Ok([v[0], v[1]])
    }

    fn check_input(&self, map: &Tensor, mask: &Tensor) -> Result<()> {
        let (_, f, k, c) = map.dims4()?;
        if (f, k, c) != (self.cfg.frames, self.cfg.joints, 2) {
            return Err(shape_err(
                "prior input",
                format!("(B, {}, {}, 2)", self.cfg.frames, self.cfg.joints),
                format!("{:?}", map.dims()),
            ));
        }
        if mask.dims() != &map.dims()[..3] {
            return Err(shape_err("prior mask", format!("{:?}", &map.dims()[..3]), format!("{:?}", mask.dims())));
        }
        Ok(())
    }

    /// Writes the occlusion token into masked pixels.
    pub fn occlude(&self, map: &Tensor, mask: &Tensor) -> Result<Tensor> {
        self.check_input(map, mask)?;
        apply_token_tensor(map, mask, &self.token)
    }

    pub fn st_layer(&self) -> &StLayer {
        &self.st
    }

    /// Spatial then temporal encoding of ST-layer features: (B, F, K, D) →
    /// (B, F, K·D).
    pub fn encode(&self, st: &Tensor) -> Result<Tensor> {
        let (b, f, k, d) = st.dims4()?;
        let spatial = self.spatial.forward(st)?;
        let flat = spatial.reshape((b, f, k * d))?.broadcast_add(&self.temporal_pos)?;
        self.temporal.forward(&flat)
    }

    pub fn head(&self, features: &Tensor) -> Result<Tensor> {
        let (b, f, _) = features.dims3()?;
        let out = self.head.forward(&self.head_norm.forward(features)?)?;
        Ok(out.reshape((b, f, self.cfg.joints, 2))?)
    }

    /// `map` (B, F, K, 2) with `mask` (B, F, K), 1 = occluded.
    pub fn forward(&self, map: &Tensor, mask: &Tensor) -> Result<PriorOutput> {
        let x = self.occlude(map, mask)?;
        let st = self.st.forward(&x)?;
        let features = self.encode(&st)?;
        let pred = self.head(&features)?;
        Ok(PriorOutput { pred, features })
    }
}

/// Mean over masked joint-frames of the L1 distance summed over the two
/// coordinates; zero when nothing is masked.
pub fn loss_self(pred: &Tensor, gt: &Tensor, mask: &Tensor) -> Result<Tensor> {
    if pred.dims() != gt.dims() {
        return Err(shape_err("loss_self", format!("{:?}", gt.dims()), format!("{:?}", pred.dims())));
    }
    let per_joint = pred.sub(gt)?.abs()?.sum(D::Minus1)?;
    let masked = per_joint.mul(mask)?.sum_all()?;
    let count = mask.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
    Ok((masked / count.max(1.0))?)
}

/// [`loss_self`] on plain maps.
pub fn masked_l1(pred: &Map2D, gt: &Map2D, mask: &OcclusionMask) -> Result<f64> {
    if pred.frames() != gt.frames() || pred.joints() != gt.joints() {
        return Err(shape_err("masked_l1", gt.values().len(), pred.values().len()));
    }
    if mask.frames() != gt.frames() || mask.joints() != gt.joints() {
        return Err(shape_err("masked_l1 mask", gt.frames() * gt.joints(), mask.flags().len()));
    }
    let mut total = 0.0;
    for f in 0..gt.frames() {
        for k in 0..gt.joints() {
            if mask.get(f, k) {
                let (p, g) = (pred.get(f, k), gt.get(f, k));
                total += (p[0] - g[0]).abs() + (p[1] - g[1]).abs();
            }
        }
    }
    Ok(total / mask.count().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            frames: 16,
            joints: 14,
            branch_channels: 4,
            spatial_depth: 1,
            spatial_heads: 2,
            temporal_depth: 1,
            temporal_heads: 2,
            ..Default::default()
        }
    }

    #[test]
    fn st_layer_shapes_and_linearity() {
        let dev = Device::Cpu;
        let cfg = ModelConfig::default();
        let mut ps = ParamStore::new(&dev, DType::F32, 0);
        let st = StLayer::new(&mut ps, "st", &cfg).unwrap();
        let x = Tensor::randn(0f32, 1.0, (2, 16, 14, 2), &dev).unwrap();
        assert_eq!(st.forward(&x).unwrap().dims(), &[2, 16, 14, 48]);
        let zeros = Tensor::zeros((1, 16, 14, 2), DType::F32, &dev).unwrap();
        let out: Vec<f32> = st.forward(&zeros).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert!(out.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn st_layer_receptive_field() {
        let dev = Device::Cpu;
        let cfg = ModelConfig::default();
        let mut ps = ParamStore::new(&dev, DType::F64, 1);
        let st = StLayer::new(&mut ps, "st", &cfg).unwrap();
        let base = Tensor::randn(0f64, 1.0, (1, 16, 14, 2), &dev).unwrap();
        let (f0, k0) = (8usize, 6usize);
        let mut bumped: Vec<f64> = base.flatten_all().unwrap().to_vec1().unwrap();
        bumped[(f0 * 14 + k0) * 2] += 1.0;
        let bumped = Tensor::from_vec(bumped, (1, 16, 14, 2), &dev).unwrap();
        let diff: Vec<Vec<Vec<f64>>> = st
            .forward(&bumped)
            .unwrap()
            .sub(&st.forward(&base).unwrap())
            .unwrap()
            .squeeze(0)
            .unwrap()
            .abs()
            .unwrap()
            .max(D::Minus1)
            .unwrap()
            .unsqueeze(2)
            .unwrap()
            .to_vec3()
            .unwrap();
        let mut touched = 0;
        for f in 0..16 {
            for k in 0..14 {
                let changed = diff[f][k][0] > 0.0;
                let df = (f as i64 - f0 as i64).abs();
                let dk = (k as i64 - k0 as i64).abs();
                if df > 5 || dk > 5 {
                    assert!(!changed, "({f}, {k}) changed outside the receptive field");
                }
                touched += usize::from(changed);
            }
        }
        // 3 dilations × 9 taps, center shared
        assert_eq!(touched, 25);
    }

    #[test]
    fn prior_shapes() {
        let dev = Device::Cpu;
        let mut ps = ParamStore::new(&dev, DType::F32, 2);
        let net = PriorNet::new(&mut ps, &small_cfg()).unwrap();
        let x = Tensor::randn(0f32, 0.3, (3, 16, 14, 2), &dev).unwrap();
        let m = Tensor::zeros((3, 16, 14), DType::F32, &dev).unwrap();
        let out = net.forward(&x, &m).unwrap();
        assert_eq!(out.pred.dims(), &[3, 16, 14, 2]);
        assert_eq!(out.features.dims(), &[3, 16, 14 * 12]);
        let wrong = Tensor::randn(0f32, 0.3, (3, 15, 14, 2), &dev).unwrap();
        assert!(net.forward(&wrong, &m).is_err());
    }

    #[test]
    fn batch_items_are_independent() {
        let dev = Device::Cpu;
        let mut ps = ParamStore::new(&dev, DType::F64, 3);
        let net = PriorNet::new(&mut ps, &small_cfg()).unwrap();
        let x = Tensor::randn(0f64, 0.3, (3, 16, 14, 2), &dev).unwrap();
        let m = Tensor::rand(0f64, 1.0, (3, 16, 14), &dev).unwrap().ge(0.7).unwrap().to_dtype(DType::F64).unwrap();
        let out = net.forward(&x, &m).unwrap().pred;
        let order = Tensor::new(&[2u32, 0, 1], &dev).unwrap();
        let permuted = net
            .forward(&x.index_select(&order, 0).unwrap(), &m.index_select(&order, 0).unwrap())
            .unwrap()
            .pred;
        let expect = out.index_select(&order, 0).unwrap();
        let diff = permuted.sub(&expect).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff < 1e-12);
    }

    #[test]
    fn forward_is_deterministic() {
        let dev = Device::Cpu;
        let run = || {
            let mut ps = ParamStore::new(&dev, DType::F32, 4);
            let net = PriorNet::new(&mut ps, &small_cfg()).unwrap();
            let x = Tensor::ones((1, 16, 14, 2), DType::F32, &dev).unwrap();
            let m = Tensor::zeros((1, 16, 14), DType::F32, &dev).unwrap();
            net.forward(&x, &m).unwrap().pred.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn loss_self_examples() {
        let dev = Device::Cpu;
        let gt = Tensor::randn(0f64, 1.0, (1, 16, 14, 2), &dev).unwrap();
        let ones = Tensor::ones((1, 16, 14), DType::F64, &dev).unwrap();
        let zeros = Tensor::zeros((1, 16, 14), DType::F64, &dev).unwrap();
        assert_eq!(loss_self(&gt, &gt, &ones).unwrap().to_scalar::<f64>().unwrap(), 0.0);
        let other = Tensor::randn(0f64, 1.0, (1, 16, 14, 2), &dev).unwrap();
        assert_eq!(loss_self(&other, &gt, &zeros).unwrap().to_scalar::<f64>().unwrap(), 0.0);

        let mut pred: Vec<f64> = gt.flatten_all().unwrap().to_vec1().unwrap();
        let i = (3 * 14 + 5) * 2;
        pred[i] += 0.3;
        pred[i + 1] -= 0.4;
        let pred = Tensor::from_vec(pred, (1, 16, 14, 2), &dev).unwrap();
        let mut m = vec![0.0; 16 * 14];
        m[3 * 14 + 5] = 1.0;
        let m = Tensor::from_vec(m, (1, 16, 14), &dev).unwrap();
        let l = loss_self(&pred, &gt, &m).unwrap().to_scalar::<f64>().unwrap();
        assert!((l - 0.7).abs() < 1e-12);
    }

    #[test]
    fn loss_self_gradient_is_zero_off_mask() {
        let dev = Device::Cpu;
        let gt = Tensor::randn(0f64, 1.0, (2, 8, 5, 2), &dev).unwrap();
        let pred = Var::randn(0f64, 1.0, (2, 8, 5, 2), &dev).unwrap();
        let m = Tensor::rand(0f64, 1.0, (2, 8, 5), &dev).unwrap().ge(0.5).unwrap().to_dtype(DType::F64).unwrap();
        let grads = loss_self(pred.as_tensor(), &gt, &m).unwrap().backward().unwrap();
        let g: Vec<f64> = grads.get(&pred).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let mv: Vec<f64> = m.flatten_all().unwrap().to_vec1().unwrap();
        for (i, gi) in g.iter().enumerate() {
            if mv[i / 2] == 0.0 {
                assert_eq!(*gi, 0.0);
            } else {
                assert!(*gi != 0.0);
            }
        }
    }

    #[test]
    fn masked_l1_matches_tensor_loss() {
        let mut pred = Map2D::zeros(2, 3);
        let gt = Map2D::zeros(2, 3);
        pred.set(1, 2, [0.3, -0.4]);
        let mut mask = OcclusionMask::none(2, 3);
        mask.set(1, 2, true);
        assert!((masked_l1(&pred, &gt, &mask).unwrap() - 0.7).abs() < 1e-12);
        assert_eq!(masked_l1(&pred, &gt, &OcclusionMask::none(2, 3)).unwrap(), 0.0);
    }

    #[test]
    fn zero_fill_has_no_token_parameter() {
        let dev = Device::Cpu;
        let mut ps = ParamStore::new(&dev, DType::F32, 5);
        let cfg = ModelConfig {
            token: TokenMode::ZeroFill,
            ..small_cfg()
        };
        let net = PriorNet::new(&mut ps, &cfg).unwrap();
        assert!(ps.get("prior.token").is_none());
        assert_eq!(net.token_value().unwrap(), [0.0, 0.0]);
    }
}
