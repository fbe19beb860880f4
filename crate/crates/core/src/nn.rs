//! Minimal layer library on top of candle tensors: a named parameter store
//! with seeded initialization, the layers the prior and lifting networks are
//! built from, and an AdamW optimizer whose state can be checkpointed.
//!
//! Layer norm and softmax are composed from primitive ops because candle's
//! fused CPU kernels for them have no backward pass.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{shape_err, Error, Result};

pub enum Init {
    Zeros,
    Ones,
    Uniform(f64),
    Normal(f64),
    Value(Vec<f64>),
}

/// Named trainable tensors. Names are dotted paths such as
/// `prior.spatial.0.attn.qkv.weight`.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    device: Device,
    dtype: DType,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(device: &Device, dtype: DType, seed: u64) -> Self {
        Self {
            vars: BTreeMap::new(),
            device: device.clone(),
            dtype,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn create(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::Checkpoint(format!("duplicate parameter `{name}`")));
        }
        let count: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; count],
            Init::Ones => vec![1.0; count],
            Init::Uniform(a) => (0..count).map(|_| self.rng.random_range(-a..a)).collect(),
            Init::Normal(s) => {
                let n = Normal::new(0.0, s).map_err(|e| Error::InvalidConfig(e.to_string()))?;
                (0..count).map(|_| n.sample(&mut self.rng)).collect()
            }
            Init::Value(v) => {
                if v.len() != count {
                    return Err(shape_err("initial value", count, v.len()));
                }
                v
            }
        };
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    /// Variables whose names start with any of `prefixes` (all when empty).
    pub fn vars_matching(&self, prefixes: &[&str]) -> Vec<(String, Var)> {
        self.vars
            .iter()
            .filter(|(k, _)| prefixes.is_empty() || prefixes.iter().any(|p| k.starts_with(p)))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn all(&self) -> Vec<(String, Var)> {
        self.vars_matching(&[])
    }

    /// Copies of all parameter values, keyed by name.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?)))
            .collect()
    }

    /// Overwrites parameters from `values`. Every name in the store must be
    /// present with a matching shape unless `allow_missing` is set; extra
    /// entries in `values` are ignored.
    pub fn load(&self, values: &BTreeMap<String, Tensor>, allow_missing: bool) -> Result<usize> {
        let mut loaded = 0;
        for (name, var) in &self.vars {
            match values.get(name) {
                Some(t) => {
                    if t.dims() != var.dims() {
                        return Err(Error::Checkpoint(format!(
                            "parameter `{name}` has shape {:?}, checkpoint has {:?}",
                            var.dims(),
                            t.dims()
                        )));
                    }
                    var.set(&t.to_dtype(self.dtype)?.to_device(&self.device)?)?;
                    loaded += 1;
                }
                None if allow_missing => {}
                None => return Err(Error::Checkpoint(format!("checkpoint lacks `{name}`"))),
            }
        }
        Ok(loaded)
    }

    pub fn parameter_count(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, input: usize, output: usize) -> Result<Self> {
        let bound = 1.0 / (input as f64).sqrt();
        Ok(Self {
            weight: ps.create(&format!("{name}.weight"), &[output, input], Init::Uniform(bound))?,
            bias: ps.create(&format!("{name}.bias"), &[output], Init::Zeros)?,
        })
    }

    /// Zero-initialized output layer.
    pub fn zeroed(ps: &mut ParamStore, name: &str, input: usize, output: usize) -> Result<Self> {
        Ok(Self {
            weight: ps.create(&format!("{name}.weight"), &[output, input], Init::Zeros)?,
            bias: ps.create(&format!("{name}.bias"), &[output], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.broadcast_matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: ps.create(&format!("{name}.weight"), &[dim], Init::Ones)?,
            bias: ps.create(&format!("{name}.bias"), &[dim], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let n = x.dim(D::Minus1)? as f64;
        let mean = (x.sum_keepdim(D::Minus1)? / n)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = (centered.sqr()?.sum_keepdim(D::Minus1)? / n)?;
        let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

/// Two-layer perceptron with GELU.
#[derive(Debug, Clone)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(ps: &mut ParamStore, name: &str, input: usize, hidden: usize, output: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(ps, &format!("{name}.fc1"), input, hidden)?,
            fc2: Linear::new(ps, &format!("{name}.fc2"), hidden, output)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu()?)
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    qkv: Linear,
    proj: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "attention width {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            qkv: Linear::new(ps, &format!("{name}.qkv"), dim, 3 * dim)?,
            proj: Linear::new(ps, &format!("{name}.proj"), dim, dim)?,
            heads,
        })
    }

    /// `x` is (batch, tokens, dim).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, c) = x.dims3()?;
        let hd = c / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((b, n, 3, self.heads, hd))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let scores = (q.matmul(&k.t()?)? * (1.0 / (hd as f64).sqrt()))?;
        let attn = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let out = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, n, c))?;
        self.proj.forward(&out)
    }
}

/// Pre-norm transformer encoder block.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    norm1: LayerNorm,
    attn: MultiHeadAttention,
    norm2: LayerNorm,
    mlp: Mlp,
}

impl TransformerBlock {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, heads: usize, mlp_ratio: f64) -> Result<Self> {
        let hidden = ((dim as f64 * mlp_ratio).round() as usize).max(1);
        Ok(Self {
            norm1: LayerNorm::new(ps, &format!("{name}.norm1"), dim)?,
            attn: MultiHeadAttention::new(ps, &format!("{name}.attn"), dim, heads)?,
            norm2: LayerNorm::new(ps, &format!("{name}.norm2"), dim)?,
            mlp: Mlp::new(ps, &format!("{name}.mlp"), dim, hidden, dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.norm1.forward(x)?)?)?;
        Ok((&x + self.mlp.forward(&self.norm2.forward(&x)?)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct Transformer {
    blocks: Vec<TransformerBlock>,
    norm: LayerNorm,
}

impl Transformer {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        dim: usize,
        depth: usize,
        heads: usize,
        mlp_ratio: f64,
    ) -> Result<Self> {
        let blocks = (0..depth)
            .map(|i| TransformerBlock::new(ps, &format!("{name}.blocks.{i}"), dim, heads, mlp_ratio))
            .collect::<Result<_>>()?;
        Ok(Self {
            blocks,
            norm: LayerNorm::new(ps, &format!("{name}.norm"), dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut x = x.clone();
        for block in &self.blocks {
            x = block.forward(&x)?;
        }
        self.norm.forward(&x)
    }
}

/// 2D convolution over (batch, channels, height, width) with "same" padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    dilation: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        kernel: usize,
        dilation: usize,
    ) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::InvalidConfig("convolution kernel must be odd".into()));
        }
        let bound = 1.0 / ((input * kernel * kernel) as f64).sqrt();
        Ok(Self {
            weight: ps.create(
                &format!("{name}.weight"),
                &[output, input, kernel, kernel],
                Init::Uniform(bound),
            )?,
            bias: ps.create(&format!("{name}.bias"), &[output], Init::Zeros)?,
            dilation,
            padding: dilation * (kernel / 2),
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, 1, self.dilation, 1)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, (), 1, 1))?)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adam with decoupled weight decay.
pub struct AdamW {
    params: Vec<(String, Var)>,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: usize,
    cfg: AdamWConfig,
}

impl AdamW {
    pub fn new(params: Vec<(String, Var)>, cfg: AdamWConfig) -> Result<Self> {
        let first = params
            .iter()
            .map(|(_, v)| v.zeros_like())
            .collect::<candle_core::Result<_>>()?;
        let second = params
            .iter()
            .map(|(_, v)| v.zeros_like())
            .collect::<candle_core::Result<_>>()?;
        Ok(Self {
            params,
            first,
            second,
            step: 0,
            cfg,
        })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    pub fn backward_step(&mut self, loss: &Tensor) -> Result<()> {
        let grads = loss.backward()?;
        self.step += 1;
        let c = self.cfg;
        let bias1 = 1.0 - c.beta1.powi(self.step as i32);
        let bias2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, (_, var)) in self.params.iter().enumerate() {
            let Some(g) = grads.get(var) else { continue };
            let m = ((&self.first[i] * c.beta1)? + (g * (1.0 - c.beta1))?)?;
            let v = ((&self.second[i] * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?;
            let m_hat = (&m / bias1)?;
            let v_hat = (&v / bias2)?;
            let decayed = (var.as_tensor() * (1.0 - c.lr * c.weight_decay))?;
            let update = (m_hat / (v_hat.sqrt()? + c.eps)?)?;
            var.set(&decayed.sub(&(update * c.lr)?)?)?;
            self.first[i] = m;
            self.second[i] = v;
        }
        Ok(())
    }

    /// Moment tensors keyed `adamw.m.<param>` / `adamw.v.<param>`.
    pub fn state(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (i, (name, _)) in self.params.iter().enumerate() {
            out.insert(format!("adamw.m.{name}"), self.first[i].clone());
            out.insert(format!("adamw.v.{name}"), self.second[i].clone());
        }
        out
    }

    pub fn restore(&mut self, state: &BTreeMap<String, Tensor>, step: usize) -> Result<()> {
        for (i, (name, var)) in self.params.iter().enumerate() {
            let fetch = |key: String| -> Result<Tensor> {
                let t = state
                    .get(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer state `{key}`")))?;
                Ok(t.to_dtype(var.dtype())?.to_device(var.device())?)
            };
            self.first[i] = fetch(format!("adamw.m.{name}"))?;
            self.second[i] = fetch(format!("adamw.v.{name}"))?;
        }
        self.step = step;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(ps: &ParamStore, loss: impl Fn() -> Tensor, names: &[&str]) {
        let grads = loss().backward().unwrap();
        let h = 1e-5;
        for name in names {
            let var = ps.get(name).unwrap();
            let g: Vec<f64> = grads.get(var).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            let base: Vec<f64> = var.flatten_all().unwrap().to_vec1().unwrap();
            for i in (0..base.len()).step_by((base.len() / 5).max(1)) {
                let eval = |delta: f64| {
                    let mut v = base.clone();
                    v[i] += delta;
                    var.set(&Tensor::from_vec(v, var.shape(), var.device()).unwrap()).unwrap();
                    loss().to_scalar::<f64>().unwrap()
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                eval(0.0);
                assert!(
                    (fd - g[i]).abs() <= 1e-5 + 1e-4 * fd.abs(),
                    "{name}[{i}]: fd {fd} vs autodiff {}",
                    g[i]
                );
            }
        }
    }

    #[test]
    fn transformer_gradients_match_finite_differences() {
        let dev = Device::Cpu;
        let mut ps = ParamStore::new(&dev, DType::F64, 1);
        let tf = Transformer::new(&mut ps, "t", 8, 1, 2, 2.0).unwrap();
        let x = Tensor::randn(0.0, 1.0, (2, 5, 8), &dev).unwrap();
        let target = Tensor::randn(0.0, 1.0, (2, 5, 8), &dev).unwrap();
        let loss = || tf.forward(&x).unwrap().sub(&target).unwrap().sqr().unwrap().mean_all().unwrap();
        fd_check(
            &ps,
            loss,
            &["t.blocks.0.attn.qkv.weight", "t.blocks.0.mlp.fc1.weight", "t.norm.weight", "t.blocks.0.norm1.bias"],
        );
    }

    #[test]
    fn dilated_conv_gradients_match_finite_differences() {
        let dev = Device::Cpu;
        let mut ps = ParamStore::new(&dev, DType::F64, 2);
        let conv = Conv2d::new(&mut ps, "c", 2, 3, 3, 2).unwrap();
        let x = Tensor::randn(0.0, 1.0, (2, 2, 7, 6), &dev).unwrap();
        let y = conv.forward(&x).unwrap();
        assert_eq!(y.dims(), &[2, 3, 7, 6]);
        let loss = || conv.forward(&x).unwrap().sqr().unwrap().mean_all().unwrap();
        fd_check(&ps, loss, &["c.weight", "c.bias"]);
    }

    #[test]
    fn layer_norm_normalizes() {
        let dev = Device::Cpu;
        let mut ps = ParamStore::new(&dev, DType::F64, 3);
        let ln = LayerNorm::new(&mut ps, "ln", 6).unwrap();
        let x = Tensor::randn(3.0, 2.0, (4, 6), &dev).unwrap();
        let y: Vec<Vec<f64>> = ln.forward(&x).unwrap().to_vec2().unwrap();
        for row in y {
            let m: f64 = row.iter().sum::<f64>() / 6.0;
            let v: f64 = row.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 6.0;
            assert!(m.abs() < 1e-9 && (v - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn adamw_minimizes_quadratic_and_restores() {
        let dev = Device::Cpu;
        let mut ps = ParamStore::new(&dev, DType::F64, 4);
        let w = ps.create("w", &[3], Init::Value(vec![1.0, -2.0, 3.0])).unwrap();
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(ps.all(), cfg).unwrap();
        for _ in 0..300 {
            opt.backward_step(&w.sqr().unwrap().sum_all().unwrap()).unwrap();
        }
        let v: Vec<f64> = w.to_vec1().unwrap();
        assert!(v.iter().all(|x| x.abs() < 1e-2), "{v:?}");

        let state = opt.state();
        let mut other = AdamW::new(ps.all(), cfg).unwrap();
        other.restore(&state, opt.step_count()).unwrap();
        assert_eq!(other.step_count(), 300);
    }

    #[test]
    fn attention_rejects_bad_heads() {
        let mut ps = ParamStore::new(&Device::Cpu, DType::F32, 0);
        assert!(MultiHeadAttention::new(&mut ps, "a", 10, 3).is_err());
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let make = || {
            let mut ps = ParamStore::new(&Device::Cpu, DType::F32, 9);
            Linear::new(&mut ps, "l", 4, 4).unwrap();
            ps.get("l.weight").unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap()
        };
        assert_eq!(make(), make());
    }
}
