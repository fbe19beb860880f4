use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::Rng;

use super::config::{ExperimentConfig, TrainConfig};
use crate::archive::{load_archive, save_archive};
use crate::body_model::{BodyModel, BodyTensors};
use crate::data_pipeline::{batch_tensors, make_batches, mask_tensor, sample_rng, MotionSample};
use crate::error::{Error, Result};
use crate::lifting_net::{loss_motion, LiftingNet, LiftingTargets, LossWeights};
use crate::motion_repr::{OcclusionMask, OcclusionToken};
use crate::nn::{AdamW, AdamWConfig, ParamStore};
use crate::occlusion_synth::occlude_to_ratio;
use crate::prior_net::{loss_self, PriorNet};

pub const CHECKPOINT_SCHEMA: &str = "occmocap.checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

const DEVICE: Device = Device::Cpu;
const DTYPE: DType = DType::F32;

/// Which network a trainer or checkpoint holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Prior,
    Lifting,
}

impl Stage {
    fn name(self) -> &'static str {
        match self {
            Stage::Prior => "prior",
            Stage::Lifting => "lifting",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "prior" => Ok(Stage::Prior),
            "lifting" => Ok(Stage::Lifting),
            other => Err(Error::Checkpoint(format!("unknown stage `{other}`"))),
        }
    }
}

/// Where the next optimizer step starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Position {
    pub epoch: usize,
    pub batch: usize,
    pub step: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
}

/// Parameters, optimizer moments, progress and the resolved config.
///
/// Archive arrays are the parameters under their own names (`prior.*`,
/// `lifting.*`) and the optimizer moments under `adamw.m.<name>` and
/// `adamw.v.<name>`; metadata holds `stage`, `config` (TOML), `epoch`,
/// `batch`, `step` and `history` (JSON list of per-step losses).
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub stage: Stage,
    pub config: ExperimentConfig,
    pub params: BTreeMap<String, Tensor>,
    pub optimizer: BTreeMap<String, Tensor>,
    pub position: Position,
    pub history: Vec<StepLog>,
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut tensors = self.params.clone();
        tensors.extend(self.optimizer.iter().map(|(k, v)| (k.clone(), v.clone())));
        let history: Vec<(usize, usize, f64)> = self.history.iter().map(|h| (h.step, h.epoch, h.loss)).collect();
        let meta = BTreeMap::from([
            ("stage".to_string(), self.stage.name().to_string()),
            ("config".to_string(), self.config.to_toml()),
            ("epoch".to_string(), self.position.epoch.to_string()),
            ("batch".to_string(), self.position.batch.to_string()),
            ("step".to_string(), self.position.step.to_string()),
            ("history".to_string(), serde_json::to_string(&history)?),
        ]);
        save_archive(path, CHECKPOINT_SCHEMA, CHECKPOINT_VERSION, &tensors, &meta)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let a = load_archive(path, CHECKPOINT_SCHEMA, CHECKPOINT_VERSION)?;
        let num = |key: &str| -> Result<usize> {
            a.meta(key)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("metadata `{key}` is not an integer")))
        };
        let config = ExperimentConfig::from_toml(a.meta("config")?)?;
        let history: Vec<(usize, usize, f64)> = serde_json::from_str(a.meta("history")?)?;
        let mut params = BTreeMap::new();
        let mut optimizer = BTreeMap::new();
        for (k, v) in &a.tensors {
            if k.starts_with("adamw.") {
                optimizer.insert(k.clone(), v.clone());
            } else {
                params.insert(k.clone(), v.clone());
            }
        }
        Ok(Self {
            stage: Stage::parse(a.meta("stage")?)?,
            config,
            params,
            optimizer,
            position: Position {
                epoch: num("epoch")?,
                batch: num("batch")?,
                step: num("step")?,
            },
            history: history
                .into_iter()
                .map(|(step, epoch, loss)| StepLog { step, epoch, loss })
                .collect(),
        })
    }
}

enum Model {
    Prior(PriorNet),
    Lifting {
        net: LiftingNet,
        body: BodyTensors,
        weights: LossWeights,
    },
}

/// Occlusion masks for one training step. Each sample's mask depends only
/// on (seed, epoch, batch, slot), so a resumed run redraws the same masks.
pub fn step_masks(
    cfg: &ExperimentConfig,
    train: &TrainConfig,
    samples: &[&MotionSample],
    epoch: usize,
    batch: usize,
) -> Vec<OcclusionMask> {
    let stream = ((epoch as u64) << 32) | batch as u64;
    let mut rng = sample_rng(cfg.seed ^ 0x6f63_636c_7573_696f, stream);
    let (lo, hi) = train.occlusion_ratio_range;
    samples
        .iter()
        .map(|s| {
            let ratio = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            let occ = cfg.synth.occlusion.with_ratio(ratio);
            occlude_to_ratio(&s.clean2d, &occ, OcclusionToken([0.0, 0.0]), &mut rng).1.mask
        })
        .collect()
}

/// A training run for either network.
pub struct Trainer {
    pub config: ExperimentConfig,
    stage: Stage,
    ps: ParamStore,
    model: Model,
    opt: AdamW,
    position: Position,
    history: Vec<StepLog>,
}

impl Trainer {
    pub fn new_prior(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let mut ps = ParamStore::new(&DEVICE, DTYPE, config.seed);
        let net = PriorNet::new(&mut ps, &config.model)?;
        let opt = AdamW::new(ps.all(), adamw(&config.prior))?;
        Ok(Self {
            config: config.clone(),
            stage: Stage::Prior,
            ps,
            model: Model::Prior(net),
            opt,
            position: Position::default(),
            history: Vec::new(),
        })
    }

    /// A fresh lifting run. Prior weights come from `prior` when given; the
    /// prior's model config must then match `config.model`.
    pub fn new_lifting(config: &ExperimentConfig, body: &BodyModel, prior: Option<&Checkpoint>) -> Result<Self> {
        config.validate()?;
        let opts = &config.lifting_options;
        let mut ps = ParamStore::new(&DEVICE, DTYPE, config.seed.wrapping_add(1));
        let net = LiftingNet::new(&mut ps, &config.model, opts.use_prior)?;
        if let (true, Some(ck)) = (opts.use_prior, prior) {
            if ck.config.model != config.model {
                return Err(Error::InvalidConfig("prior checkpoint was trained with a different model config".into()));
            }
            let prior_params: BTreeMap<String, Tensor> = ck
                .params
                .iter()
                .filter(|(k, _)| k.starts_with("prior."))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect();
            if prior_params.is_empty() {
                return Err(Error::Checkpoint("checkpoint holds no prior weights".into()));
            }
            ps.load(&prior_params, true)?;
        }
        let trainable = if opts.use_prior && opts.freeze_prior {
            ps.vars_matching(&["lifting."])
        } else {
            ps.all()
        };
        let opt = AdamW::new(trainable, adamw(&config.lifting))?;
        Ok(Self {
            config: config.clone(),
            stage: Stage::Lifting,
            ps,
            model: Model::Lifting {
                net,
                body: body.tensors(&DEVICE, DTYPE)?,
                weights: opts.weights,
            },
            opt,
            position: Position::default(),
            history: Vec::new(),
        })
    }

    pub fn resume(ck: &Checkpoint, body: &BodyModel) -> Result<Self> {
        let mut t = match ck.stage {
            Stage::Prior => Self::new_prior(&ck.config)?,
            Stage::Lifting => Self::new_lifting(&ck.config, body, None)?,
        };
        t.ps.load(&ck.params, false)?;
        t.opt.restore(&ck.optimizer, ck.position.step)?;
        t.position = ck.position;
        t.history = ck.history.clone();
        Ok(t)
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn position(&self) -> Position {
        self.position
    }

    pub fn history(&self) -> &[StepLog] {
        &self.history
    }

    pub fn params(&self) -> &ParamStore {
        &self.ps
    }

    pub fn prior_net(&self) -> Option<&PriorNet> {
        match &self.model {
            Model::Prior(p) => Some(p),
            Model::Lifting { net, .. } => net.prior(),
        }
    }

    pub fn lifting_net(&self) -> Option<&LiftingNet> {
        match &self.model {
            Model::Lifting { net, .. } => Some(net),
            Model::Prior(_) => None,
        }
    }

    fn train_config(&self) -> &TrainConfig {
        match self.stage {
            Stage::Prior => &self.config.prior,
            Stage::Lifting => &self.config.lifting,
        }
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            stage: self.stage,
            config: self.config.clone(),
            params: self.ps.snapshot()?,
            optimizer: self.opt.state(),
            position: self.position,
            history: self.history.clone(),
        })
    }

    /// Loss of one batch with the given masks, without updating anything.
    pub fn batch_loss(&self, samples: &[&MotionSample], masks: &[OcclusionMask]) -> Result<Tensor> {
        let b = batch_tensors(samples, &DEVICE, DTYPE)?;
        let mask = mask_tensor(&masks.iter().collect::<Vec<_>>(), &DEVICE, DTYPE)?;
        match &self.model {
            Model::Prior(net) => {
                let out = net.forward(&b.clean, &mask)?;
                loss_self(&out.pred, &b.clean, &mask)
            }
            Model::Lifting { net, body, weights } => {
                let targets = LiftingTargets::new(body, &b.gt3d, &b.beta)?;
                let out = net.forward(&b.clean, &mask)?;
                Ok(loss_motion(&out, &targets, body, weights)?.total)
            }
        }
    }

    /// Runs one optimizer step on an explicit batch (used by overfit checks).
    pub fn step_on(&mut self, samples: &[&MotionSample], masks: &[OcclusionMask]) -> Result<f64> {
        let loss = self.batch_loss(samples, masks)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(Error::Degenerate("training loss is not finite"));
        }
        let lr = self.train_config().lr_at(self.opt.step_count());
        self.opt.set_lr(lr);
        self.opt.backward_step(&loss)?;
        Ok(value)
    }

    pub fn is_finished(&self) -> bool {
        let t = self.train_config();
        self.position.epoch >= t.epochs || t.max_steps.is_some_and(|m| self.position.step >= m)
    }

    /// Takes the next scheduled step; `None` once the run is finished.
    pub fn step(&mut self, data: &[MotionSample]) -> Result<Option<f64>> {
        if self.is_finished() {
            return Ok(None);
        }
        let t = self.train_config().clone();
        let Position { epoch, batch, step } = self.position;
        let order = make_batches(data.len(), t.batch_size, Some(self.config.seed.wrapping_add(epoch as u64)))?;
        let samples: Vec<&MotionSample> = order[batch].iter().map(|&i| &data[i]).collect();
        let masks = step_masks(&self.config, &t, &samples, epoch, batch);
        let loss = self.step_on(&samples, &masks)?;
        self.history.push(StepLog { step, epoch, loss });
        self.position = if batch + 1 < order.len() {
            Position {
                epoch,
                batch: batch + 1,
                step: step + 1,
            }
        } else {
            Position {
                epoch: epoch + 1,
                batch: 0,
                step: step + 1,
            }
        };
        Ok(Some(loss))
    }

    /// Steps until the schedule ends, calling `on_step` after each step.
    pub fn run(&mut self, data: &[MotionSample], mut on_step: impl FnMut(&StepLog)) -> Result<()> {
        while self.step(data)?.is_some() {
            on_step(self.history.last().expect("just pushed"));
        }
        Ok(())
    }
}

fn adamw(t: &TrainConfig) -> AdamWConfig {
    AdamWConfig {
        lr: t.lr,
        weight_decay: t.weight_decay,
        ..AdamWConfig::default()
    }
}
