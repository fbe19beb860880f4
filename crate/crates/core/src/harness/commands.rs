//! The operations behind each CLI subcommand. Every output file that
//! records results also records the resolved configuration.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::ExperimentConfig;
use super::eval::{eval_masks, evaluate, evaluate_prior, EvalReport};
use super::infer::{infer, Inference};
use super::sweep::{plot_svg, sweep, to_csv, SweepRow};
use super::train::{Checkpoint, Stage, StepLog, Trainer};
use crate::body_model::BodyModel;
use crate::data_pipeline::{generate_dataset, load_dataset, save_dataset, DetectionFile, MotionSample};
use crate::error::{Error, Result};
use crate::motion_repr::OcclusionToken;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

pub fn body_model(cfg: &ExperimentConfig) -> Result<BodyModel> {
    match &cfg.body_model {
        Some(p) => BodyModel::load(p),
        None => Ok(BodyModel::procedural()),
    }
}

/// Samples from the configured directory, or synthesized from the seed.
pub fn dataset(cfg: &ExperimentConfig, body: &BodyModel, split: Split) -> Result<Vec<MotionSample>> {
    let (dir, count, seed) = match split {
        Split::Train => (&cfg.data.train_dir, cfg.data.train_samples, cfg.seed),
        Split::Eval => (&cfg.data.eval_dir, cfg.data.eval_samples, cfg.seed.wrapping_add(cfg.data.eval_seed_offset)),
    };
    let samples = match dir {
        Some(d) => load_dataset(d)?,
        None => generate_dataset(body, &cfg.synth, seed, count, OcclusionToken([0.0, 0.0]))?,
    };
    if samples.is_empty() {
        return Err(Error::Degenerate("dataset is empty"));
    }
    if let Some(s) = samples.iter().find(|s| s.frames() != cfg.model.frames) {
        return Err(Error::ShapeMismatch {
            what: "sample frames",
            expected: cfg.model.frames.to_string(),
            got: s.frames().to_string(),
        });
    }
    Ok(samples)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write_text(path, &serde_json::to_string_pretty(value)?)
}

/// Writes `train/` and `eval/` sample archives plus `config.toml`.
pub fn synth_data(cfg: &ExperimentConfig, out: &Path) -> Result<(usize, usize)> {
    cfg.validate()?;
    let body = body_model(cfg)?;
    let mut c = cfg.clone();
    c.data.train_dir = None;
    c.data.eval_dir = None;
    let train = dataset(&c, &body, Split::Train)?;
    let eval = dataset(&c, &body, Split::Eval)?;
    save_dataset(&train, out.join("train"))?;
    save_dataset(&eval, out.join("eval"))?;
    write_text(&out.join("config.toml"), &cfg.to_toml())?;
    Ok((train.len(), eval.len()))
}

fn loss_csv(history: &[StepLog]) -> String {
    let mut s = String::from("step,epoch,loss\n");
    for h in history {
        s.push_str(&format!("{},{},{:.6}\n", h.step, h.epoch, h.loss));
    }
    s
}

/// Result of a training command.
#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub steps: usize,
    pub first_loss: Option<f64>,
    pub last_loss: Option<f64>,
}

fn finish(trainer: &Trainer, out: &Path, name: &str) -> Result<TrainSummary> {
    fs::create_dir_all(out)?;
    let path = out.join(format!("{name}.safetensors"));
    trainer.checkpoint()?.save(&path)?;
    write_text(&out.join(format!("{name}_loss.csv")), &loss_csv(trainer.history()))?;
    let h = trainer.history();
    Ok(TrainSummary {
        checkpoint: path,
        steps: trainer.position().step,
        first_loss: h.first().map(|s| s.loss),
        last_loss: h.last().map(|s| s.loss),
    })
}

/// Trains the prior from scratch, or continues `resume`.
pub fn train_prior(
    cfg: &ExperimentConfig,
    out: &Path,
    resume: Option<&Path>,
    on_step: impl FnMut(&StepLog),
) -> Result<TrainSummary> {
    let body = body_model(cfg)?;
    let mut trainer = match resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            if ck.stage != Stage::Prior {
                return Err(Error::Checkpoint("resume checkpoint is not a prior checkpoint".into()));
            }
            Trainer::resume(&ck, &body)?
        }
        None => Trainer::new_prior(cfg)?,
    };
    let data = dataset(&trainer.config, &body, Split::Train)?;
    trainer.run(&data, on_step)?;
    finish(&trainer, out, "prior")
}

/// Trains the lifting network, starting from the prior in `prior` when the
/// configuration uses one.
pub fn train_lifting(
    cfg: &ExperimentConfig,
    prior: Option<&Path>,
    out: &Path,
    resume: Option<&Path>,
    on_step: impl FnMut(&StepLog),
) -> Result<TrainSummary> {
    let body = body_model(cfg)?;
    let mut trainer = match resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            if ck.stage != Stage::Lifting {
                return Err(Error::Checkpoint("resume checkpoint is not a lifting checkpoint".into()));
            }
            Trainer::resume(&ck, &body)?
        }
        None => {
            let ck = match prior {
                Some(p) => Some(Checkpoint::load(p)?),
                None if cfg.lifting_options.use_prior => {
                    return Err(Error::InvalidConfig(
                        "lifting with a prior needs a prior checkpoint (or --no-prior)".into(),
                    ))
                }
                None => None,
            };
            Trainer::new_lifting(cfg, &body, ck.as_ref())?
        }
    };
    let data = dataset(&trainer.config, &body, Split::Train)?;
    trainer.run(&data, on_step)?;
    finish(&trainer, out, "lifting")
}

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "stage", rename_all = "lowercase")]
pub enum Report {
    Prior {
        masked_l1: f64,
        occlusion_ratio: f64,
        sequences: usize,
        config: String,
    },
    Lifting {
        #[serde(flatten)]
        metrics: EvalReport,
        config: String,
    },
}

/// Scores a checkpoint on the evaluation split at `eval.occlusion_ratio`.
/// Data and evaluation settings come from `cfg`; the network from the
/// checkpoint.
pub fn eval(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<Report> {
    let ck = Checkpoint::load(checkpoint)?;
    let body = body_model(cfg)?;
    let trainer = Trainer::resume(&ck, &body)?;
    let samples = dataset(cfg, &body, Split::Eval)?;
    let masks = eval_masks(&samples, &cfg.synth.occlusion, cfg.eval.occlusion_ratio, cfg.seed);
    match trainer.lifting_net() {
        Some(net) => Ok(Report::Lifting {
            metrics: evaluate(net, &body, &samples, &masks, cfg.eval.batch_size)?,
            config: ck.config.to_toml(),
        }),
        None => {
            let prior = trainer.prior_net().expect("prior checkpoint");
            Ok(Report::Prior {
                masked_l1: evaluate_prior(prior, &samples, &masks, cfg.eval.batch_size)?,
                occlusion_ratio: masks.iter().map(|m| m.ratio()).sum::<f64>() / masks.len() as f64,
                sequences: samples.len(),
                config: ck.config.to_toml(),
            })
        }
    }
}

pub fn write_report(report: &Report, path: &Path) -> Result<()> {
    write_json(path, report)
}

pub fn report_text(report: &Report) -> String {
    match report {
        Report::Prior {
            masked_l1,
            occlusion_ratio,
            sequences,
            ..
        } => format!("prior  sequences {sequences}  occlusion {occlusion_ratio:.3}  masked L1 {masked_l1:.5}"),
        Report::Lifting { metrics: m, .. } => format!(
            "lifting  sequences {}  occlusion {:.3}  MPJPE {:.2} mm  PA-MPJPE {:.2} mm  PVE {:.2} mm  Accel {:.2} mm/frame^2",
            m.sequences, m.occlusion_ratio, m.mpjpe, m.pa_mpjpe, m.pve, m.accel
        ),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct InferenceFile {
    #[serde(flatten)]
    pub inference: Inference,
    pub config: String,
}

/// Runs the full pipeline on a detection file and writes JSON to `out`.
pub fn infer_file(cfg: &ExperimentConfig, checkpoint: &Path, detections: &Path, out: &Path) -> Result<Inference> {
    let ck = Checkpoint::load(checkpoint)?;
    let body = body_model(cfg)?;
    let trainer = Trainer::resume(&ck, &body)?;
    let net = trainer
        .lifting_net()
        .ok_or_else(|| Error::Checkpoint("inference needs a lifting checkpoint".into()))?;
    let file = DetectionFile::read(detections)?;
    let mut run_cfg = ck.config.clone();
    run_cfg.eval.threshold = cfg.eval.threshold;
    run_cfg.fit = cfg.fit.clone();
    let inference = infer(net, &body, &file, &run_cfg)?;
    write_json(
        out,
        &InferenceFile {
            inference: inference.clone(),
            config: run_cfg.to_toml(),
        },
    )?;
    Ok(inference)
}

#[derive(Debug, Clone, Serialize)]
struct SweepFile<'a> {
    rows: &'a [SweepRow],
    config: String,
}

/// Evaluates named lifting checkpoints at every sweep ratio and writes
/// `sweep.csv`, `sweep.json` and `sweep.svg` into `out`.
pub fn sweep_files(cfg: &ExperimentConfig, checkpoints: &[(String, PathBuf)], out: &Path) -> Result<Vec<SweepRow>> {
    if checkpoints.is_empty() {
        return Err(Error::InvalidConfig("sweep needs at least one checkpoint".into()));
    }
    let body = body_model(cfg)?;
    let trainers = checkpoints
        .iter()
        .map(|(_, p)| Trainer::resume(&Checkpoint::load(p)?, &body))
        .collect::<Result<Vec<_>>>()?;
    let mut models = Vec::new();
    for ((name, _), t) in checkpoints.iter().zip(&trainers) {
        let net = t
            .lifting_net()
            .ok_or_else(|| Error::Checkpoint(format!("`{name}` is not a lifting checkpoint")))?;
        models.push((name.as_str(), net));
    }
    let samples = dataset(cfg, &body, Split::Eval)?;
    let rows = sweep(&models, &body, &samples, cfg)?;
    fs::create_dir_all(out)?;
    write_text(&out.join("sweep.csv"), &to_csv(&rows))?;
    write_json(
        &out.join("sweep.json"),
        &SweepFile {
            rows: &rows,
            config: cfg.to_toml(),
        },
    )?;
    plot_svg(&rows, out.join("sweep.svg"))?;
    Ok(rows)
}
