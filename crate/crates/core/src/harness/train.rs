//! Training loop: deterministic batching, optimizer, momentum updates,
//! metrics stream and checkpoints.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::analysis::{accuracy, collect};
use crate::attbalance::LossBreakdown;
use crate::error::{Error, Result};
use crate::model::{init_params, param_names, ModelParams};
use crate::momentum::MomentumState;
use crate::numerics::{Tape, Tensor};
use crate::objective::{batch_objective, regularized, BatchOutput, TrainMode};
use crate::rng::{substream, Stream};
use crate::synth::{augment_crop, Dataset, GroundingSample};

use super::checkpoint::{AdamState, Checkpoint};
use super::config::{OptimizerKind, RunConfig};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub n: usize,
    pub acc_at_0_5: f64,
    pub mean_iou: f64,
    /// Mean in-mask attention of the last applied layer.
    pub mean_in_mask_final: f64,
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsEvent {
    pub step: u64,
    pub epoch: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    pub lr: f64,
    pub grad_norm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalSummary>,
}

pub struct Trainer<'a> {
    pub cfg: RunConfig,
    train: &'a [GroundingSample],
    val: &'a [GroundingSample],
    pub params: ModelParams,
    pub momentum: Option<MomentumState>,
    pub adam: Option<AdamState>,
    /// Steps completed so far.
    pub step: u64,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &RunConfig, dataset: &'a Dataset) -> Result<Self> {
        cfg.validate()?;
        check_dataset(cfg, dataset)?;
        let params = init_params(&cfg.model, cfg.run.seed)?;
        let momentum = match cfg.run.mode {
            TrainMode::Attbalance => Some(MomentumState::init(&params, cfg.attbalance.momentum)?),
            TrainMode::Baseline => None,
        };
        let adam = (cfg.optim.optimizer == OptimizerKind::Adam).then(|| {
            let zeros = params.map(|t| Tensor::zeros(t.shape()));
            AdamState {
                m: zeros.clone(),
                v: zeros,
                t: 0,
            }
        });
        Ok(Self {
            cfg: cfg.clone(),
            train: &dataset.train,
            val: &dataset.val,
            params,
            momentum,
            adam,
            step: 0,
        })
    }

    pub fn from_checkpoint(cfg: &RunConfig, dataset: &'a Dataset, ckpt: Checkpoint) -> Result<Self> {
        let mut t = Self::new(cfg, dataset)?;
        if ckpt.model_config != cfg.model {
            return Err(Error::Config("checkpoint model config differs from run config".into()));
        }
        if ckpt.momentum.is_some() != t.momentum.is_some() || ckpt.adam.is_some() != t.adam.is_some() {
            return Err(Error::Config(
                "checkpoint was written by a different mode or optimizer".into(),
            ));
        }
        t.params = ckpt.params;
        t.momentum = ckpt.momentum;
        t.adam = ckpt.adam;
        t.step = ckpt.step;
        Ok(t)
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.train.len().div_ceil(self.cfg.optim.batch_size) as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.steps_per_epoch() * self.cfg.optim.epochs as u64
    }

    pub fn epoch_of(&self, step: u64) -> usize {
        (step / self.steps_per_epoch()) as usize
    }

    /// Training-sample indices of batch `step`; the order within an epoch
    /// is a fixed shuffle derived from the run seed.
    pub fn batch_indices(&self, step: u64) -> Vec<usize> {
        let spe = self.steps_per_epoch();
        let (epoch, offset) = (step / spe, (step % spe) as usize);
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut substream(self.cfg.run.seed, Stream::Shuffle, epoch));
        let b = self.cfg.optim.batch_size;
        order[offset * b..((offset + 1) * b).min(order.len())].to_vec()
    }

    fn batch(&self, step: u64) -> Vec<GroundingSample> {
        let aug_seed = self.cfg.run.seed ^ step.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        self.batch_indices(step)
            .into_iter()
            .map(|i| {
                let s = &self.train[i];
                if self.cfg.dataset.crop_augment {
                    augment_crop(s, aug_seed)
                } else {
                    s.clone()
                }
            })
            .collect()
    }

    /// Forward and loss for batch `step` at the current parameters,
    /// without updating anything.
    pub fn evaluate_step(&self, step: u64) -> Result<(Tape, Vec<crate::numerics::Var>, BatchOutput)> {
        let epoch = self.epoch_of(step);
        let samples = self.batch(step);
        let acfg = &self.cfg.attbalance;
        let mom_targets = match (&self.momentum, regularized(self.cfg.run.mode, acfg, epoch)) {
            (Some(m), true) => Some(
                samples
                    .iter()
                    .map(|s| m.forward(&self.cfg.model, s, &acfg.applied_layers))
                    .collect::<Result<Vec<_>>>()?,
            ),
            _ => None,
        };
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let vars = bound.values().into_iter().copied().collect();
        let out = batch_objective(
            &mut tape,
            &self.cfg.model,
            &bound,
            &samples,
            self.cfg.run.mode,
            acfg,
            epoch,
            mom_targets.as_deref(),
            None,
        )?;
        Ok((tape, vars, out))
    }

    /// Runs one optimizer step and returns its metrics event.
    pub fn step_once(&mut self) -> Result<MetricsEvent> {
        let started = Instant::now();
        let step = self.step;
        let epoch = self.epoch_of(step);
        let (mut tape, vars, out) = self.evaluate_step(step)?;
        tape.backward(out.loss)?;
        let names = param_names(self.cfg.model.n_layers);
        let grads: Vec<Tensor> = vars
            .iter()
            .zip(&names)
            .map(|(&v, name)| {
                let g = tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.shape(v)));
                if g.is_finite() {
                    Ok(g)
                } else {
                    Err(Error::NonFinite(format!("gradient of {name} at step {step}")))
                }
            })
            .collect::<Result<_>>()?;
        drop(tape);
        let norm = grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
        let clip = self.cfg.optim.grad_clip;
        let factor = if clip > 0.0 && norm > clip { clip / norm } else { 1.0 };
        self.apply(&grads, factor);
        if !self.params.is_finite() {
            return Err(Error::NonFinite(format!("parameters after update at step {step}")));
        }
        if let Some(m) = &mut self.momentum {
            m.update(&self.params, self.cfg.attbalance.momentum)?;
        }
        self.step += 1;
        Ok(MetricsEvent {
            step,
            epoch,
            loss: out.breakdown,
            lr: self.cfg.optim.lr,
            grad_norm: norm,
            wall_ms: self
                .cfg
                .run
                .log_wall_clock
                .then(|| started.elapsed().as_secs_f64() * 1e3),
            eval: None,
        })
    }

    fn apply(&mut self, grads: &[Tensor], factor: f64) {
        let o = &self.cfg.optim;
        let lr = o.lr;
        match &mut self.adam {
            None => {
                let mut it = grads.iter();
                self.params = self.params.map(|p| {
                    let g = it.next().expect("one gradient per parameter");
                    let mut out = p.clone();
                    for (x, &d) in out.data_mut().iter_mut().zip(g.data()) {
                        *x -= lr * factor * d;
                    }
                    out
                });
            }
            Some(st) => {
                st.t += 1;
                let (b1, b2) = (o.beta1, o.beta2);
                let c1 = 1.0 - b1.powi(st.t as i32);
                let c2 = 1.0 - b2.powi(st.t as i32);
                let mut ms: Vec<Tensor> = st.m.values().into_iter().cloned().collect();
                let mut vs: Vec<Tensor> = st.v.values().into_iter().cloned().collect();
                let mut ps: Vec<Tensor> = self.params.values().into_iter().cloned().collect();
                for (((p, m), v), g) in ps.iter_mut().zip(&mut ms).zip(&mut vs).zip(grads) {
                    let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
                    for i in 0..g.numel() {
                        let d = factor * g.data()[i];
                        md[i] = b1 * md[i] + (1.0 - b1) * d;
                        vd[i] = b2 * vd[i] + (1.0 - b2) * d * d;
                        pd[i] -= lr * (md[i] / c1) / ((vd[i] / c2).sqrt() + o.adam_eps);
                    }
                }
                let n = self.cfg.model.n_layers;
                st.m = ModelParams::from_values(n, ms).expect("same layout");
                st.v = ModelParams::from_values(n, vs).expect("same layout");
                self.params = ModelParams::from_values(n, ps).expect("same layout");
            }
        }
    }

    pub fn evaluate_val(&self) -> Result<EvalSummary> {
        evaluate_summary(&self.cfg, &self.params, self.val)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model_config: self.cfg.model.clone(),
            run_config: Some(self.cfg.clone()),
            step: self.step,
            params: self.params.clone(),
            momentum: self.momentum.clone(),
            adam: self.adam.clone(),
        }
    }
}

/// Accuracy, IoU and final applied-layer attention over `samples`.
pub fn evaluate_summary(cfg: &RunConfig, params: &ModelParams, samples: &[GroundingSample]) -> Result<EvalSummary> {
    let layers = &cfg.attbalance.applied_layers;
    let records = collect(&cfg.model, params, samples, layers)?;
    let n = records.len();
    Ok(EvalSummary {
        n,
        acc_at_0_5: accuracy(&records, 0.5)?,
        mean_iou: records.iter().map(|r| r.iou).sum::<f64>() / n as f64,
        mean_in_mask_final: records
            .iter()
            .map(|r| r.in_mask.last().copied().unwrap_or(0.0))
            .sum::<f64>()
            / n as f64,
    })
}

pub fn check_dataset(cfg: &RunConfig, dataset: &Dataset) -> Result<()> {
    if dataset.config != cfg.dataset {
        return Err(Error::Config(
            "dataset file was generated from a different [dataset] config".into(),
        ));
    }
    if dataset.train.is_empty() {
        return Err(Error::Config("dataset has no training samples".into()));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub steps: u64,
    pub final_eval: Option<EvalSummary>,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub resume: Option<Checkpoint>,
    /// Stop after this many total steps (for interrupted-run tests).
    pub stop_at: Option<u64>,
}

/// Trains to completion, streaming metrics to `<out_dir>/metrics.jsonl`
/// and checkpoints to `<out_dir>/checkpoint.ckpt`.
///
/// On a numerical failure the last checkpoint on disk is left untouched.
pub fn train(cfg: &RunConfig, dataset: &Dataset, opts: TrainOptions) -> Result<TrainOutcome> {
    let out_dir = &cfg.run.out_dir;
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join(CONFIG_FILE), cfg.to_toml()?)?;
    let resuming = opts.resume.is_some();
    let mut trainer = match opts.resume {
        Some(c) => Trainer::from_checkpoint(cfg, dataset, c)?,
        None => Trainer::new(cfg, dataset)?,
    };
    let metrics_path = out_dir.join(METRICS_FILE);
    let ckpt_path = out_dir.join(CHECKPOINT_FILE);
    let mut metrics = open_metrics(&metrics_path, resuming, trainer.step)?;
    let total = trainer.total_steps();
    let end = opts.stop_at.map_or(total, |s| s.min(total));
    let spe = trainer.steps_per_epoch();
    let every = |n: usize, epoch_done: u64, last: bool| last || (n > 0 && epoch_done.is_multiple_of(n as u64));
    let mut final_eval = None;
    while trainer.step < end {
        let mut event = trainer.step_once()?;
        let done = trainer.step;
        let last = done == total;
        if done % spe == 0 || last {
            let epoch_done = done.div_ceil(spe);
            if !trainer.val.is_empty() && every(cfg.run.eval_every, epoch_done, last) {
                let e = trainer.evaluate_val()?;
                if last {
                    final_eval = Some(e.clone());
                }
                event.eval = Some(e);
            }
            if every(cfg.run.checkpoint_every, epoch_done, last) {
                trainer.checkpoint().save(&ckpt_path)?;
            }
        }
        serde_json::to_writer(&mut metrics, &event)?;
        metrics.write_all(b"\n")?;
    }
    metrics.flush()?;
    if trainer.step < total {
        trainer.checkpoint().save(&ckpt_path)?;
    }
    Ok(TrainOutcome {
        steps: trainer.step,
        final_eval,
        checkpoint: ckpt_path,
        metrics: metrics_path,
    })
}

/// Opens the metrics stream; on resume, keeps only events before `step` so
/// the stream stays append-only and free of duplicates.
fn open_metrics(path: &Path, resuming: bool, step: u64) -> Result<BufWriter<File>> {
    if resuming && path.exists() {
        let text = std::fs::read_to_string(path)?;
        let mut kept = String::new();
        for line in text.lines() {
            let e: MetricsEvent = serde_json::from_str(line)?;
            if e.step < step {
                kept.push_str(line);
                kept.push('\n');
            }
        }
        std::fs::write(path, kept)?;
        Ok(BufWriter::new(OpenOptions::new().append(true).open(path)?))
    } else {
        Ok(BufWriter::new(File::create(path)?))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsEvent>> {
    std::fs::read_to_string(path)?
        .lines()
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
