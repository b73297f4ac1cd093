//! Evaluation, run comparison and the gradient-check command.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{analyze, collect, AnalysisReport, CurveBinning, EvalRecord, LayerRho};
use crate::attbalance::{mrc_loss, rac_loss, relative_rho, AttBalanceConfig};
use crate::error::{Error, Result};
use crate::geometry::{giou_loss, l1_loss, rasterize_mask};
use crate::model::{forward, init_params, param_names, ModelConfig, ModelParams, Params};
use crate::momentum::MomentumState;
use crate::numerics::{grad_check_with_fault, GradCheckReport, GradFault, Tape, Var};
use crate::objective::{batch_objective, TrainMode};
use crate::synth::{generate, read_dataset, Dataset, DatasetConfig, GroundingSample};

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::train::CHECKPOINT_FILE;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    #[default]
    Val,
}

impl Split {
    pub fn of(self, ds: &Dataset) -> &[GroundingSample] {
        match self {
            Split::Train => &ds.train,
            Split::Val => &ds.val,
        }
    }
}

/// Errors unless samples of `ds` fit the model described by `cfg`.
pub fn check_compatible(cfg: &ModelConfig, ds: &DatasetConfig) -> Result<()> {
    let pairs = [
        ("grid_rows", cfg.grid_rows, ds.grid_rows),
        ("grid_cols", cfg.grid_cols, ds.grid_cols),
        ("max_text_len", cfg.max_text_len, ds.max_text_len),
        ("vocab_size", cfg.vocab_size, ds.vocab().size()),
        ("visual_dim", cfg.visual_dim, ds.feature_dim()),
    ];
    for (name, model, data) in pairs {
        if model != data {
            return Err(Error::Config(format!(
                "checkpoint and dataset disagree on {name}: model {model}, dataset {data}"
            )));
        }
    }
    Ok(())
}

/// Records of `samples` under `ckpt`, capturing `layers` (all layers when
/// `None`).
pub fn eval_records(
    ckpt: &Checkpoint,
    ds: &Dataset,
    split: Split,
    layers: Option<&[usize]>,
) -> Result<(Vec<usize>, Vec<EvalRecord>)> {
    let cfg = &ckpt.model_config;
    check_compatible(cfg, &ds.config)?;
    let layers: Vec<usize> = layers.map_or_else(|| (0..cfg.n_layers).collect(), <[usize]>::to_vec);
    let samples = split.of(ds);
    if samples.is_empty() {
        return Err(Error::Config(format!("{split:?} split is empty")));
    }
    Ok((layers.clone(), collect(cfg, &ckpt.params, samples, &layers)?))
}

pub fn evaluate(
    ckpt: &Checkpoint,
    ds: &Dataset,
    split: Split,
    layers: Option<&[usize]>,
    binning: CurveBinning,
) -> Result<AnalysisReport> {
    let (layers, records) = eval_records(ckpt, ds, split, layers)?;
    analyze(&records, &layers, binning)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub step: u64,
    pub mode: TrainMode,
    pub acc_at_0_5: f64,
    pub mean_iou: f64,
    /// Last layer of the run's applied set.
    pub final_applied_layer: usize,
    pub final_layer_in_mask: f64,
    pub rho_profile: Vec<LayerRho>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Deltas {
    pub acc_at_0_5: f64,
    pub mean_iou: f64,
    pub final_layer_in_mask: f64,
    /// `b - a` per layer; absent where the layer is missing from either run.
    pub rho_profile: Vec<(usize, Option<f64>)>,
}

/// Side-by-side evaluation of two runs; every delta is `b - a`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub split: Split,
    pub a: RunSummary,
    pub b: RunSummary,
    pub deltas: Deltas,
    pub config_a: RunConfig,
    pub config_b: RunConfig,
    pub notes: Vec<String>,
}

fn summarize(dir: &Path, ds: &Dataset, split: Split) -> Result<(RunSummary, RunConfig)> {
    let ckpt = Checkpoint::load(&dir.join(CHECKPOINT_FILE))?;
    let cfg = ckpt
        .run_config
        .clone()
        .ok_or_else(|| Error::Config(format!("{} has no embedded run config", dir.display())))?;
    if cfg.dataset != ds.config {
        return Err(Error::Config(format!(
            "{} was trained on a different dataset than the one given",
            dir.display()
        )));
    }
    let (layers, records) = eval_records(&ckpt, ds, split, None)?;
    let report = analyze(&records, &layers, CurveBinning::default())?;
    let last = *cfg
        .attbalance
        .applied_layers
        .last()
        .ok_or_else(|| Error::Config("empty applied_layers".into()))?;
    Ok((
        RunSummary {
            run_dir: dir.to_path_buf(),
            step: ckpt.step,
            mode: cfg.run.mode,
            acc_at_0_5: report.acc_at_0_5,
            mean_iou: report.mean_iou,
            final_applied_layer: last,
            final_layer_in_mask: report.mean_in_mask[last],
            rho_profile: report.rho_profile,
        },
        cfg,
    ))
}

pub fn compare(run_a: &Path, run_b: &Path, ds: &Dataset, split: Split) -> Result<ComparisonReport> {
    let (a, config_a) = summarize(run_a, ds, split)?;
    let (b, config_b) = summarize(run_b, ds, split)?;
    let rho_profile = a
        .rho_profile
        .iter()
        .map(|ra| {
            let d = b
                .rho_profile
                .iter()
                .find(|rb| rb.layer == ra.layer)
                .map(|rb| rb.rho - ra.rho);
            (ra.layer, d)
        })
        .collect();
    let mut notes = Vec::new();
    if config_a.run.seed != config_b.run.seed {
        notes.push(format!(
            "runs use different seeds ({} vs {})",
            config_a.run.seed, config_b.run.seed
        ));
    }
    if a.step != b.step {
        notes.push(format!("runs stopped at different steps ({} vs {})", a.step, b.step));
    }
    if a.final_applied_layer != b.final_applied_layer {
        notes.push("final applied layers differ; in-mask delta compares different layers".into());
    }
    Ok(ComparisonReport {
        split,
        deltas: Deltas {
            acc_at_0_5: b.acc_at_0_5 - a.acc_at_0_5,
            mean_iou: b.mean_iou - a.mean_iou,
            final_layer_in_mask: b.final_layer_in_mask - a.final_layer_in_mask,
            rho_profile,
        },
        a,
        b,
        config_a,
        config_b,
        notes,
    })
}

// ---- gradient check ------------------------------------------------------

pub const GRAD_CHECK_STEP: f64 = 1e-6;
pub const GRAD_CHECK_TOL: f64 = 1e-4;

/// Objective whose gradient is checked.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Rac,
    Mrc,
    L1,
    Giou,
    Total,
}

impl Component {
    pub const ALL: [Component; 5] = [Self::Rac, Self::Mrc, Self::L1, Self::Giou, Self::Total];

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "rac" => Self::Rac,
            "mrc" => Self::Mrc,
            "l1" => Self::L1,
            "giou" => Self::Giou,
            "total" => Self::Total,
            _ => return None,
        })
    }
}

/// Two-layer model on a 4x4 grid, small enough for finite differences
/// over every parameter.
pub fn tiny_reference(seed: u64) -> (ModelConfig, AttBalanceConfig, DatasetConfig) {
    let ds = DatasetConfig {
        n_train: 2,
        n_val: 0,
        grid_rows: 4,
        grid_cols: 4,
        max_objects: 3,
        seed,
        ..DatasetConfig::default()
    };
    let model = ModelConfig {
        d_model: 8,
        n_heads: 2,
        n_layers: 2,
        grid_rows: 4,
        grid_cols: 4,
        mlp_hidden: 8,
        vocab_size: ds.vocab().size(),
        visual_dim: ds.feature_dim(),
        max_text_len: ds.max_text_len,
        ..ModelConfig::default()
    };
    let acfg = AttBalanceConfig {
        applied_layers: vec![0, 1],
        ..AttBalanceConfig::default()
    };
    (model, acfg, ds)
}

/// Finite-difference check of one loss component on a 2-sample batch of
/// the tiny reference model. `fault` corrupts one analytic rule.
pub fn gradient_check(component: Component, seed: u64, fault: Option<GradFault>) -> Result<GradCheckReport> {
    let (cfg, acfg, dcfg) = tiny_reference(seed);
    let samples = generate(&dcfg)?.train;
    let params = init_params(&cfg, seed)?;
    // a shadow away from the live weights, so the consistency term has a gradient
    let shadow = MomentumState::init(&init_params(&cfg, seed.wrapping_add(77))?, acfg.momentum)?;
    let mom = samples
        .iter()
        .map(|s| shadow.forward(&cfg, s, &acfg.applied_layers))
        .collect::<Result<Vec<_>>>()?;
    let frozen = {
        let mut tape = Tape::no_grad();
        let bound = params.bind(&mut tape);
        batch_objective(
            &mut tape,
            &cfg,
            &bound,
            &samples,
            TrainMode::Attbalance,
            &acfg,
            0,
            Some(&mom),
            None,
        )?
        .constants()
    };
    let rel = relative_rho(&frozen.rho)?;
    let f = |tape: &mut Tape, vars: &[Var]| -> Result<Var> {
        let bound: Params<Var> = Params::from_values(cfg.n_layers, vars.to_vec())?;
        if component == Component::Total {
            let out = batch_objective(
                tape,
                &cfg,
                &bound,
                &samples,
                TrainMode::Attbalance,
                &acfg,
                0,
                Some(&mom),
                Some(&frozen),
            )?;
            return Ok(out.loss);
        }
        let mut acc: Option<Var> = None;
        for (s, sample) in samples.iter().enumerate() {
            let out = forward(tape, &cfg, &bound, sample, &acfg.applied_layers)?;
            let term = match component {
                Component::L1 => l1_loss(tape, out.pred, &sample.gt, acfg.l1_reduction)?,
                Component::Giou => giou_loss(tape, out.pred, &sample.gt)?,
                Component::Rac => {
                    let mask = rasterize_mask(&sample.gt, cfg.grid_rows, cfg.grid_cols)?;
                    rac_loss(tape, &out.attn, &mask, &rel, acfg.eps_log)?
                }
                Component::Mrc => mrc_loss(tape, &mom[s], &out.attn, acfg.eps_log)?,
                Component::Total => unreachable!(),
            };
            acc = Some(match acc {
                Some(a) => tape.add(a, term)?,
                None => term,
            });
        }
        let sum = acc.ok_or_else(|| Error::Contract("empty batch".into()))?;
        Ok(tape.scale(sum, 1.0 / samples.len() as f64))
    };
    let named: Vec<_> = param_names(cfg.n_layers)
        .into_iter()
        .zip(params.values().into_iter().cloned())
        .collect();
    grad_check_with_fault(f, &named, GRAD_CHECK_STEP, GRAD_CHECK_TOL, fault)
}

/// Reads `run.dataset_path` when set, otherwise generates the dataset.
pub fn dataset_for(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.run.dataset_path {
        Some(p) => {
            let ds = read_dataset(BufReader::new(File::open(p)?))?;
            if ds.config != cfg.dataset {
                return Err(Error::Config(format!(
                    "{} was generated from a different [dataset] config",
                    p.display()
                )));
            }
            Ok(ds)
        }
        None => generate(&cfg.dataset),
    }
}

/// Parameters of an untrained model for `cfg`, for baseline evaluations.
pub fn untrained(cfg: &RunConfig) -> Result<Checkpoint> {
    let params: ModelParams = init_params(&cfg.model, cfg.run.seed)?;
    Ok(Checkpoint {
        model_config: cfg.model.clone(),
        run_config: Some(cfg.clone()),
        step: 0,
        params,
        momentum: None,
        adam: None,
    })
}
