//! Batch objective: model forward, per-sample loss terms, rho estimation
//! and total-loss assembly for one minibatch.

use serde::{Deserialize, Serialize};

use crate::attbalance::{
    batch_rho, mrc_terms, rac_terms, total_loss_gated, AttBalanceConfig, LossBreakdown, LossConstants, RhoMode,
    SampleTerms,
};
use crate::error::{Error, Result};
use crate::geometry::{giou_loss, iou, l1_loss, rasterize_mask, BoxSpec};
use crate::model::{forward, BoundParams, CapturedAttention, ModelConfig};
use crate::numerics::{Tape, Var};
use crate::synth::GroundingSample;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Box losses only, no momentum model.
    Baseline,
    #[default]
    Attbalance,
}

#[derive(Clone, Debug)]
pub struct BatchOutput {
    pub loss: Var,
    pub breakdown: LossBreakdown,
    pub preds: Vec<BoxSpec>,
    pub ious: Vec<f64>,
    /// `[layer][sample]` in-mask attention sums of the applied layers.
    pub in_mask: Vec<Vec<f64>>,
}

impl BatchOutput {
    /// Constants that reproduce this batch's weighting at other parameter
    /// values (used to hold them fixed under finite differences).
    pub fn constants(&self) -> LossConstants {
        LossConstants {
            rho: self.breakdown.rho.clone(),
            w_adw: self.breakdown.attbalance_active.then_some(self.breakdown.w_adw),
        }
    }
}

/// Whether the batch at `epoch` uses the attention terms.
pub fn regularized(mode: TrainMode, cfg: &AttBalanceConfig, epoch: usize) -> bool {
    mode == TrainMode::Attbalance && cfg.active(epoch)
}

/// Runs the whole objective on `tape`.
///
/// `momentum` holds one captured stack of the applied layers per sample and
/// is required whenever the batch is regularized. `frozen` replaces the
/// rhos and W_adw estimated from this batch.
#[allow(clippy::too_many_arguments)]
pub fn batch_objective(
    tape: &mut Tape,
    mcfg: &ModelConfig,
    params: &BoundParams,
    samples: &[GroundingSample],
    mode: TrainMode,
    acfg: &AttBalanceConfig,
    epoch: usize,
    momentum: Option<&[CapturedAttention]>,
    frozen: Option<&LossConstants>,
) -> Result<BatchOutput> {
    let active = regularized(mode, acfg, epoch);
    let capture: &[usize] = if active { &acfg.applied_layers } else { &[] };
    let momentum = match (active, momentum) {
        (false, _) => None,
        (true, Some(m)) if m.len() == samples.len() => Some(m),
        (true, Some(m)) => {
            return Err(Error::Contract(format!(
                "{} momentum stacks for {} samples",
                m.len(),
                samples.len()
            )))
        }
        (true, None) => return Err(Error::Contract("regularized batch needs momentum targets".into())),
    };

    let mut terms = Vec::with_capacity(samples.len());
    let mut preds = Vec::with_capacity(samples.len());
    let mut ious = Vec::with_capacity(samples.len());
    let mut in_mask = vec![Vec::with_capacity(samples.len()); capture.len()];
    for (s, sample) in samples.iter().enumerate() {
        let out = forward(tape, mcfg, params, sample, capture)?;
        let v = tape.value(out.pred).data();
        let pred = BoxSpec {
            cx: v[0],
            cy: v[1],
            w: v[2],
            h: v[3],
        };
        ious.push(iou(&pred, &sample.gt));
        preds.push(pred);
        let l1 = l1_loss(tape, out.pred, &sample.gt, acfg.l1_reduction)?;
        let giou = giou_loss(tape, out.pred, &sample.gt)?;
        let (rac, mrc) = if let Some(mom) = momentum {
            let mask = rasterize_mask(&sample.gt, mcfg.grid_rows, mcfg.grid_cols)?;
            for (i, &map) in out.attn.maps.iter().enumerate() {
                in_mask[i].push(mask.masked_sum(tape.value(map).data()));
            }
            (
                rac_terms(tape, &out.attn, &mask, acfg.eps_log)?,
                mrc_terms(tape, &mom[s], &out.attn, acfg.eps_log)?,
            )
        } else {
            (Vec::new(), Vec::new())
        };
        terms.push(SampleTerms {
            rac,
            mrc,
            l1,
            giou,
            box_ratio: sample.box_ratio(),
        });
    }

    let consts = match frozen {
        Some(c) => c.clone(),
        None => LossConstants {
            rho: in_mask
                .iter()
                .map(|x| match acfg.rho_mode {
                    RhoMode::BatchSpearman => batch_rho(x, &ious),
                    RhoMode::Disabled => 1.0,
                })
                .collect(),
            w_adw: None,
        },
    };
    let (loss, breakdown) = total_loss_gated(tape, &terms, &consts, acfg, active)?;
    Ok(BatchOutput {
        loss,
        breakdown,
        preds,
        ious,
        in_mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, param_names, ModelParams, Params};
    use crate::momentum::MomentumState;
    use crate::numerics::{grad_check_with_fault, GradCheckReport, GradFault};
    use crate::synth::{generate, DatasetConfig};

    fn tiny() -> (ModelConfig, ModelParams, Vec<GroundingSample>) {
        let ds = generate(&DatasetConfig {
            n_train: 4,
            n_val: 0,
            grid_rows: 4,
            grid_cols: 4,
            max_objects: 3,
            ..DatasetConfig::default()
        })
        .unwrap();
        let cfg = ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            grid_rows: 4,
            grid_cols: 4,
            mlp_hidden: 8,
            vocab_size: ds.config.vocab().size(),
            visual_dim: ds.config.feature_dim(),
            ..ModelConfig::default()
        };
        let p = init_params(&cfg, 3).unwrap();
        (cfg, p, ds.train)
    }

    fn acfg() -> AttBalanceConfig {
        AttBalanceConfig {
            applied_layers: vec![0, 1],
            ..AttBalanceConfig::default()
        }
    }

    #[test]
    fn baseline_needs_no_momentum() {
        let (cfg, p, samples) = tiny();
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape);
        let out = batch_objective(
            &mut tape,
            &cfg,
            &bound,
            &samples,
            TrainMode::Baseline,
            &acfg(),
            0,
            None,
            None,
        )
        .unwrap();
        assert!(!out.breakdown.attbalance_active);
        assert!(out.in_mask.is_empty());
        assert!(batch_objective(
            &mut tape,
            &cfg,
            &bound,
            &samples,
            TrainMode::Attbalance,
            &acfg(),
            0,
            None,
            None
        )
        .is_err());
    }

    #[test]
    fn fresh_momentum_gives_zero_mrc() {
        let (cfg, p, samples) = tiny();
        let st = MomentumState::init(&p, 0.9).unwrap();
        let mom: Vec<_> = samples.iter().map(|s| st.forward(&cfg, s, &[0, 1]).unwrap()).collect();
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape);
        let out = batch_objective(
            &mut tape,
            &cfg,
            &bound,
            &samples,
            TrainMode::Attbalance,
            &acfg(),
            0,
            Some(&mom),
            None,
        )
        .unwrap();
        assert!(out.breakdown.l_mrc.abs() < 1e-12);
        assert!(out.breakdown.total.is_finite());
        assert!((out.breakdown.recompose(&acfg()) - out.breakdown.total).abs() < 1e-12);
    }

    fn check_total(fault: Option<GradFault>) -> GradCheckReport {
        let (cfg, p, samples) = tiny();
        let samples = &samples[..2];
        // targets from a perturbed shadow so the KL term has a gradient
        let shadow = init_params(&cfg, 77).unwrap();
        let st = MomentumState::init(&shadow, 0.9).unwrap();
        let mom: Vec<_> = samples.iter().map(|s| st.forward(&cfg, s, &[0, 1]).unwrap()).collect();
        let a = acfg();
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape);
        let base = batch_objective(
            &mut tape,
            &cfg,
            &bound,
            samples,
            TrainMode::Attbalance,
            &a,
            0,
            Some(&mom),
            None,
        )
        .unwrap()
        .constants();
        let named: Vec<(String, _)> = param_names(cfg.n_layers)
            .into_iter()
            .zip(p.values().into_iter().cloned())
            .collect();
        let f = |tape: &mut Tape, vars: &[Var]| {
            let bound = Params::from_values(cfg.n_layers, vars.to_vec())?;
            Ok(batch_objective(
                tape,
                &cfg,
                &bound,
                samples,
                TrainMode::Attbalance,
                &a,
                0,
                Some(&mom),
                Some(&base),
            )?
            .loss)
        };
        grad_check_with_fault(f, &named, 1e-6, 1e-4, fault).unwrap()
    }

    #[test]
    fn total_gradient_matches_finite_differences() {
        let report = check_total(None);
        assert!(
            report.passed,
            "{:?}",
            report.params.iter().filter(|p| !p.passed).collect::<Vec<_>>()
        );
        assert_eq!(report.params.len(), param_names(2).len());
    }

    #[test]
    fn corrupted_layer_norm_rule_is_caught() {
        let report = check_total(Some(GradFault::LayerNorm));
        assert!(!report.passed);
    }
}
