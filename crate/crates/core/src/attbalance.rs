//! Attention regularization and difficulty-adaptive loss weighting.
//!
//! Per captured layer `i` with attention `a_i` and ground-truth mask `M`:
//!
//! ```text
//! rac_i  = -log(sum a_i*M) - log(1 - sum a_i*(1-M))
//! mrc_i  = KL(a_i^mom || a_i)
//! L_ar   = sum_i rho'_i rac_i + sum_i mrc_i,   rho'_i = rho_i - mean(rho) + 1
//! W_adw  = 0.5 + sigmoid(L_ar without rho)
//! W_odw  = 0.5 + 1 / (1 + exp(box_ratio - 1))
//! L      = a_ar L_ar + W_odw W_adw (a_1 L_1 + a_g L_giou)
//! ```
//!
//! Rhos and both weights are plain numbers: they scale the loss but carry
//! no gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{L1Reduction, SegMask};
use crate::model::{AttentionStack, CapturedAttention};
use crate::numerics::{sigmoid, Tape, Tensor, Var, EPS_LOG};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RhoMode {
    /// Spearman rho over the current minibatch.
    #[default]
    BatchSpearman,
    /// Every layer weighted equally (`rho' = 1`).
    Disabled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttBalanceConfig {
    pub alpha_ar: f64,
    pub alpha_1: f64,
    pub alpha_g: f64,
    pub applied_layers: Vec<usize>,
    /// Regularization is active while `epoch < attbalance_epochs`; `None`
    /// keeps it on for the whole run.
    pub attbalance_epochs: Option<usize>,
    pub momentum: f64,
    pub rho_mode: RhoMode,
    pub eps_log: f64,
    pub l1_reduction: L1Reduction,
}

impl Default for AttBalanceConfig {
    fn default() -> Self {
        Self {
            alpha_ar: 1.0,
            alpha_1: 1.0,
            alpha_g: 1.0,
            applied_layers: vec![2, 3, 4, 5],
            attbalance_epochs: None,
            momentum: 0.9,
            rho_mode: RhoMode::BatchSpearman,
            eps_log: EPS_LOG,
            l1_reduction: L1Reduction::Mean,
        }
    }
}

impl AttBalanceConfig {
    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if !(self.momentum > 0.0 && self.momentum < 1.0) {
            return Err(Error::Config(format!("momentum {} outside (0, 1)", self.momentum)));
        }
        if self.applied_layers.is_empty() {
            return Err(Error::Config("applied_layers is empty".into()));
        }
        if self.applied_layers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("applied_layers must be strictly increasing".into()));
        }
        if let Some(l) = self.applied_layers.iter().find(|&&l| l >= n_layers) {
            return Err(Error::Config(format!("applied layer {l} >= n_layers {n_layers}")));
        }
        if !(self.eps_log > 0.0 && self.eps_log < 1.0) {
            return Err(Error::Config("eps_log must lie in (0, 1)".into()));
        }
        for (name, a) in [
            ("alpha_ar", self.alpha_ar),
            ("alpha_1", self.alpha_1),
            ("alpha_g", self.alpha_g),
        ] {
            if !(a.is_finite() && a >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and non-negative")));
            }
        }
        Ok(())
    }

    pub fn active(&self, epoch: usize) -> bool {
        self.attbalance_epochs.is_none_or(|n| epoch < n)
    }
}

/// `rho_i - mean(rho) + 1`.
pub fn relative_rho(rhos: &[f64]) -> Result<Vec<f64>> {
    if rhos.is_empty() {
        return Err(Error::Contract("relative_rho of an empty list".into()));
    }
    if rhos.iter().any(|r| !r.is_finite()) {
        return Err(Error::NonFinite(format!("rho values {rhos:?}")));
    }
    let mean = rhos.iter().sum::<f64>() / rhos.len() as f64;
    Ok(rhos.iter().map(|r| r - mean + 1.0).collect())
}

/// Ranks starting at 1; tied values share their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && x[order[j]] == x[order[i]] {
            j += 1;
        }
        // positions i..j share ranks i+1..=j
        let rank = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = rank;
        }
        i = j;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties.
///
/// Fewer than two points, or a side with all values tied, yields 1.0.
pub fn batch_rho(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "batch_rho needs paired samples");
    if x.len() < 2 {
        return 1.0;
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return 1.0;
    }
    (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)
}

fn check_mask(tape: &Tape, map: Var, mask: &SegMask) -> Result<()> {
    if tape.value(map).numel() != mask.len() {
        return Err(Error::dim("rac_loss", tape.shape(map), &[mask.rows, mask.cols]));
    }
    Ok(())
}

/// Sum of a map over the cells of `mask`, on the tape.
pub fn masked_mass(tape: &mut Tape, map: Var, mask: &SegMask) -> Result<Var> {
    check_mask(tape, map, mask)?;
    let m = tape.constant(mask.to_tensor());
    let prod = tape.mul(map, m)?;
    Ok(tape.sum_all(prod))
}

/// Unweighted two-term BCE for each captured layer.
pub fn rac_terms(tape: &mut Tape, attn: &AttentionStack, mask: &SegMask, eps_log: f64) -> Result<Vec<Var>> {
    let outside = mask.complement();
    attn.maps
        .iter()
        .map(|&map| {
            let inside = masked_mass(tape, map, mask)?;
            let out = masked_mass(tape, map, &outside)?;
            let t_in = tape.log(inside, eps_log);
            let neg_out = tape.neg(out);
            let keep = tape.add_scalar(neg_out, 1.0);
            let t_out = tape.log(keep, eps_log);
            let sum = tape.add(t_in, t_out)?;
            Ok(tape.neg(sum))
        })
        .collect()
}

/// `sum_i rel_rho_i * rac_i`.
pub fn rac_loss(tape: &mut Tape, attn: &AttentionStack, mask: &SegMask, rel_rhos: &[f64], eps_log: f64) -> Result<Var> {
    if rel_rhos.len() != attn.maps.len() {
        return Err(Error::Contract(format!(
            "{} rho weights for {} captured layers",
            rel_rhos.len(),
            attn.maps.len()
        )));
    }
    let terms = rac_terms(tape, attn, mask, eps_log)?;
    weighted_sum(tape, &terms, rel_rhos)
}

fn weighted_sum(tape: &mut Tape, terms: &[Var], weights: &[f64]) -> Result<Var> {
    let mut acc = tape.scalar(0.0);
    for (&t, &w) in terms.iter().zip(weights) {
        let s = tape.scale(t, w);
        acc = tape.add(acc, s)?;
    }
    Ok(acc)
}

/// `KL(mom_i || attn_i)` for each layer; `mom` is a constant target.
pub fn mrc_terms(tape: &mut Tape, mom: &CapturedAttention, attn: &AttentionStack, eps_log: f64) -> Result<Vec<Var>> {
    if mom.layers != attn.layers {
        return Err(Error::Contract(format!(
            "momentum layers {:?} differ from live layers {:?}",
            mom.layers, attn.layers
        )));
    }
    mom.maps
        .iter()
        .zip(&attn.maps)
        .map(|(target, &map)| {
            if target.len() != tape.value(map).numel() {
                return Err(Error::dim("mrc_loss", &[target.len()], tape.shape(map)));
            }
            let entropy_part: f64 = target.iter().map(|&p| p * p.max(eps_log).ln()).sum();
            let t = tape.constant(Tensor::vector(target.clone()));
            let log_a = tape.log(map, eps_log);
            let cross = tape.mul(t, log_a)?;
            let cross = tape.sum_all(cross);
            let neg = tape.neg(cross);
            Ok(tape.add_scalar(neg, entropy_part))
        })
        .collect()
}

pub fn mrc_loss(tape: &mut Tape, mom: &CapturedAttention, attn: &AttentionStack, eps_log: f64) -> Result<Var> {
    let terms = mrc_terms(tape, mom, attn, eps_log)?;
    weighted_sum(tape, &terms, &vec![1.0; terms.len()])
}

/// Actual difficulty weight from the rho-free regularization loss.
pub fn adw(l_ar_plain: f64) -> f64 {
    0.5 + sigmoid(l_ar_plain)
}

/// Objective difficulty weight from the box-to-image area ratio.
pub fn odw(box_ratio: f64) -> Result<f64> {
    if !(box_ratio > 0.0 && box_ratio <= 1.0) {
        return Err(Error::Contract(format!("box ratio {box_ratio} outside (0, 1]")));
    }
    Ok(0.5 + 1.0 / (1.0 + (box_ratio - 1.0).exp()))
}

/// Loss components of one sample, as tape nodes.
#[derive(Clone, Debug)]
pub struct SampleTerms {
    /// Per applied layer; empty when regularization is off.
    pub rac: Vec<Var>,
    pub mrc: Vec<Var>,
    pub l1: Var,
    pub giou: Var,
    pub box_ratio: f64,
}

/// Values that enter the loss as constants.
#[derive(Clone, Debug, PartialEq)]
pub struct LossConstants {
    /// Raw per-layer rho.
    pub rho: Vec<f64>,
    /// Overrides the weight derived from the current batch.
    pub w_adw: Option<f64>,
}

/// All scalar components of one batch loss.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rac_layers: Vec<f64>,
    pub rho: Vec<f64>,
    pub rel_rho: Vec<f64>,
    pub mrc_layers: Vec<f64>,
    pub l_rac: f64,
    pub l_mrc: f64,
    pub l_ar: f64,
    pub l_ar_plain: f64,
    pub w_adw: f64,
    /// Box-loss-weighted mean of the per-sample weights, so that
    /// `total = alpha_ar l_ar + w_odw w_adw (alpha_1 l_1 + alpha_g l_giou)`.
    pub w_odw: f64,
    pub w_odw_per_sample: Vec<f64>,
    pub l_1: f64,
    pub l_giou: f64,
    pub total: f64,
    pub attbalance_active: bool,
}

impl LossBreakdown {
    /// Total loss rebuilt from the logged scalars.
    pub fn recompose(&self, cfg: &AttBalanceConfig) -> f64 {
        let boxes = cfg.alpha_1 * self.l_1 + cfg.alpha_g * self.l_giou;
        if self.attbalance_active {
            cfg.alpha_ar * self.l_ar + self.w_odw * self.w_adw * boxes
        } else {
            boxes
        }
    }
}

fn finite(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("loss component {name} = {v}")))
    }
}

fn batch_mean(tape: &mut Tape, vars: &[Var]) -> Result<Var> {
    let s = tape.stack(vars)?;
    let s = tape.sum_all(s);
    Ok(tape.scale(s, 1.0 / vars.len() as f64))
}

/// Assembles the batch objective (mean over samples) and its breakdown.
///
/// While `cfg.active(epoch)`, every sample needs one rac and mrc term per
/// entry of `consts.rho`; otherwise only the box losses are used.
pub fn total_loss(
    tape: &mut Tape,
    terms: &[SampleTerms],
    consts: &LossConstants,
    cfg: &AttBalanceConfig,
    epoch: usize,
) -> Result<(Var, LossBreakdown)> {
    total_loss_gated(tape, terms, consts, cfg, cfg.active(epoch))
}

/// [`total_loss`] with the regularization switch given directly.
pub fn total_loss_gated(
    tape: &mut Tape,
    terms: &[SampleTerms],
    consts: &LossConstants,
    cfg: &AttBalanceConfig,
    active: bool,
) -> Result<(Var, LossBreakdown)> {
    if terms.is_empty() {
        return Err(Error::Contract("total_loss on an empty batch".into()));
    }
    let b = terms.len() as f64;
    let l1s: Vec<Var> = terms.iter().map(|t| t.l1).collect();
    let gs: Vec<Var> = terms.iter().map(|t| t.giou).collect();
    let l1_mean = batch_mean(tape, &l1s)?;
    let g_mean = batch_mean(tape, &gs)?;
    let mut bd = LossBreakdown {
        l_1: finite("l_1", tape.item(l1_mean))?,
        l_giou: finite("l_giou", tape.item(g_mean))?,
        ..LossBreakdown::default()
    };

    if !active {
        let a = tape.scale(l1_mean, cfg.alpha_1);
        let g = tape.scale(g_mean, cfg.alpha_g);
        let total = tape.add(a, g)?;
        bd.w_adw = 1.0;
        bd.w_odw = 1.0;
        bd.w_odw_per_sample = vec![1.0; terms.len()];
        bd.total = finite("total", tape.item(total))?;
        return Ok((total, bd));
    }

    let n_layers = consts.rho.len();
    for (s, t) in terms.iter().enumerate() {
        if t.rac.len() != n_layers || t.mrc.len() != n_layers {
            return Err(Error::Contract(format!(
                "sample {s} has {} rac / {} mrc terms for {n_layers} layers",
                t.rac.len(),
                t.mrc.len()
            )));
        }
    }
    let rel = relative_rho(&consts.rho)?;
    let mut rac_means = Vec::with_capacity(n_layers);
    let mut mrc_means = Vec::with_capacity(n_layers);
    for i in 0..n_layers {
        let r: Vec<Var> = terms.iter().map(|t| t.rac[i]).collect();
        let m: Vec<Var> = terms.iter().map(|t| t.mrc[i]).collect();
        let r = batch_mean(tape, &r)?;
        let m = batch_mean(tape, &m)?;
        bd.rac_layers.push(finite(&format!("rac layer {i}"), tape.item(r))?);
        bd.mrc_layers.push(finite(&format!("mrc layer {i}"), tape.item(m))?);
        rac_means.push(r);
        mrc_means.push(m);
    }
    let l_rac = weighted_sum(tape, &rac_means, &rel)?;
    let l_mrc = weighted_sum(tape, &mrc_means, &vec![1.0; n_layers])?;
    let l_ar = tape.add(l_rac, l_mrc)?;
    bd.rho = consts.rho.clone();
    bd.rel_rho = rel;
    bd.l_rac = tape.item(l_rac);
    bd.l_mrc = tape.item(l_mrc);
    bd.l_ar = finite("l_ar", tape.item(l_ar))?;
    bd.l_ar_plain = bd.rac_layers.iter().sum::<f64>() + bd.l_mrc;
    bd.w_adw = consts.w_adw.unwrap_or_else(|| adw(bd.l_ar_plain));

    // w_adw * mean_s(w_odw_s * (a1 l1_s + ag g_s))
    let mut weighted = tape.scalar(0.0);
    let mut box_total = 0.0;
    let mut weighted_value = 0.0;
    for t in terms {
        let w = odw(t.box_ratio)?;
        bd.w_odw_per_sample.push(w);
        let a = tape.scale(t.l1, cfg.alpha_1);
        let g = tape.scale(t.giou, cfg.alpha_g);
        let boxes = tape.add(a, g)?;
        box_total += tape.item(boxes);
        weighted_value += w * tape.item(boxes);
        let wb = tape.scale(boxes, w);
        weighted = tape.add(weighted, wb)?;
    }
    bd.w_odw = if box_total > 0.0 {
        weighted_value / box_total
    } else {
        bd.w_odw_per_sample.iter().sum::<f64>() / b
    };
    let dat = tape.scale(weighted, bd.w_adw / b);
    let reg = tape.scale(l_ar, cfg.alpha_ar);
    let total = tape.add(reg, dat)?;
    bd.total = finite("total", tape.item(total))?;
    bd.attbalance_active = true;
    Ok((total, bd))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn stack_of(tape: &mut Tape, maps: &[Vec<f64>]) -> AttentionStack {
        let vars: Vec<Var> = maps.iter().map(|m| tape.leaf(Tensor::vector(m.clone()))).collect();
        AttentionStack {
            layers: (0..maps.len()).collect(),
            maps: vars.clone(),
            logits: vars,
        }
    }

    fn mask_4x4(cells: &[usize]) -> SegMask {
        let mut c = vec![0u8; 16];
        for &i in cells {
            c[i] = 1;
        }
        SegMask::from_cells(4, 4, c).unwrap()
    }

    #[test]
    fn relative_rho_examples() {
        let r = relative_rho(&[0.3, 0.5, 0.7]).unwrap();
        for (a, b) in r.iter().zip([0.8, 1.0, 1.2]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(relative_rho(&[0.4; 5]).unwrap(), vec![1.0; 5]);
        assert!(relative_rho(&[f64::NAN]).is_err());
    }

    #[test]
    fn rho_examples() {
        assert!((batch_rho(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-12);
        assert!((batch_rho(&[1.0, 2.0, 3.0], &[30.0, 20.0, 10.0]) + 1.0).abs() < 1e-12);
        let r = batch_rho(&[1.0, 2.0, 3.0, 4.0], &[2.0, 1.0, 4.0, 3.0]);
        assert!((r - 0.6).abs() < 1e-12);
        assert_eq!(batch_rho(&[1.0], &[2.0]), 1.0);
        assert_eq!(batch_rho(&[1.0, 2.0], &[5.0, 5.0]), 1.0);
    }

    #[test]
    fn ties_share_average_rank() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn rac_examples() {
        let mut tape = Tape::new();
        let mut concentrated = vec![0.0; 16];
        concentrated[5] = 0.5;
        concentrated[6] = 0.5;
        let attn = stack_of(&mut tape, &[concentrated, vec![1.0 / 16.0; 16]]);
        let mask = mask_4x4(&[5, 6, 9, 10]);
        let terms = rac_terms(&mut tape, &attn, &mask, EPS_LOG).unwrap();
        assert!(tape.item(terms[0]).abs() < 1e-12);
        assert!((tape.item(terms[1]) - 2.0 * 4f64.ln()).abs() < 1e-12);
        assert!((2.0 * 4f64.ln() - 2.772588722239781).abs() < 1e-12);
    }

    #[test]
    fn rac_rejects_wrong_grid() {
        let mut tape = Tape::new();
        let attn = stack_of(&mut tape, &[vec![0.25; 4]]);
        let err = rac_loss(&mut tape, &attn, &mask_4x4(&[0]), &[1.0], EPS_LOG).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn mrc_examples() {
        let mut tape = Tape::new();
        let attn = stack_of(&mut tape, &[vec![0.7, 0.1, 0.1, 0.1]]);
        let mom = CapturedAttention {
            layers: vec![0],
            maps: vec![vec![0.25; 4]],
            logits: vec![vec![0.0; 4]],
        };
        let l = mrc_loss(&mut tape, &mom, &attn, EPS_LOG).unwrap();
        let direct: f64 = [0.7, 0.1, 0.1, 0.1]
            .iter()
            .map(|a: &f64| 0.25 * (0.25f64.ln() - a.ln()))
            .sum();
        assert!((tape.item(l) - direct).abs() < 1e-12);
        assert!((tape.item(l) - 0.429_813).abs() < 1e-6);

        let same = CapturedAttention {
            layers: vec![0],
            maps: vec![vec![0.7, 0.1, 0.1, 0.1]],
            logits: vec![vec![0.0; 4]],
        };
        let z = mrc_loss(&mut tape, &same, &attn, EPS_LOG).unwrap();
        assert!(tape.item(z).abs() < 1e-15);

        let other = CapturedAttention {
            layers: vec![1],
            ..same
        };
        assert!(mrc_loss(&mut tape, &other, &attn, EPS_LOG).is_err());
    }

    #[test]
    fn mrc_target_gets_no_gradient() {
        let mut tape = Tape::new();
        let attn = stack_of(&mut tape, &[vec![0.4, 0.3, 0.2, 0.1]]);
        let mom = CapturedAttention {
            layers: vec![0],
            maps: vec![vec![0.1, 0.2, 0.3, 0.4]],
            logits: vec![vec![0.0; 4]],
        };
        let l = mrc_loss(&mut tape, &mom, &attn, EPS_LOG).unwrap();
        tape.backward(l).unwrap();
        let g = tape.grad(attn.maps[0]).unwrap().data().to_vec();
        // d/da_j of -sum p log a = -p_j / a_j
        for (j, (p, a)) in [0.1, 0.2, 0.3, 0.4].iter().zip([0.4, 0.3, 0.2, 0.1]).enumerate() {
            assert!((g[j] + p / a).abs() < 1e-12);
        }
    }

    #[test]
    fn weight_examples() {
        assert_eq!(adw(0.0), 1.0);
        assert!((adw(2.0) - 1.380797).abs() < 1e-6);
        assert!((adw(1e6) - 1.5).abs() < 1e-12);
        assert_eq!(odw(1.0).unwrap(), 1.0);
        assert!((odw(0.5).unwrap() - 1.122459).abs() < 1e-6);
        assert!(odw(0.0).is_err());
        assert!(odw(1.5).is_err());
    }

    fn scalar_terms(tape: &mut Tape, l1: f64, g: f64, ratio: f64, rac: &[f64], mrc: &[f64]) -> SampleTerms {
        SampleTerms {
            rac: rac.iter().map(|&v| tape.leaf(Tensor::scalar(v))).collect(),
            mrc: mrc.iter().map(|&v| tape.leaf(Tensor::scalar(v))).collect(),
            l1: tape.leaf(Tensor::scalar(l1)),
            giou: tape.leaf(Tensor::scalar(g)),
            box_ratio: ratio,
        }
    }

    #[test]
    fn total_with_unit_weights() {
        let mut tape = Tape::new();
        let t = scalar_terms(&mut tape, 0.2, 0.3, 1.0, &[0.0], &[0.0]);
        let consts = LossConstants {
            rho: vec![1.0],
            w_adw: None,
        };
        let (total, bd) = total_loss(&mut tape, &[t], &consts, &AttBalanceConfig::default(), 0).unwrap();
        assert!((tape.item(total) - 0.5).abs() < 1e-15);
        assert_eq!(bd.w_adw, 1.0);
        assert_eq!(bd.w_odw, 1.0);
    }

    #[test]
    fn gate_turns_regularization_off() {
        let cfg = AttBalanceConfig {
            attbalance_epochs: Some(3),
            alpha_1: 2.0,
            ..AttBalanceConfig::default()
        };
        let mut tape = Tape::new();
        let terms = vec![
            scalar_terms(&mut tape, 0.2, 0.3, 0.1, &[5.0], &[1.0]),
            scalar_terms(&mut tape, 0.4, 0.6, 0.3, &[2.0], &[0.5]),
        ];
        let consts = LossConstants {
            rho: vec![0.5],
            w_adw: None,
        };
        let (total, bd) = total_loss(&mut tape, &terms, &consts, &cfg, 3).unwrap();
        assert!(!bd.attbalance_active);
        assert_eq!(tape.item(total), 2.0 * bd.l_1 + bd.l_giou);
        let (_, on) = total_loss(&mut tape, &terms, &consts, &cfg, 2).unwrap();
        assert!(on.attbalance_active);
    }

    #[test]
    fn rac_drops_as_mass_moves_inside() {
        let mask = mask_4x4(&[0, 1]);
        let mut prev = f64::INFINITY;
        for k in 0..=10 {
            let inside = 0.05 + 0.09 * k as f64;
            let mut m = vec![(1.0 - inside) / 14.0; 16];
            m[0] = inside / 2.0;
            m[1] = inside / 2.0;
            let mut tape = Tape::new();
            let attn = stack_of(&mut tape, &[m]);
            let l = rac_loss(&mut tape, &attn, &mask, &[1.0], EPS_LOG).unwrap();
            assert!(tape.item(l) <= prev);
            prev = tape.item(l);
        }
    }

    fn normalized(raw: Vec<f64>) -> Vec<f64> {
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect()
    }

    fn brute_spearman(x: &[f64], y: &[f64]) -> f64 {
        // rank = 1 + #smaller + (#equal - 1) / 2, by pairwise counting
        let rank = |v: &[f64]| -> Vec<f64> {
            v.iter()
                .map(|&a| {
                    let less = v.iter().filter(|&&b| b < a).count() as f64;
                    let eq = v.iter().filter(|&&b| b == a).count() as f64;
                    1.0 + less + (eq - 1.0) / 2.0
                })
                .collect()
        };
        let (rx, ry) = (rank(x), rank(y));
        let n = x.len() as f64;
        let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
        let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
        let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
        let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
        if vx == 0.0 || vy == 0.0 {
            1.0
        } else {
            cov / (vx * vy).sqrt()
        }
    }

    proptest! {
        #[test]
        fn relative_rho_mean_is_one(r in prop::collection::vec(-1.0f64..1.0, 1..12)) {
            let out = relative_rho(&r).unwrap();
            let mean = out.iter().sum::<f64>() / out.len() as f64;
            prop_assert!((mean - 1.0).abs() < 1e-12);
        }

        #[test]
        fn spearman_matches_pairwise_oracle(
            pairs in prop::collection::vec((0u8..6, 0u8..6), 2..30),
            scale in 0.1f64..10.0,
        ) {
            let x: Vec<f64> = pairs.iter().map(|p| p.0 as f64 * scale).collect();
            let y: Vec<f64> = pairs.iter().map(|p| p.1 as f64).collect();
            let r = batch_rho(&x, &y);
            prop_assert!((r - brute_spearman(&x, &y)).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&r));
        }

        #[test]
        fn mrc_is_non_negative(
            a in prop::collection::vec(0.01f64..1.0, 9),
            b in prop::collection::vec(0.01f64..1.0, 9),
        ) {
            let mut tape = Tape::new();
            let attn = stack_of(&mut tape, &[normalized(a)]);
            let mom = CapturedAttention { layers: vec![0], maps: vec![normalized(b)], logits: vec![vec![0.0; 9]] };
            let l = mrc_loss(&mut tape, &mom, &attn, EPS_LOG).unwrap();
            prop_assert!(tape.item(l) >= -1e-12);
        }

        #[test]
        fn rac_two_terms_coincide(raw in prop::collection::vec(0.0f64..1.0, 16), cells in prop::collection::btree_set(0usize..16, 1..8)) {
            let map = normalized(raw.iter().map(|v| v + 1e-3).collect());
            let mask = mask_4x4(&cells.into_iter().collect::<Vec<_>>());
            let mut tape = Tape::new();
            let attn = stack_of(&mut tape, std::slice::from_ref(&map));
            let l = rac_loss(&mut tape, &attn, &mask, &[0.7], EPS_LOG).unwrap();
            let expected = 0.7 * -2.0 * mask.masked_sum(&map).ln();
            prop_assert!((tape.item(l) - expected).abs() < 1e-9);
        }

        #[test]
        fn weights_stay_in_range(l in 1e-6f64..30.0, r in 1e-6f64..1.0) {
            let a = adw(l);
            prop_assert!(a > 1.0 && a < 1.5);
            let o = odw(r).unwrap();
            prop_assert!((1.0..=0.5 + 1.0 / (1.0 + (-1f64).exp())).contains(&o));
            prop_assert!(odw((r * 0.5).max(1e-9)).unwrap() >= o);
        }

        #[test]
        fn total_recomposes(
            vals in prop::collection::vec((0.0f64..2.0, 0.0f64..2.0, 0.01f64..1.0, 0.0f64..5.0, 0.0f64..1.0, 0.0f64..5.0, 0.0f64..1.0), 1..6),
            rho in prop::collection::vec(-1.0f64..1.0, 2),
        ) {
            let mut tape = Tape::new();
            let terms: Vec<SampleTerms> = vals
                .iter()
                .map(|v| scalar_terms(&mut tape, v.0, v.1, v.2, &[v.3, v.5], &[v.4, v.6]))
                .collect();
            let cfg = AttBalanceConfig { alpha_ar: 0.7, alpha_1: 1.3, alpha_g: 0.9, ..AttBalanceConfig::default() };
            let consts = LossConstants { rho, w_adw: None };
            let (total, bd) = total_loss(&mut tape, &terms, &consts, &cfg, 0).unwrap();
            prop_assert!((bd.recompose(&cfg) - tape.item(total)).abs() < 1e-12);
            prop_assert!((bd.l_ar - bd.l_rac - bd.l_mrc).abs() < 1e-12);
            prop_assert!(bd.w_adw > 1.0 && bd.w_adw < 1.5);
            prop_assert!(bd.w_odw >= 1.0 && bd.w_odw <= 0.5 + 1.0 / (1.0 + (-1f64).exp()));
        }
    }
}
