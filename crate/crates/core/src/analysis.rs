//! Evaluation records and the statistics computed over them: per-layer
//! rank correlation between in-box attention and IoU, equal-count
//! attention histograms, box-ratio curves and accuracy.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::attbalance::{average_ranks, batch_rho};
use crate::error::{Error, Result};
use crate::geometry::{iou, rasterize_mask, BoxSpec};
use crate::model::{forward_batch, ModelConfig, ModelParams};
use crate::synth::GroundingSample;

pub const HIST_BINS: usize = 8;
pub const HIST_LOW: f64 = 0.1;
pub const HIST_HIGH: f64 = 0.9;
pub const CURVE_BINS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: u64,
    /// One entry per captured layer.
    pub in_mask: Vec<f64>,
    pub iou: f64,
    pub box_ratio: f64,
    pub pred: BoxSpec,
    pub gt: BoxSpec,
}

/// One record per sample, in input order.
pub fn collect(
    cfg: &ModelConfig,
    params: &ModelParams,
    samples: &[GroundingSample],
    capture: &[usize],
) -> Result<Vec<EvalRecord>> {
    let outputs = forward_batch(cfg, params, samples, capture)?;
    samples
        .iter()
        .zip(outputs)
        .map(|(s, (pred, attn))| {
            let mask = rasterize_mask(&s.gt, cfg.grid_rows, cfg.grid_cols)?;
            Ok(EvalRecord {
                id: s.id,
                in_mask: attn.maps.iter().map(|m| mask.masked_sum(m).clamp(0.0, 1.0)).collect(),
                iou: iou(&pred, &s.gt),
                box_ratio: s.box_ratio(),
                pred,
                gt: s.gt,
            })
        })
        .collect()
}

fn column(records: &[EvalRecord], layer: usize) -> Result<Vec<f64>> {
    records
        .iter()
        .map(|r| {
            r.in_mask
                .get(layer)
                .copied()
                .ok_or_else(|| Error::Contract(format!("record {} has no captured layer at position {layer}", r.id)))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRho {
    pub layer: usize,
    pub rho: f64,
    /// Either side had no rank variation; `rho` is then reported as 1.0.
    pub degenerate: bool,
}

fn is_constant(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[0] == w[1])
}

/// Spearman rho per captured layer; `layers` labels the record columns.
pub fn layer_rho_profile(records: &[EvalRecord], layers: &[usize]) -> Result<Vec<LayerRho>> {
    if records.len() < 2 {
        return Err(Error::InsufficientSamples {
            needed: 2,
            have: records.len(),
        });
    }
    let ious: Vec<f64> = records.iter().map(|r| r.iou).collect();
    layers
        .iter()
        .enumerate()
        .map(|(pos, &layer)| {
            let x = column(records, pos)?;
            Ok(LayerRho {
                layer,
                rho: batch_rho(&x, &ious),
                degenerate: is_constant(&x) || is_constant(&ious),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub layer: usize,
    pub retained: usize,
    pub omitted: usize,
    pub bins: Vec<HistBin>,
}

/// Splits the in-mask sums in `[0.1, 0.9]` into 8 equal-count bins;
/// leftover samples go to the lowest-value bins.
pub fn attention_histogram(records: &[EvalRecord], pos: usize, layer: usize) -> Result<Histogram> {
    let mut kept: Vec<f64> = column(records, pos)?
        .into_iter()
        .filter(|&v| (HIST_LOW..=HIST_HIGH).contains(&v))
        .collect();
    if kept.len() < HIST_BINS {
        return Err(Error::InsufficientSamples {
            needed: HIST_BINS,
            have: kept.len(),
        });
    }
    kept.sort_by(f64::total_cmp);
    let (base, extra) = (kept.len() / HIST_BINS, kept.len() % HIST_BINS);
    let mut bins = Vec::with_capacity(HIST_BINS);
    let mut start = 0;
    for b in 0..HIST_BINS {
        let n = base + usize::from(b < extra);
        let part = &kept[start..start + n];
        bins.push(HistBin {
            lo: part[0],
            hi: part[n - 1],
            count: n,
        });
        start += n;
    }
    Ok(Histogram {
        layer,
        retained: kept.len(),
        omitted: records.len() - kept.len(),
        bins,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveBinning {
    /// Ten intervals of equal width over `[min, max]` of the box ratios.
    #[default]
    EvenWidth,
    /// Ten intervals holding equally many samples (by box-ratio rank).
    EqualCount,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// Absent for empty intervals.
    pub mean_attention: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxRatioCurve {
    pub layer: usize,
    pub binning: CurveBinning,
    /// `CURVE_BINS + 1` edges; interval `k` is `[edges[k], edges[k+1])`,
    /// the last one closed.
    pub edges: Vec<f64>,
    pub bins: Vec<CurveBin>,
}

/// Interval index of `r` under `edges` (see [`BoxRatioCurve::edges`]).
pub fn interval_of(edges: &[f64], r: f64) -> usize {
    let last = edges.len() - 2;
    if edges[0] == edges[last + 1] {
        return 0;
    }
    (0..=last).rev().find(|&k| r >= edges[k]).unwrap_or(0)
}

/// Mean in-mask attention per box-ratio interval.
pub fn box_ratio_curve(
    records: &[EvalRecord],
    pos: usize,
    layer: usize,
    binning: CurveBinning,
) -> Result<BoxRatioCurve> {
    if records.len() < CURVE_BINS {
        return Err(Error::InsufficientSamples {
            needed: CURVE_BINS,
            have: records.len(),
        });
    }
    let attn = column(records, pos)?;
    let ratios: Vec<f64> = records.iter().map(|r| r.box_ratio).collect();
    let lo = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sums = [0.0; CURVE_BINS];
    let mut counts = [0usize; CURVE_BINS];
    let edges: Vec<f64> = match binning {
        CurveBinning::EvenWidth => {
            let width = (hi - lo) / CURVE_BINS as f64;
            let mut e: Vec<f64> = (0..CURVE_BINS).map(|k| lo + k as f64 * width).collect();
            e.push(hi);
            for (r, a) in ratios.iter().zip(&attn) {
                let k = interval_of(&e, *r);
                sums[k] += a;
                counts[k] += 1;
            }
            e
        }
        CurveBinning::EqualCount => {
            // split by rank; ties stay together in the bin of their mean rank
            let ranks = average_ranks(&ratios);
            let n = ratios.len() as f64;
            let mut e = vec![f64::INFINITY; CURVE_BINS];
            for ((r, a), rank) in ratios.iter().zip(&attn).zip(&ranks) {
                let k = (((rank - 1.0) / n * CURVE_BINS as f64) as usize).min(CURVE_BINS - 1);
                sums[k] += a;
                counts[k] += 1;
                e[k] = e[k].min(*r);
            }
            // empty bins inherit the next populated lower edge
            let mut next = hi;
            for k in (0..CURVE_BINS).rev() {
                if counts[k] == 0 {
                    e[k] = next;
                }
                next = e[k];
            }
            e[0] = lo;
            e.push(hi);
            e
        }
    };
    let bins = (0..CURVE_BINS)
        .map(|k| CurveBin {
            lo: edges[k],
            hi: edges[k + 1],
            count: counts[k],
            mean_attention: (counts[k] > 0).then(|| sums[k] / counts[k] as f64),
        })
        .collect();
    Ok(BoxRatioCurve {
        layer,
        binning,
        edges,
        bins,
    })
}

/// Fraction of records with IoU strictly above `threshold`.
pub fn accuracy(records: &[EvalRecord], threshold: f64) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::InsufficientSamples { needed: 1, have: 0 });
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Contract(format!("threshold {threshold} outside (0, 1)")));
    }
    let hits = records.iter().filter(|r| r.iou > threshold).count();
    Ok(hits as f64 / records.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub n_samples: usize,
    pub layers: Vec<usize>,
    pub acc_at_0_5: f64,
    pub mean_iou: f64,
    /// Mean in-mask attention per captured layer.
    pub mean_in_mask: Vec<f64>,
    pub rho_profile: Vec<LayerRho>,
    /// Histogram of the last captured layer, when enough values survive
    /// the extreme-interval filter.
    pub histogram: Option<Histogram>,
    pub box_ratio_curve: Option<BoxRatioCurve>,
    pub notes: Vec<String>,
}

impl AnalysisReport {
    /// Mean in-mask attention of the last captured layer.
    pub fn final_layer_in_mask(&self) -> Option<f64> {
        self.mean_in_mask.last().copied()
    }
}

/// Runs every reduction over `records`.
pub fn analyze(records: &[EvalRecord], layers: &[usize], binning: CurveBinning) -> Result<AnalysisReport> {
    let n = records.len();
    let acc = accuracy(records, 0.5)?;
    let mean_iou = records.iter().map(|r| r.iou).sum::<f64>() / n as f64;
    let mean_in_mask = (0..layers.len())
        .map(|pos| Ok(column(records, pos)?.iter().sum::<f64>() / n as f64))
        .collect::<Result<Vec<_>>>()?;
    let mut notes = Vec::new();
    let rho_profile = match layer_rho_profile(records, layers) {
        Ok(p) => p,
        Err(Error::InsufficientSamples { .. }) => {
            notes.push("rho profile needs at least 2 records".into());
            Vec::new()
        }
        Err(e) => return Err(e),
    };
    let (mut histogram, mut curve) = (None, None);
    if let Some((pos, &layer)) = layers.iter().enumerate().next_back() {
        match attention_histogram(records, pos, layer) {
            Ok(h) => histogram = Some(h),
            Err(Error::InsufficientSamples { needed, have }) => {
                notes.push(format!("histogram skipped: {have} values in [0.1, 0.9], need {needed}"))
            }
            Err(e) => return Err(e),
        }
        match box_ratio_curve(records, pos, layer, binning) {
            Ok(c) => curve = Some(c),
            Err(Error::InsufficientSamples { needed, have }) => {
                notes.push(format!("box-ratio curve skipped: {have} records, need {needed}"))
            }
            Err(e) => return Err(e),
        }
    }
    Ok(AnalysisReport {
        n_samples: n,
        layers: layers.to_vec(),
        acc_at_0_5: acc,
        mean_iou,
        mean_in_mask,
        rho_profile,
        histogram,
        box_ratio_curve: curve,
        notes,
    })
}

// ---- CSV ---------------------------------------------------------------

const FIXED_COLUMNS: [&str; 11] = [
    "id",
    "iou",
    "box_ratio",
    "pred_cx",
    "pred_cy",
    "pred_w",
    "pred_h",
    "gt_cx",
    "gt_cy",
    "gt_w",
    "gt_h",
];

/// One row per record; attention columns are named `attn_layer_<i>`.
pub fn write_records_csv<W: Write>(records: &[EvalRecord], layers: &[usize], mut w: W) -> Result<()> {
    let mut header: Vec<String> = FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend(layers.iter().map(|l| format!("attn_layer_{l}")));
    writeln!(w, "{}", header.join(","))?;
    for r in records {
        let mut row = vec![r.id.to_string()];
        row.extend(
            [r.iou, r.box_ratio]
                .iter()
                .chain(&r.pred.as_array())
                .chain(&r.gt.as_array())
                .chain(&r.in_mask)
                .map(|v| v.to_string()),
        );
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

pub fn read_records_csv<R: BufRead>(r: R) -> Result<(Vec<usize>, Vec<EvalRecord>)> {
    let mut lines = r.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("empty records file".into()))??;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < FIXED_COLUMNS.len() || cols[..FIXED_COLUMNS.len()] != FIXED_COLUMNS {
        return Err(Error::Format(format!("unexpected records header: {header}")));
    }
    let layers = cols[FIXED_COLUMNS.len()..]
        .iter()
        .map(|c| {
            c.strip_prefix("attn_layer_")
                .and_then(|l| l.parse().ok())
                .ok_or_else(|| Error::Format(format!("bad attention column {c}")))
        })
        .collect::<Result<Vec<usize>>>()?;
    let mut records = Vec::new();
    for (ln, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != cols.len() {
            return Err(Error::Format(format!(
                "row {} has {} fields, expected {}",
                ln + 2,
                f.len(),
                cols.len()
            )));
        }
        let bad = |s: &str| Error::Format(format!("row {}: cannot parse {s:?}", ln + 2));
        let id = f[0].parse().map_err(|_| bad(f[0]))?;
        let v = f[1..]
            .iter()
            .map(|s| s.parse::<f64>().map_err(|_| bad(s)))
            .collect::<Result<Vec<f64>>>()?;
        let bx = |o: usize| BoxSpec {
            cx: v[o],
            cy: v[o + 1],
            w: v[o + 2],
            h: v[o + 3],
        };
        records.push(EvalRecord {
            id,
            iou: v[0],
            box_ratio: v[1],
            pred: bx(2),
            gt: bx(6),
            in_mask: v[10..].to_vec(),
        });
    }
    Ok((layers, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(id: u64, in_mask: Vec<f64>, iou: f64, box_ratio: f64) -> EvalRecord {
        let b = BoxSpec {
            cx: 0.5,
            cy: 0.5,
            w: 0.2,
            h: 0.2,
        };
        EvalRecord {
            id,
            in_mask,
            iou,
            box_ratio,
            pred: b,
            gt: b,
        }
    }

    #[test]
    fn rho_profile_examples() {
        let up: Vec<_> = (0..6)
            .map(|i| rec(i, vec![i as f64 / 10.0; 2], i as f64 / 10.0, 0.1))
            .collect();
        for r in layer_rho_profile(&up, &[2, 3]).unwrap() {
            assert!((r.rho - 1.0).abs() < 1e-12);
            assert!(!r.degenerate);
        }
        let down: Vec<_> = (0..6)
            .map(|i| rec(i, vec![i as f64 / 10.0], 1.0 - i as f64 / 10.0, 0.1))
            .collect();
        assert!((layer_rho_profile(&down, &[5]).unwrap()[0].rho + 1.0).abs() < 1e-12);
        let flat: Vec<_> = (0..4).map(|i| rec(i, vec![0.3], i as f64 / 10.0, 0.1)).collect();
        assert!(layer_rho_profile(&flat, &[0]).unwrap()[0].degenerate);
        assert!(layer_rho_profile(&flat[..1], &[0]).is_err());
    }

    #[test]
    fn histogram_examples() {
        let sixteen: Vec<_> = (0..16).map(|i| rec(i, vec![0.1 + 0.05 * i as f64], 0.5, 0.1)).collect();
        let h = attention_histogram(&sixteen, 0, 0).unwrap();
        assert!(h.bins.iter().all(|b| b.count == 2));
        let high: Vec<_> = (0..16).map(|i| rec(i, vec![0.95], 0.5, 0.1)).collect();
        assert!(matches!(
            attention_histogram(&high, 0, 0),
            Err(Error::InsufficientSamples { have: 0, .. })
        ));
        let seventeen: Vec<_> = (0..17).map(|i| rec(i, vec![0.2 + 0.01 * i as f64], 0.5, 0.1)).collect();
        let counts: Vec<usize> = attention_histogram(&seventeen, 0, 0)
            .unwrap()
            .bins
            .iter()
            .map(|b| b.count)
            .collect();
        assert_eq!(counts, vec![3, 2, 2, 2, 2, 2, 2, 2]);
    }

    #[test]
    fn curve_examples() {
        let recs: Vec<_> = (0..40)
            .map(|i| {
                let r = 0.02 + 0.02 * i as f64;
                rec(i, vec![r], 0.5, r)
            })
            .collect();
        let c = box_ratio_curve(&recs, 0, 0, CurveBinning::EvenWidth).unwrap();
        let means: Vec<f64> = c.bins.iter().map(|b| b.mean_attention.unwrap()).collect();
        assert!(means.windows(2).all(|w| w[0] < w[1]));
        let single: Vec<_> = (0..12).map(|i| rec(i, vec![0.3], 0.5, 0.25)).collect();
        let c = box_ratio_curve(&single, 0, 0, CurveBinning::EvenWidth).unwrap();
        assert_eq!(c.bins.iter().filter(|b| b.count > 0).count(), 1);
        let eq = box_ratio_curve(&recs, 0, 0, CurveBinning::EqualCount).unwrap();
        assert!(eq.bins.iter().all(|b| b.count == 4));
        assert_eq!(eq.edges.len(), CURVE_BINS + 1);
    }

    #[test]
    fn accuracy_examples() {
        let ones: Vec<_> = (0..3).map(|i| rec(i, vec![], 1.0, 0.1)).collect();
        assert_eq!(accuracy(&ones, 0.5).unwrap(), 1.0);
        let zeros: Vec<_> = (0..3).map(|i| rec(i, vec![], 0.0, 0.1)).collect();
        assert_eq!(accuracy(&zeros, 0.5).unwrap(), 0.0);
        let mixed = vec![rec(0, vec![], 0.4, 0.1), rec(1, vec![], 0.6, 0.1)];
        assert_eq!(accuracy(&mixed, 0.5).unwrap(), 0.5);
        let edge = vec![rec(0, vec![], 0.5, 0.1)];
        assert_eq!(accuracy(&edge, 0.5).unwrap(), 0.0);
        assert!(accuracy(&[], 0.5).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let recs: Vec<_> = (0..5)
            .map(|i| rec(i, vec![0.1 * i as f64, 1.0 / 3.0], 0.7 / (i + 1) as f64, 0.04))
            .collect();
        let mut buf = Vec::new();
        write_records_csv(&recs, &[4, 5], &mut buf).unwrap();
        let (layers, back) = read_records_csv(buf.as_slice()).unwrap();
        assert_eq!(layers, vec![4, 5]);
        assert_eq!(back, recs);
    }

    fn records_strategy() -> impl Strategy<Value = Vec<EvalRecord>> {
        prop::collection::vec((0.0f64..1.0, 0.0f64..1.0, 0.001f64..1.0, 0u8..4), 10..60).prop_map(|v| {
            v.into_iter()
                .enumerate()
                .map(|(i, (a, u, r, q))| {
                    // quantize some values to force ties
                    let a = if q == 0 { (a * 4.0).round() / 4.0 } else { a };
                    let u = if q == 1 { (u * 4.0).round() / 4.0 } else { u };
                    rec(i as u64, vec![a], u, r)
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn curve_matches_grouping_oracle(recs in records_strategy()) {
            let c = box_ratio_curve(&recs, 0, 0, CurveBinning::EvenWidth).unwrap();
            let lo = recs.iter().map(|r| r.box_ratio).fold(f64::INFINITY, f64::min);
            let hi = recs.iter().map(|r| r.box_ratio).fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!(c.edges[0], lo);
            prop_assert_eq!(c.edges[CURVE_BINS], hi);
            prop_assert!(c.edges.windows(2).all(|w| w[0] <= w[1]));
            for k in 0..CURVE_BINS {
                let last = k == CURVE_BINS - 1;
                let members: Vec<f64> = recs
                    .iter()
                    .filter(|r| r.box_ratio >= c.edges[k] && (r.box_ratio < c.edges[k + 1] || (last && r.box_ratio <= c.edges[k + 1])))
                    .map(|r| r.in_mask[0])
                    .collect();
                let members = if k > 0 && c.edges[k] == c.edges[k + 1] { Vec::new() } else { members };
                prop_assert_eq!(c.bins[k].count, members.len());
                let mean = (!members.is_empty()).then(|| members.iter().sum::<f64>() / members.len() as f64);
                prop_assert_eq!(c.bins[k].mean_attention, mean);
            }
            prop_assert_eq!(c.bins.iter().map(|b| b.count).sum::<usize>(), recs.len());
        }

        #[test]
        fn histogram_counts_balanced(recs in records_strategy()) {
            if let Ok(h) = attention_histogram(&recs, 0, 0) {
                let counts: Vec<usize> = h.bins.iter().map(|b| b.count).collect();
                let (mn, mx) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
                prop_assert!(mx - mn <= 1);
                prop_assert_eq!(counts.iter().sum::<usize>(), h.retained);
                prop_assert!(h.bins.windows(2).all(|w| w[0].hi <= w[1].lo));
                prop_assert!(h.bins.iter().all(|b| b.lo >= HIST_LOW && b.hi <= HIST_HIGH));
            }
        }

        #[test]
        fn rho_in_range_and_accuracy_permutation_invariant(recs in records_strategy()) {
            let p = layer_rho_profile(&recs, &[0]).unwrap();
            prop_assert!((-1.0..=1.0).contains(&p[0].rho));
            let mut rev = recs.clone();
            rev.reverse();
            prop_assert_eq!(accuracy(&recs, 0.5).unwrap(), accuracy(&rev, 0.5).unwrap());
        }
    }
}
