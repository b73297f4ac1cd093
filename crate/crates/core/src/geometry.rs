//! Boxes, overlap measures, box-regression losses and mask rasterization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Normalized `(cx, cy, w, h)` box; coordinates are fractions of the image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxSpec {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// Corner form `(x1, y1, x2, y2)`. Not clipped; overlap functions on corners
/// take the coordinates as given.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Corners {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl Corners {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }

    fn clipped(&self) -> Self {
        let c = |v: f64| v.clamp(0.0, 1.0);
        let (x1, x2) = (c(self.x1.min(self.x2)), c(self.x1.max(self.x2)));
        let (y1, y2) = (c(self.y1.min(self.y2)), c(self.y1.max(self.y2)));
        Self { x1, y1, x2, y2 }
    }

    pub fn contains(&self, other: &Corners) -> bool {
        self.x1 <= other.x1 && self.y1 <= other.y1 && self.x2 >= other.x2 && self.y2 >= other.y2
    }
}

impl BoxSpec {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        if ![cx, cy, w, h].iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("box coordinates".into()));
        }
        if w < 0.0 || h < 0.0 {
            return Err(Error::Contract(format!("negative box extent w={w} h={h}")));
        }
        Ok(Self { cx, cy, w, h })
    }

    /// Corner form clipped to the unit square.
    pub fn to_corners(&self) -> Corners {
        Corners {
            x1: self.cx - self.w / 2.0,
            y1: self.cy - self.h / 2.0,
            x2: self.cx + self.w / 2.0,
            y2: self.cy + self.h / 2.0,
        }
        .clipped()
    }

    pub fn from_corners(c: Corners) -> Self {
        let c = c.clipped();
        Self {
            cx: (c.x1 + c.x2) / 2.0,
            cy: (c.y1 + c.y2) / 2.0,
            w: c.x2 - c.x1,
            h: c.y2 - c.y1,
        }
    }

    /// The same box restricted to the unit square. Boxes already inside
    /// are returned unchanged.
    pub fn clipped(&self) -> Self {
        let inside = self.cx - self.w / 2.0 >= 0.0
            && self.cy - self.h / 2.0 >= 0.0
            && self.cx + self.w / 2.0 <= 1.0
            && self.cy + self.h / 2.0 <= 1.0;
        if inside {
            *self
        } else {
            Self::from_corners(self.to_corners())
        }
    }

    pub fn area(&self) -> f64 {
        self.to_corners().area()
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }
}

pub fn iou_corners(a: &Corners, b: &Corners) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Intersection over union of two clipped boxes.
pub fn iou(a: &BoxSpec, b: &BoxSpec) -> f64 {
    iou_corners(&a.to_corners(), &b.to_corners())
}

/// Generalized IoU on raw corners; 1.0 when the enclosing box has no area.
pub fn giou_corners(a: &Corners, b: &Corners) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    let enclosing = (a.x2.max(b.x2) - a.x1.min(b.x1)) * (a.y2.max(b.y2) - a.y1.min(b.y1));
    if enclosing <= 0.0 {
        return 1.0;
    }
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    iou - (enclosing - union) / enclosing
}

/// `1 - GIoU(pred, gt)` on the tape. `pred` is a 4-element `(cx, cy, w, h)`
/// node; `gt` is clipped to the unit square first.
///
/// A zero-area enclosing box yields a constant loss of 1.
pub fn giou_loss(tape: &mut Tape, pred: Var, gt: &BoxSpec) -> Result<Var> {
    if tape.value(pred).numel() != 4 {
        return Err(Error::dim("giou_loss", tape.shape(pred), &[4]));
    }
    let g = gt.to_corners();
    let [cx, cy, w, h] = [0, 1, 2, 3].map(|i| tape.index(pred, i));
    let (cx, cy, w, h) = (cx?, cy?, w?, h?);
    let hw = tape.scale(w, 0.5);
    let hh = tape.scale(h, 0.5);
    let px1 = tape.sub(cx, hw)?;
    let px2 = tape.add(cx, hw)?;
    let py1 = tape.sub(cy, hh)?;
    let py2 = tape.add(cy, hh)?;

    let pv = |t: &Tape, v: Var| t.item(v);
    let pred_corners = Corners::new(pv(tape, px1), pv(tape, py1), pv(tape, px2), pv(tape, py2));
    let enclosing_value = (pred_corners.x2.max(g.x2) - pred_corners.x1.min(g.x1))
        * (pred_corners.y2.max(g.y2) - pred_corners.y1.min(g.y1));
    if enclosing_value <= 0.0 {
        return Ok(tape.scalar(1.0));
    }

    let [gx1, gy1, gx2, gy2] = [g.x1, g.y1, g.x2, g.y2].map(|v| tape.scalar(v));
    let span = |tape: &mut Tape, lo_p: Var, hi_p: Var, lo_g: Var, hi_g: Var, inner: bool| -> Result<Var> {
        if inner {
            let hi = tape.minimum(hi_p, hi_g)?;
            let lo = tape.maximum(lo_p, lo_g)?;
            let d = tape.sub(hi, lo)?;
            Ok(tape.relu(d))
        } else {
            let hi = tape.maximum(hi_p, hi_g)?;
            let lo = tape.minimum(lo_p, lo_g)?;
            tape.sub(hi, lo)
        }
    };
    let iw = span(tape, px1, px2, gx1, gx2, true)?;
    let ih = span(tape, py1, py2, gy1, gy2, true)?;
    let inter = tape.mul(iw, ih)?;
    let cw = span(tape, px1, px2, gx1, gx2, false)?;
    let ch = span(tape, py1, py2, gy1, gy2, false)?;
    let enclosing = tape.mul(cw, ch)?;

    let area_p = tape.mul(w, h)?;
    let area_g = tape.scalar(g.area());
    let sum = tape.add(area_p, area_g)?;
    let union = tape.sub(sum, inter)?;
    let iou = if tape.item(union) > 0.0 {
        tape.div(inter, union)?
    } else {
        tape.scalar(0.0)
    };
    let gap = tape.sub(enclosing, union)?;
    let penalty = tape.div(gap, enclosing)?;
    let giou = tape.sub(iou, penalty)?;
    let neg = tape.neg(giou);
    Ok(tape.add_scalar(neg, 1.0))
}

/// How the L1 loss reduces over the four box coordinates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum L1Reduction {
    #[default]
    Mean,
    Sum,
}

pub fn l1_loss(tape: &mut Tape, pred: Var, gt: &BoxSpec, reduction: L1Reduction) -> Result<Var> {
    if tape.value(pred).numel() != 4 {
        return Err(Error::dim("l1_loss", tape.shape(pred), &[4]));
    }
    let target = tape.constant(Tensor::new(
        tape.shape(pred).to_vec(),
        gt.clipped().as_array().to_vec(),
    )?);
    let diff = tape.sub(pred, target)?;
    let abs = tape.abs(diff);
    let total = tape.sum_all(abs);
    Ok(match reduction {
        L1Reduction::Mean => tape.scale(total, 0.25),
        L1Reduction::Sum => total,
    })
}

/// Binary mask over the visual-token grid, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegMask {
    pub rows: usize,
    pub cols: usize,
    cells: Vec<u8>,
}

impl SegMask {
    /// Mask from row-major 0/1 cells.
    pub fn from_cells(rows: usize, cols: usize, cells: Vec<u8>) -> Result<Self> {
        if cells.len() != rows * cols || cells.iter().any(|&c| c > 1) {
            return Err(Error::dim("SegMask::from_cells", &[cells.len()], &[rows, cols]));
        }
        Ok(Self { rows, cols, cells })
    }

    pub fn cells(&self) -> &[u8] {
        &self.cells
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.cells[r * self.cols + c] == 1
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c == 1).count()
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn complement(&self) -> SegMask {
        SegMask {
            rows: self.rows,
            cols: self.cols,
            cells: self.cells.iter().map(|c| 1 - c).collect(),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::vector(self.cells.iter().map(|&c| f64::from(c)).collect())
    }

    /// Sum of `values` over the cells set in the mask.
    pub fn masked_sum(&self, values: &[f64]) -> f64 {
        values
            .iter()
            .zip(&self.cells)
            .filter(|(_, &c)| c == 1)
            .map(|(v, _)| v)
            .sum()
    }
}

/// Downsamples a box to a `rows x cols` mask by cell-center containment.
///
/// Cell `(r, c)` is set when its center `((c + 0.5) / cols, (r + 0.5) / rows)`
/// lies inside the clipped box (edges inclusive). If no center is covered,
/// the single cell whose center is nearest the box center is set.
pub fn rasterize_mask(b: &BoxSpec, rows: usize, cols: usize) -> Result<SegMask> {
    if rows == 0 || cols == 0 {
        return Err(Error::Config(format!("mask grid {rows}x{cols} is empty")));
    }
    let k = b.to_corners();
    if k.area() <= 0.0 {
        return Err(Error::DegenerateGroundTruth(format!("zero-area box {b:?}")));
    }
    let mut cells = vec![0u8; rows * cols];
    for r in 0..rows {
        let y = (r as f64 + 0.5) / rows as f64;
        for c in 0..cols {
            let x = (c as f64 + 0.5) / cols as f64;
            if x >= k.x1 && x <= k.x2 && y >= k.y1 && y <= k.y2 {
                cells[r * cols + c] = 1;
            }
        }
    }
    if cells.iter().all(|&c| c == 0) {
        let cx = (k.x1 + k.x2) / 2.0;
        let cy = (k.y1 + k.y2) / 2.0;
        let c = ((cx * cols as f64).floor() as usize).min(cols - 1);
        let r = ((cy * rows as f64).floor() as usize).min(rows - 1);
        cells[r * cols + c] = 1;
    }
    Ok(SegMask { rows, cols, cells })
}

/// Area of the clipped box as a fraction of the image.
pub fn box_ratio(b: &BoxSpec) -> f64 {
    b.area()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(cx: f64, cy: f64, w: f64, h: f64) -> BoxSpec {
        BoxSpec::new(cx, cy, w, h).unwrap()
    }

    #[test]
    fn corner_conversions() {
        assert_eq!(bx(0.5, 0.5, 1.0, 1.0).to_corners(), Corners::new(0.0, 0.0, 1.0, 1.0));
        assert_eq!(bx(0.25, 0.25, 0.5, 0.5).to_corners(), Corners::new(0.0, 0.0, 0.5, 0.5));
        // out-of-range boxes are clipped
        let c = bx(0.9, 0.5, 0.4, 0.2).to_corners();
        assert!((c.x2 - 1.0).abs() < 1e-15 && (c.x1 - 0.7).abs() < 1e-15);
        assert!(BoxSpec::new(0.5, 0.5, -0.1, 0.2).is_err());
    }

    #[test]
    fn iou_examples() {
        let a = bx(0.3, 0.4, 0.2, 0.3);
        assert!((iou(&a, &a) - 1.0).abs() < 1e-15);
        let b = bx(0.8, 0.8, 0.1, 0.1);
        assert_eq!(iou(&a, &b), 0.0);
        let v = iou_corners(&Corners::new(0.0, 0.0, 1.0, 1.0), &Corners::new(0.0, 0.5, 1.0, 1.5));
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
        let z = bx(0.5, 0.5, 0.0, 0.0);
        assert_eq!(iou(&z, &z), 0.0);
    }

    #[test]
    fn giou_examples() {
        let a = Corners::new(0.0, 0.0, 1.0, 1.0);
        let b = Corners::new(1.0, 1.0, 2.0, 2.0);
        assert!((giou_corners(&a, &b) + 0.5).abs() < 1e-15);
        assert_eq!(giou_corners(&a, &a), 1.0);
        let p = Corners::new(0.5, 0.5, 0.5, 0.5);
        assert_eq!(giou_corners(&p, &p), 1.0);
    }

    #[test]
    fn giou_loss_on_tape() {
        let gt = bx(0.4, 0.5, 0.3, 0.2);
        let mut tape = Tape::new();
        let pred = tape.leaf(Tensor::vector(gt.as_array().to_vec()));
        let l = giou_loss(&mut tape, pred, &gt).unwrap();
        assert!(tape.item(l).abs() < 1e-15);

        let gt = bx(0.25, 0.25, 0.5, 0.5);
        let pred = tape.leaf(Tensor::vector(vec![0.75, 0.75, 0.5, 0.5]));
        let l = giou_loss(&mut tape, pred, &gt).unwrap();
        // touching quadrants: iou 0, enclosing 1, union 0.5
        assert!((tape.item(l) - 1.5).abs() < 1e-15);
    }

    #[test]
    fn giou_degenerate_enclosing_box() {
        let gt = bx(0.5, 0.5, 0.0, 0.0);
        let mut tape = Tape::new();
        let pred = tape.leaf(Tensor::vector(vec![0.5, 0.5, 0.0, 0.0]));
        let l = giou_loss(&mut tape, pred, &gt).unwrap();
        assert_eq!(tape.item(l), 1.0);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(pred).unwrap().data(), &[0.0; 4]);
    }

    #[test]
    fn l1_examples() {
        let gt = bx(0.4, 0.5, 0.3, 0.2);
        let mut tape = Tape::new();
        let same = tape.leaf(Tensor::vector(gt.as_array().to_vec()));
        let l = l1_loss(&mut tape, same, &gt, L1Reduction::Mean).unwrap();
        assert_eq!(tape.item(l), 0.0);

        let off = tape.leaf(Tensor::vector(gt.as_array().iter().map(|v| v + 0.1).collect()));
        let l = l1_loss(&mut tape, off, &gt, L1Reduction::Mean).unwrap();
        assert!((tape.item(l) - 0.1).abs() < 1e-15);
        let s = l1_loss(&mut tape, off, &gt, L1Reduction::Sum).unwrap();
        assert!((tape.item(s) - 0.4).abs() < 1e-15);

        let mixed = tape.leaf(Tensor::vector(vec![0.5, 0.4, 0.35, 0.1]));
        let l = l1_loss(&mut tape, mixed, &gt, L1Reduction::Mean).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(mixed).unwrap().data(), &[0.25, -0.25, 0.25, -0.25]);
    }

    #[test]
    fn mask_examples() {
        let full = rasterize_mask(&bx(0.5, 0.5, 1.0, 1.0), 4, 4).unwrap();
        assert_eq!(full.count(), 16);

        let q = rasterize_mask(&BoxSpec::from_corners(Corners::new(0.0, 0.0, 0.5, 0.5)), 4, 4).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                assert_eq!(q.get(r, c), r < 2 && c < 2, "cell {r},{c}");
            }
        }

        let tiny = rasterize_mask(&bx(0.1, 0.9, 0.01, 0.01), 4, 4).unwrap();
        assert_eq!(tiny.count(), 1);
        assert!(tiny.get(3, 0));

        let err = rasterize_mask(&bx(0.5, 0.5, 0.0, 0.3), 4, 4).unwrap_err();
        assert!(err.to_string().contains("degenerate ground truth"));
    }

    #[test]
    fn box_ratio_examples() {
        assert_eq!(box_ratio(&bx(0.5, 0.5, 1.0, 1.0)), 1.0);
        assert_eq!(box_ratio(&bx(0.3, 0.3, 0.5, 0.5)), 0.25);
        assert!(box_ratio(&bx(0.5, 0.5, 3.0, 2.0)) <= 1.0);
    }

    fn arb_box() -> impl Strategy<Value = BoxSpec> {
        (0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64)
            .prop_map(|(a, b, c, d)| BoxSpec::from_corners(Corners::new(a.min(b), c.min(d), a.max(b), c.max(d))))
    }

    proptest! {
        #[test]
        fn corners_round_trip(b in arb_box()) {
            let back = BoxSpec::from_corners(b.to_corners());
            for (x, y) in b.as_array().iter().zip(back.as_array()) {
                prop_assert!((x - y).abs() <= 1e-15);
            }
            let c = b.to_corners();
            prop_assert!(c.x1 <= c.x2 && c.y1 <= c.y2);
        }

        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let (ab, ba) = (iou(&a, &b), iou(&b, &a));
            prop_assert_eq!(ab, ba);
            prop_assert!((0.0..=1.0).contains(&ab));
        }

        #[test]
        fn giou_bounds(a in arb_box(), b in arb_box()) {
            let (ca, cb) = (a.to_corners(), b.to_corners());
            prop_assume!(ca.area() > 1e-9 && cb.area() > 1e-9);
            let g = giou_corners(&ca, &cb);
            prop_assert!(g > -1.0 && g <= 1.0 + 1e-15);
            if ca.contains(&cb) || cb.contains(&ca) {
                prop_assert!((g - iou_corners(&ca, &cb)).abs() < 1e-12);
            }
        }

        #[test]
        fn mask_partitions_grid(b in arb_box(), rows in 1usize..10, cols in 1usize..10) {
            prop_assume!(b.area() > 0.0);
            let m = rasterize_mask(&b, rows, cols).unwrap();
            prop_assert!(m.count() >= 1);
            prop_assert_eq!(m.count() + m.complement().count(), rows * cols);
        }
    }
}
