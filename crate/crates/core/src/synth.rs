//! Synthetic referring-expression scenes.
//!
//! A scene is a grid of cells holding a few non-overlapping rectangular
//! objects. Each object has a shape, a color and a size class. An
//! expression names the target by attributes, optionally followed by a
//! relation to an anchor object ("red square left_of blue circle"). Some
//! scenes contain an attribute twin of the target, so only the relation to
//! an object outside the target box disambiguates it.
//!
//! Cell features are one-hot blocks `[shape | color | size]`, each with an
//! extra "background" slot, plus Gaussian noise.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{box_ratio, BoxSpec};
use crate::rng::{substream, Stream};

pub const PAD: usize = 0;
const REL_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    LeftOf,
    RightOf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub n_shapes: usize,
    pub n_colors: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Probability that a scene is built around an attribute twin that only
    /// a relation clause can tell apart.
    pub relation_fraction: f64,
    /// Probability that each non-twin distractor copies one target attribute.
    pub distractor_share: f64,
    pub box_ratio_min: f64,
    pub box_ratio_max: f64,
    pub noise_std: f64,
    pub max_text_len: usize,
    pub seed: u64,
    pub crop_augment: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_train: 1024,
            n_val: 256,
            grid_rows: 8,
            grid_cols: 8,
            n_shapes: 4,
            n_colors: 4,
            min_objects: 3,
            max_objects: 5,
            relation_fraction: 0.35,
            distractor_share: 0.6,
            box_ratio_min: 0.0,
            box_ratio_max: 1.0,
            noise_std: 0.1,
            max_text_len: 6,
            seed: 17,
            crop_augment: false,
        }
    }
}

/// Two size classes: small objects span at most 2 cells, large at least 4.
pub const N_SIZES: usize = 2;
const SMALL_DIMS: [(usize, usize); 3] = [(1, 1), (1, 2), (2, 1)];
const LARGE_DIMS: [(usize, usize); 4] = [(2, 2), (2, 3), (3, 2), (3, 3)];

impl DatasetConfig {
    pub fn feature_dim(&self) -> usize {
        (self.n_shapes + 1) + (self.n_colors + 1) + (N_SIZES + 1)
    }

    pub fn vocab(&self) -> Vocab {
        Vocab {
            n_colors: self.n_colors,
            n_shapes: self.n_shapes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.grid_rows == 0 || self.grid_cols == 0 {
            return bad("empty grid".into());
        }
        if self.n_shapes < 2 || self.n_colors < 2 {
            return bad("need at least two shapes and two colors".into());
        }
        if self.min_objects < 1 || self.min_objects > self.max_objects {
            return bad(format!(
                "object count range [{}, {}] is invalid",
                self.min_objects, self.max_objects
            ));
        }
        if self.max_objects > self.grid_rows * self.grid_cols {
            return bad(format!(
                "{} objects cannot fit a {}x{} grid",
                self.max_objects, self.grid_rows, self.grid_cols
            ));
        }
        if self.relation_fraction > 0.0 && self.max_objects < 3 {
            return bad("relation scenes need at least 3 objects".into());
        }
        if !(0.0..=1.0).contains(&self.relation_fraction) || !(0.0..=1.0).contains(&self.distractor_share) {
            return bad("fractions must lie in [0, 1]".into());
        }
        if self.box_ratio_min > self.box_ratio_max {
            return bad("box ratio range is empty".into());
        }
        let smallest = 1.0 / (self.grid_rows * self.grid_cols) as f64;
        if self.box_ratio_max < smallest {
            return bad(format!("box_ratio_max below a single cell ({smallest})"));
        }
        if self.max_text_len < 6 {
            return bad("max_text_len must be at least 6".into());
        }
        if self.noise_std < 0.0 || !self.noise_std.is_finite() {
            return bad("noise_std must be non-negative".into());
        }
        Ok(())
    }
}

/// Token-id layout: `PAD`, colors, shapes, sizes, relations.
#[derive(Clone, Copy, Debug)]
pub struct Vocab {
    pub n_colors: usize,
    pub n_shapes: usize,
}

impl Vocab {
    pub fn size(&self) -> usize {
        1 + self.n_colors + self.n_shapes + N_SIZES + 2
    }
    pub fn color(&self, c: usize) -> usize {
        1 + c
    }
    pub fn shape(&self, s: usize) -> usize {
        1 + self.n_colors + s
    }
    pub fn size_word(&self, z: usize) -> usize {
        1 + self.n_colors + self.n_shapes + z
    }
    pub fn relation(&self, r: Relation) -> usize {
        let base = 1 + self.n_colors + self.n_shapes + N_SIZES;
        match r {
            Relation::LeftOf => base,
            Relation::RightOf => base + 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: usize,
    pub color: usize,
    pub size: usize,
    pub bbox: BoxSpec,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttrQuery {
    pub size: Option<usize>,
    pub color: usize,
    pub shape: usize,
}

impl AttrQuery {
    fn matches(&self, o: &SceneObject) -> bool {
        o.color == self.color && o.shape == self.shape && self.size.is_none_or(|z| z == o.size)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Expression {
    pub target: AttrQuery,
    pub relation: Option<(Relation, AttrQuery)>,
}

impl Expression {
    pub fn tokens(&self, vocab: &Vocab, len: usize) -> Vec<usize> {
        let mut t = Vec::with_capacity(len);
        let push_attr = |t: &mut Vec<usize>, q: &AttrQuery| {
            if let Some(z) = q.size {
                t.push(vocab.size_word(z));
            }
            t.push(vocab.color(q.color));
            t.push(vocab.shape(q.shape));
        };
        push_attr(&mut t, &self.target);
        if let Some((rel, anchor)) = &self.relation {
            t.push(vocab.relation(*rel));
            push_attr(&mut t, anchor);
        }
        t.resize(len, PAD);
        t
    }
}

fn related(a: &BoxSpec, b: &BoxSpec, rel: Relation) -> bool {
    let (ka, kb) = (a.to_corners(), b.to_corners());
    match rel {
        Relation::LeftOf => ka.x2 <= kb.x1 + REL_EPS,
        Relation::RightOf => ka.x1 >= kb.x2 - REL_EPS,
    }
}

/// Indices of every object satisfying the expression, by exhaustive search.
pub fn referents(objects: &[SceneObject], expr: &Expression) -> Vec<usize> {
    (0..objects.len())
        .filter(|&i| {
            let o = &objects[i];
            if !expr.target.matches(o) {
                return false;
            }
            match &expr.relation {
                None => true,
                Some((rel, anchor)) => objects
                    .iter()
                    .enumerate()
                    .any(|(j, a)| j != i && anchor.matches(a) && related(&o.bbox, &a.bbox, *rel)),
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundingSample {
    pub id: u64,
    pub split: Split,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub feature_dim: usize,
    /// Row-major `[grid_rows * grid_cols, feature_dim]`.
    pub features: Vec<f64>,
    pub tokens: Vec<usize>,
    pub gt: BoxSpec,
    pub objects: Vec<SceneObject>,
    pub target: usize,
    pub expression: Expression,
}

impl GroundingSample {
    pub fn n_cells(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn box_ratio(&self) -> f64 {
        box_ratio(&self.gt)
    }

    /// True when attributes alone leave more than one candidate, so the
    /// referent can only be found through an object outside its box.
    pub fn requires_context(&self) -> bool {
        let attrs_only = Expression {
            target: self.expression.target,
            relation: None,
        };
        referents(&self.objects, &attrs_only).len() > 1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub train: Vec<GroundingSample>,
    pub val: Vec<GroundingSample>,
}

#[derive(Clone, Copy, Debug)]
struct CellRect {
    r: usize,
    c: usize,
    h: usize,
    w: usize,
}

impl CellRect {
    fn overlaps(&self, o: &CellRect) -> bool {
        self.r < o.r + o.h && o.r < self.r + self.h && self.c < o.c + o.w && o.c < self.c + self.w
    }

    fn to_box(self, rows: usize, cols: usize) -> BoxSpec {
        BoxSpec {
            cx: (self.c as f64 + self.w as f64 / 2.0) / cols as f64,
            cy: (self.r as f64 + self.h as f64 / 2.0) / rows as f64,
            w: self.w as f64 / cols as f64,
            h: self.h as f64 / rows as f64,
        }
    }
}

const MAX_ATTEMPTS: usize = 10_000;

struct Scene {
    objects: Vec<SceneObject>,
    rects: Vec<CellRect>,
}

fn place(cfg: &DatasetConfig, rng: &mut ChaCha8Rng, taken: &[CellRect], size: usize) -> Option<CellRect> {
    let dims: &[(usize, usize)] = if size == 0 { &SMALL_DIMS } else { &LARGE_DIMS };
    for _ in 0..64 {
        let (h, w) = dims[rng.random_range(0..dims.len())];
        if h > cfg.grid_rows || w > cfg.grid_cols {
            continue;
        }
        let rect = CellRect {
            r: rng.random_range(0..=cfg.grid_rows - h),
            c: rng.random_range(0..=cfg.grid_cols - w),
            h,
            w,
        };
        if taken.iter().all(|t| !t.overlaps(&rect)) {
            return Some(rect);
        }
    }
    None
}

fn random_attrs(cfg: &DatasetConfig, rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
    (
        rng.random_range(0..cfg.n_shapes),
        rng.random_range(0..cfg.n_colors),
        rng.random_range(0..N_SIZES),
    )
}

impl Scene {
    fn push(&mut self, cfg: &DatasetConfig, rng: &mut ChaCha8Rng, (shape, color, size): (usize, usize, usize)) -> bool {
        match place(cfg, rng, &self.rects, size) {
            Some(rect) => {
                self.rects.push(rect);
                self.objects.push(SceneObject {
                    shape,
                    color,
                    size,
                    bbox: rect.to_box(cfg.grid_rows, cfg.grid_cols),
                });
                true
            }
            None => false,
        }
    }
}

/// One scene attempt. The target is always object 0.
fn try_scene(cfg: &DatasetConfig, rng: &mut ChaCha8Rng, relational: bool) -> Option<(Scene, Expression)> {
    let lo = if relational {
        cfg.min_objects.max(3)
    } else {
        cfg.min_objects
    };
    let n = rng.random_range(lo..=cfg.max_objects);
    let mut scene = Scene {
        objects: Vec::new(),
        rects: Vec::new(),
    };
    let target = random_attrs(cfg, rng);
    if !scene.push(cfg, rng, target) {
        return None;
    }
    if relational {
        // twin, then an anchor that differs from the target in color or shape
        if !scene.push(cfg, rng, target) {
            return None;
        }
        let anchor = loop {
            let a = random_attrs(cfg, rng);
            if (a.0, a.1) != (target.0, target.1) {
                break a;
            }
        };
        if !scene.push(cfg, rng, anchor) {
            return None;
        }
    }
    while scene.objects.len() < n {
        let mut a = random_attrs(cfg, rng);
        if rng.random_bool(cfg.distractor_share) {
            if rng.random_bool(0.5) {
                a.0 = target.0;
            } else {
                a.1 = target.1;
            }
        }
        if !scene.push(cfg, rng, a) {
            return None;
        }
    }

    let t = &scene.objects[0];
    let plain = AttrQuery {
        size: None,
        color: t.color,
        shape: t.shape,
    };
    let sized = AttrQuery {
        size: Some(t.size),
        ..plain
    };
    let unique = |expr: &Expression| referents(&scene.objects, expr) == [0];
    let expr = if relational {
        let anchor = &scene.objects[2];
        let anchor_q = AttrQuery {
            size: None,
            color: anchor.color,
            shape: anchor.shape,
        };
        let mut rels = [Relation::LeftOf, Relation::RightOf];
        rels.shuffle(rng);
        rels.iter().find_map(|&rel| {
            [plain, sized].into_iter().find_map(|q| {
                let e = Expression {
                    target: q,
                    relation: Some((rel, anchor_q)),
                };
                unique(&e).then_some(e)
            })
        })?
    } else {
        [plain, sized].into_iter().find_map(|q| {
            let e = Expression {
                target: q,
                relation: None,
            };
            unique(&e).then_some(e)
        })?
    };
    Some((scene, expr))
}

fn render(cfg: &DatasetConfig, rects: &[CellRect], objects: &[SceneObject], rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let dim = cfg.feature_dim();
    let cells = cfg.grid_rows * cfg.grid_cols;
    let mut f = vec![0.0; cells * dim];
    let (so, co, zo) = (0, cfg.n_shapes + 1, cfg.n_shapes + cfg.n_colors + 2);
    for cell in 0..cells {
        let base = cell * dim;
        f[base + so + cfg.n_shapes] = 1.0;
        f[base + co + cfg.n_colors] = 1.0;
        f[base + zo + N_SIZES] = 1.0;
    }
    for (rect, obj) in rects.iter().zip(objects) {
        for r in rect.r..rect.r + rect.h {
            for c in rect.c..rect.c + rect.w {
                let base = (r * cfg.grid_cols + c) * dim;
                f[base..base + dim].iter_mut().for_each(|v| *v = 0.0);
                f[base + so + obj.shape] = 1.0;
                f[base + co + obj.color] = 1.0;
                f[base + zo + obj.size] = 1.0;
            }
        }
    }
    if cfg.noise_std > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Config(e.to_string()))?;
        f.iter_mut().for_each(|v| *v += normal.sample(rng));
    }
    Ok(f)
}

/// Generates one sample from its own derived seed.
pub fn generate_sample(cfg: &DatasetConfig, id: u64, split: Split) -> Result<GroundingSample> {
    let mut rng = substream(cfg.seed, Stream::Data, id);
    // drawn once so rejection sampling cannot skew the relation share
    let relational = cfg.max_objects >= 3 && rng.random_bool(cfg.relation_fraction);
    for _ in 0..MAX_ATTEMPTS {
        let Some((scene, expr)) = try_scene(cfg, &mut rng, relational) else {
            continue;
        };
        let gt = scene.objects[0].bbox;
        let ratio = box_ratio(&gt);
        if ratio < cfg.box_ratio_min || ratio > cfg.box_ratio_max {
            continue;
        }
        let features = render(cfg, &scene.rects, &scene.objects, &mut rng)?;
        return Ok(GroundingSample {
            id,
            split,
            grid_rows: cfg.grid_rows,
            grid_cols: cfg.grid_cols,
            feature_dim: cfg.feature_dim(),
            features,
            tokens: expr.tokens(&cfg.vocab(), cfg.max_text_len),
            gt,
            objects: scene.objects,
            target: 0,
            expression: expr,
        });
    }
    Err(Error::Config(format!(
        "could not build a valid scene for sample {id} in {MAX_ATTEMPTS} attempts"
    )))
}

/// Builds the full train/val dataset. Samples are generated in parallel
/// from per-id seeds; ids `0..n_train` are train, the rest val.
pub fn generate(cfg: &DatasetConfig) -> Result<Dataset> {
    cfg.validate()?;
    let total = (cfg.n_train + cfg.n_val) as u64;
    let samples: Vec<GroundingSample> = (0..total)
        .into_par_iter()
        .map(|id| {
            let split = if id < cfg.n_train as u64 {
                Split::Train
            } else {
                Split::Val
            };
            generate_sample(cfg, id, split)
        })
        .collect::<Result<_>>()?;
    let mut train = samples;
    let val = train.split_off(cfg.n_train);
    Ok(Dataset {
        config: cfg.clone(),
        train,
        val,
    })
}

/// Crop window in normalized image coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropWindow {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl CropWindow {
    pub const FULL: CropWindow = CropWindow {
        x0: 0.0,
        y0: 0.0,
        x1: 1.0,
        y1: 1.0,
    };

    fn remap(&self, b: &BoxSpec) -> BoxSpec {
        let sx = self.x1 - self.x0;
        let sy = self.y1 - self.y0;
        BoxSpec {
            cx: (b.cx - self.x0) / sx,
            cy: (b.cy - self.y0) / sy,
            w: b.w / sx,
            h: b.h / sy,
        }
    }
}

/// Re-renders `sample` as seen through `window`, resampling cells by
/// nearest neighbour and remapping every box.
pub fn apply_crop(sample: &GroundingSample, window: CropWindow) -> GroundingSample {
    let (rows, cols, dim) = (sample.grid_rows, sample.grid_cols, sample.feature_dim);
    let mut features = vec![0.0; sample.features.len()];
    for r in 0..rows {
        let y = window.y0 + (r as f64 + 0.5) / rows as f64 * (window.y1 - window.y0);
        let sr = ((y * rows as f64).floor() as usize).min(rows - 1);
        for c in 0..cols {
            let x = window.x0 + (c as f64 + 0.5) / cols as f64 * (window.x1 - window.x0);
            let sc = ((x * cols as f64).floor() as usize).min(cols - 1);
            let (dst, src) = ((r * cols + c) * dim, (sr * cols + sc) * dim);
            features[dst..dst + dim].copy_from_slice(&sample.features[src..src + dim]);
        }
    }
    let mut out = sample.clone();
    out.features = features;
    out.gt = window.remap(&sample.gt);
    for o in &mut out.objects {
        o.bbox = window.remap(&o.bbox);
    }
    out
}

/// Random crop that always keeps the target and any relation anchor it
/// refers to fully visible.
pub fn augment_crop(sample: &GroundingSample, seed: u64) -> GroundingSample {
    let mut rng = substream(seed, Stream::Augment, sample.id);
    let mut keep = sample.gt.to_corners();
    if let Some((rel, anchor)) = &sample.expression.relation {
        let t = &sample.objects[sample.target];
        if let Some(a) = sample
            .objects
            .iter()
            .enumerate()
            .find(|(j, a)| *j != sample.target && anchor.matches(a) && related(&t.bbox, &a.bbox, *rel))
        {
            let k = a.1.bbox.to_corners();
            keep.x1 = keep.x1.min(k.x1);
            keep.y1 = keep.y1.min(k.y1);
            keep.x2 = keep.x2.max(k.x2);
            keep.y2 = keep.y2.max(k.y2);
        }
    }
    let mut pick = |lo: f64, hi: f64| if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let window = CropWindow {
        x0: pick(0.0, keep.x1),
        y0: pick(0.0, keep.y1),
        x1: pick(keep.x2, 1.0),
        y1: pick(keep.y2, 1.0),
    };
    apply_crop(sample, window)
}

// ---- dataset files ---------------------------------------------------

pub const DATASET_FORMAT: &str = "attbalance-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    config: DatasetConfig,
    n_train: usize,
    n_val: usize,
}

/// Writes the dataset as JSON lines: one header object followed by one
/// object per sample (train first, then val).
pub fn write_dataset<W: Write>(ds: &Dataset, mut w: W) -> Result<()> {
    let header = Header {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        config: ds.config.clone(),
        n_train: ds.train.len(),
        n_val: ds.val.len(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for s in ds.train.iter().chain(&ds.val) {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_dataset<R: BufRead>(r: R) -> Result<Dataset> {
    let mut lines = r.lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::Format("empty dataset file".into()))??;
    let header: Header = serde_json::from_str(&first)?;
    if header.format != DATASET_FORMAT || header.version != DATASET_VERSION {
        return Err(Error::Format(format!(
            "unsupported dataset {} v{}",
            header.format, header.version
        )));
    }
    let mut train = Vec::with_capacity(header.n_train);
    let mut val = Vec::with_capacity(header.n_val);
    for line in lines {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let s: GroundingSample = serde_json::from_str(&line)?;
        match s.split {
            Split::Train => train.push(s),
            Split::Val => val.push(s),
        }
    }
    if train.len() != header.n_train || val.len() != header.n_val {
        return Err(Error::Format("sample counts disagree with header".into()));
    }
    Ok(Dataset {
        config: header.config,
        train,
        val,
    })
}
