//! Miniature fusion transformer over `[object query, text, visual]` tokens.
//!
//! Each layer is pre-norm: `x += Attn(LN1(x))`, `x += FFN(LN2(x))`. The
//! object query's final state is regressed into `(cx, cy, w, h)` by a 3-layer
//! MLP ending in a sigmoid. For every captured layer a separate
//! query-to-visual map is recomputed from that layer's projections: per-head
//! scaled similarity between the query row and the visual rows, averaged over
//! heads, then softmaxed over the visual positions only.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoxSpec;
use crate::numerics::{Tape, Tensor, Var};
use crate::rng::{substream, Stream};
use crate::synth::GroundingSample;

pub const LN_EPS: f64 = 1e-5;

/// Which query/visual states feed the captured attention map.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptureSource {
    /// The layer-normalized states the attention block actually consumes.
    #[default]
    Normalized,
    /// The raw residual stream entering the layer.
    Residual,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub max_text_len: usize,
    pub vocab_size: usize,
    pub mlp_hidden: usize,
    pub visual_dim: usize,
    pub capture_source: CaptureSource,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_heads: 4,
            n_layers: 6,
            grid_rows: 8,
            grid_cols: 8,
            max_text_len: 6,
            vocab_size: 13,
            mlp_hidden: 64,
            visual_dim: 13,
            capture_source: CaptureSource::Normalized,
        }
    }
}

impl ModelConfig {
    pub fn n_visual(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn seq_len(&self) -> usize {
        1 + self.max_text_len + self.n_visual()
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad("d_model must be a positive multiple of n_heads");
        }
        if self.n_layers == 0 {
            return bad("n_layers must be at least 1");
        }
        if self.grid_rows == 0 || self.grid_cols == 0 || self.max_text_len == 0 {
            return bad("grid and text length must be non-empty");
        }
        if self.vocab_size == 0 || self.mlp_hidden == 0 || self.visual_dim == 0 {
            return bad("vocab_size, mlp_hidden and visual_dim must be positive");
        }
        Ok(())
    }

    pub fn check_capture(&self, layers: &[usize]) -> Result<()> {
        if layers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Contract(format!(
                "capture layers {layers:?} must be strictly increasing"
            )));
        }
        if let Some(&l) = layers.iter().find(|&&l| l >= self.n_layers) {
            return Err(Error::Contract(format!(
                "capture layer {l} out of range for {} layers",
                self.n_layers
            )));
        }
        Ok(())
    }

    pub fn check_sample(&self, s: &GroundingSample) -> Result<()> {
        if s.grid_rows != self.grid_rows || s.grid_cols != self.grid_cols || s.feature_dim != self.visual_dim {
            return Err(Error::Contract(format!(
                "sample {} is a {}x{}x{} grid, model expects {}x{}x{}",
                s.id, s.grid_rows, s.grid_cols, s.feature_dim, self.grid_rows, self.grid_cols, self.visual_dim
            )));
        }
        if s.tokens.len() != self.max_text_len {
            return Err(Error::Contract(format!(
                "sample {} has {} tokens, model expects {}",
                s.id,
                s.tokens.len(),
                self.max_text_len
            )));
        }
        if let Some(&t) = s.tokens.iter().find(|&&t| t >= self.vocab_size) {
            return Err(Error::Contract(format!(
                "sample {} token {t} outside vocabulary of {}",
                s.id, self.vocab_size
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub ln1_gamma: T,
    pub ln1_beta: T,
    pub wq: T,
    pub bq: T,
    pub wk: T,
    pub bk: T,
    pub wv: T,
    pub bv: T,
    pub wo: T,
    pub bo: T,
    pub ln2_gamma: T,
    pub ln2_beta: T,
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

const LAYER_FIELDS: [&str; 16] = [
    "ln1.gamma",
    "ln1.beta",
    "attn.wq",
    "attn.bq",
    "attn.wk",
    "attn.bk",
    "attn.wv",
    "attn.bv",
    "attn.wo",
    "attn.bo",
    "ln2.gamma",
    "ln2.beta",
    "ffn.w1",
    "ffn.b1",
    "ffn.w2",
    "ffn.b2",
];

const TOP_FIELDS: [&str; 7] = [
    "text_embed",
    "text_pos",
    "vis_proj.weight",
    "vis_proj.bias",
    "vis_row_pos",
    "vis_col_pos",
    "query",
];

const TAIL_FIELDS: [&str; 8] = [
    "final_ln.gamma",
    "final_ln.beta",
    "head.w1",
    "head.b1",
    "head.w2",
    "head.b2",
    "head.w3",
    "head.b3",
];

/// Every learnable tensor of the model. Generic so the same layout holds
/// tensors (`ModelParams`) or tape handles (`BoundParams`).
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    pub text_embed: T,
    pub text_pos: T,
    pub vis_w: T,
    pub vis_b: T,
    pub vis_row_pos: T,
    pub vis_col_pos: T,
    pub query: T,
    pub layers: Vec<LayerParams<T>>,
    pub final_gamma: T,
    pub final_beta: T,
    pub head_w1: T,
    pub head_b1: T,
    pub head_w2: T,
    pub head_b2: T,
    pub head_w3: T,
    pub head_b3: T,
}

pub type ModelParams = Params<Tensor>;
pub type BoundParams = Params<Var>;

impl<T> LayerParams<T> {
    fn fields(&self) -> [&T; 16] {
        [
            &self.ln1_gamma,
            &self.ln1_beta,
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.ln2_gamma,
            &self.ln2_beta,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
        ]
    }

    fn from_iter(it: &mut impl Iterator<Item = T>) -> Option<Self> {
        Some(Self {
            ln1_gamma: it.next()?,
            ln1_beta: it.next()?,
            wq: it.next()?,
            bq: it.next()?,
            wk: it.next()?,
            bk: it.next()?,
            wv: it.next()?,
            bv: it.next()?,
            wo: it.next()?,
            bo: it.next()?,
            ln2_gamma: it.next()?,
            ln2_beta: it.next()?,
            w1: it.next()?,
            b1: it.next()?,
            w2: it.next()?,
            b2: it.next()?,
        })
    }
}

/// Parameter names in canonical order for a model with `n_layers` layers.
pub fn param_names(n_layers: usize) -> Vec<String> {
    let mut names: Vec<String> = TOP_FIELDS.iter().map(|s| s.to_string()).collect();
    for i in 0..n_layers {
        names.extend(LAYER_FIELDS.iter().map(|f| format!("layers.{i}.{f}")));
    }
    names.extend(TAIL_FIELDS.iter().map(|s| s.to_string()));
    names
}

impl<T> Params<T> {
    /// All tensors in canonical order (matching [`param_names`]).
    pub fn values(&self) -> Vec<&T> {
        let mut v = vec![
            &self.text_embed,
            &self.text_pos,
            &self.vis_w,
            &self.vis_b,
            &self.vis_row_pos,
            &self.vis_col_pos,
            &self.query,
        ];
        for l in &self.layers {
            v.extend(l.fields());
        }
        v.extend([
            &self.final_gamma,
            &self.final_beta,
            &self.head_w1,
            &self.head_b1,
            &self.head_w2,
            &self.head_b2,
            &self.head_w3,
            &self.head_b3,
        ]);
        v
    }

    pub fn named(&self) -> Vec<(String, &T)> {
        param_names(self.layers.len()).into_iter().zip(self.values()).collect()
    }

    /// Rebuilds from values in canonical order.
    pub fn from_values(n_layers: usize, values: Vec<T>) -> Result<Self> {
        let expected = TOP_FIELDS.len() + n_layers * LAYER_FIELDS.len() + TAIL_FIELDS.len();
        if values.len() != expected {
            return Err(Error::Format(format!(
                "expected {expected} parameter tensors, got {}",
                values.len()
            )));
        }
        let mut it = values.into_iter();
        let (text_embed, text_pos, vis_w, vis_b, vis_row_pos, vis_col_pos, query) = {
            let mut next = || it.next().expect("length checked");
            (next(), next(), next(), next(), next(), next(), next())
        };
        let layers = (0..n_layers)
            .map(|_| LayerParams::from_iter(&mut it).expect("length checked"))
            .collect();
        let mut next = || it.next().expect("length checked");
        Ok(Self {
            text_embed,
            text_pos,
            vis_w,
            vis_b,
            vis_row_pos,
            vis_col_pos,
            query,
            layers,
            final_gamma: next(),
            final_beta: next(),
            head_w1: next(),
            head_b1: next(),
            head_w2: next(),
            head_b2: next(),
            head_w3: next(),
            head_b3: next(),
        })
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Params<U> {
        let values = self.values().into_iter().map(f).collect();
        Params::from_values(self.layers.len(), values).expect("same layout")
    }
}

impl ModelParams {
    pub fn num_scalars(&self) -> usize {
        self.values().iter().map(|t| t.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values().iter().all(|t| t.is_finite())
    }

    /// Shapes every parameter must have under `cfg`, in canonical order.
    pub fn expected_shapes(cfg: &ModelConfig) -> Vec<Vec<usize>> {
        let d = cfg.d_model;
        let mut s = vec![
            vec![cfg.vocab_size, d],
            vec![cfg.max_text_len, d],
            vec![cfg.visual_dim, d],
            vec![d],
            vec![cfg.grid_rows, d],
            vec![cfg.grid_cols, d],
            vec![1, d],
        ];
        for _ in 0..cfg.n_layers {
            s.extend([
                vec![d],
                vec![d],
                vec![d, d],
                vec![d],
                vec![d, d],
                vec![d],
                vec![d, d],
                vec![d],
                vec![d, d],
                vec![d],
                vec![d],
                vec![d],
                vec![d, cfg.mlp_hidden],
                vec![cfg.mlp_hidden],
                vec![cfg.mlp_hidden, d],
                vec![d],
            ]);
        }
        s.extend([
            vec![d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d, 4],
            vec![4],
        ]);
        s
    }

    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        if self.layers.len() != cfg.n_layers {
            return Err(Error::Format(format!(
                "{} layers stored, config has {}",
                self.layers.len(),
                cfg.n_layers
            )));
        }
        for ((name, t), shape) in self.named().into_iter().zip(Self::expected_shapes(cfg)) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Format(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        self.map(|t| tape.leaf(t.clone()))
    }
}

/// Deterministic uniform initialization: linear weights and biases in
/// `±1/sqrt(fan_in)`, embeddings in `±1/sqrt(d_model)`, layer norms at
/// identity and the last head bias at zero.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = substream(seed, Stream::Init, 0);
    let d = cfg.d_model;
    let names = param_names(cfg.n_layers);
    let shapes = ModelParams::expected_shapes(cfg);
    let mut values = Vec::with_capacity(names.len());
    for (name, shape) in names.iter().zip(shapes) {
        let n: usize = shape.iter().product();
        let leaf = name.rsplit('.').next().unwrap_or(name);
        let data = if leaf == "gamma" {
            vec![1.0; n]
        } else if leaf == "beta" || name == "head.b3" {
            vec![0.0; n]
        } else {
            let fan_in = match name.as_str() {
                "vis_proj.weight" | "vis_proj.bias" => cfg.visual_dim,
                _ if name.ends_with("ffn.w2") || name.ends_with("ffn.b2") => cfg.mlp_hidden,
                _ => d,
            };
            let bound = 1.0 / (fan_in as f64).sqrt();
            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
        };
        values.push(Tensor::new(shape, data)?);
    }
    Params::from_values(cfg.n_layers, values)
}

/// Captured query-to-visual maps on a tape, one entry per captured layer.
#[derive(Clone, Debug)]
pub struct AttentionStack {
    pub layers: Vec<usize>,
    /// Probability vectors of length `N_v`.
    pub maps: Vec<Var>,
    /// Head-averaged similarities before the softmax.
    pub logits: Vec<Var>,
}

impl AttentionStack {
    pub fn detach(&self, tape: &Tape) -> CapturedAttention {
        CapturedAttention {
            layers: self.layers.clone(),
            maps: self.maps.iter().map(|&v| tape.value(v).data().to_vec()).collect(),
            logits: self.logits.iter().map(|&v| tape.value(v).data().to_vec()).collect(),
        }
    }
}

/// Plain-value copy of an [`AttentionStack`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CapturedAttention {
    pub layers: Vec<usize>,
    pub maps: Vec<Vec<f64>>,
    pub logits: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Rank-1 node `[cx, cy, w, h]`.
    pub pred: Var,
    pub attn: AttentionStack,
}

/// Head-averaged scaled similarity of one query row `[1, d]` against keys
/// `[n, d]`, split into `n_heads` heads of width `d / n_heads`. Returns a
/// rank-1 node of length `n`.
pub fn head_mean_similarity(tape: &mut Tape, q: Var, keys: Var, n_heads: usize) -> Result<Var> {
    let d = tape.shape(q)[1];
    if !d.is_multiple_of(n_heads) || tape.shape(keys)[1] != d {
        return Err(Error::dim("head_mean_similarity", tape.shape(q), tape.shape(keys)));
    }
    let dk = d / n_heads;
    let inv = 1.0 / (dk as f64).sqrt();
    let mut rows = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = tape.slice_cols(q, h * dk, dk)?;
        let kh = tape.slice_cols(keys, h * dk, dk)?;
        let kt = tape.transpose(kh)?;
        let s = tape.matmul(qh, kt)?;
        rows.push(tape.scale(s, inv));
    }
    let stacked = tape.concat_rows(&rows)?;
    tape.mean_over_axis(stacked, 0)
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

fn ensure_finite(tape: &Tape, v: Var, what: impl FnOnce() -> String) -> Result<()> {
    if tape.value(v).is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what()))
    }
}

/// Runs the model on one sample, capturing attention at `capture` layers.
pub fn forward(
    tape: &mut Tape,
    cfg: &ModelConfig,
    p: &BoundParams,
    sample: &GroundingSample,
    capture: &[usize],
) -> Result<ForwardOutput> {
    cfg.check_capture(capture)?;
    cfg.check_sample(sample)?;
    let (l, nv, heads) = (cfg.max_text_len, cfg.n_visual(), cfg.n_heads);
    let dk = cfg.d_head();
    let inv_sqrt = 1.0 / (dk as f64).sqrt();

    let text = tape.gather_rows(p.text_embed, &sample.tokens)?;
    let text = tape.add(text, p.text_pos)?;
    let feats = tape.constant(Tensor::new(vec![nv, cfg.visual_dim], sample.features.clone())?);
    let vis = linear(tape, feats, p.vis_w, p.vis_b)?;
    let rows: Vec<usize> = (0..nv).map(|i| i / cfg.grid_cols).collect();
    let cols: Vec<usize> = (0..nv).map(|i| i % cfg.grid_cols).collect();
    let rp = tape.gather_rows(p.vis_row_pos, &rows)?;
    let cp = tape.gather_rows(p.vis_col_pos, &cols)?;
    let vis = tape.add(vis, rp)?;
    let vis = tape.add(vis, cp)?;
    let mut x = tape.concat_rows(&[p.query, text, vis])?;
    ensure_finite(tape, x, || "input embeddings".into())?;

    let mut attn = AttentionStack {
        layers: Vec::with_capacity(capture.len()),
        maps: Vec::with_capacity(capture.len()),
        logits: Vec::with_capacity(capture.len()),
    };
    for (i, lp) in p.layers.iter().enumerate() {
        let h = tape.layer_norm(x, lp.ln1_gamma, lp.ln1_beta, LN_EPS)?;
        let q = linear(tape, h, lp.wq, lp.bq)?;
        let k = linear(tape, h, lp.wk, lp.bk)?;
        let v = linear(tape, h, lp.wv, lp.bv)?;

        if capture.contains(&i) {
            let (q0, kv) = match cfg.capture_source {
                CaptureSource::Normalized => (tape.slice_rows(q, 0, 1)?, tape.slice_rows(k, 1 + l, nv)?),
                CaptureSource::Residual => {
                    let x0 = tape.slice_rows(x, 0, 1)?;
                    let xv = tape.slice_rows(x, 1 + l, nv)?;
                    (linear(tape, x0, lp.wq, lp.bq)?, linear(tape, xv, lp.wk, lp.bk)?)
                }
            };
            let logits = head_mean_similarity(tape, q0, kv, heads)?;
            let map = tape.softmax(logits, 0)?;
            ensure_finite(tape, map, || format!("captured attention at layer {i}"))?;
            attn.layers.push(i);
            attn.logits.push(logits);
            attn.maps.push(map);
        }

        let mut outs = Vec::with_capacity(heads);
        for hd in 0..heads {
            let qh = tape.slice_cols(q, hd * dk, dk)?;
            let kh = tape.slice_cols(k, hd * dk, dk)?;
            let vh = tape.slice_cols(v, hd * dk, dk)?;
            let kt = tape.transpose(kh)?;
            let s = tape.matmul(qh, kt)?;
            let s = tape.scale(s, inv_sqrt);
            let a = tape.softmax(s, 1)?;
            outs.push(tape.matmul(a, vh)?);
        }
        let cat = tape.concat_cols(&outs)?;
        let o = linear(tape, cat, lp.wo, lp.bo)?;
        x = tape.add(x, o)?;
        let h2 = tape.layer_norm(x, lp.ln2_gamma, lp.ln2_beta, LN_EPS)?;
        let f = linear(tape, h2, lp.w1, lp.b1)?;
        let f = tape.relu(f);
        let f = linear(tape, f, lp.w2, lp.b2)?;
        x = tape.add(x, f)?;
        ensure_finite(tape, x, || format!("layer {i} activations"))?;
    }

    let z = tape.slice_rows(x, 0, 1)?;
    let z = tape.layer_norm(z, p.final_gamma, p.final_beta, LN_EPS)?;
    let z = linear(tape, z, p.head_w1, p.head_b1)?;
    let z = tape.relu(z);
    let z = linear(tape, z, p.head_w2, p.head_b2)?;
    let z = tape.relu(z);
    let z = linear(tape, z, p.head_w3, p.head_b3)?;
    let z = tape.sigmoid(z);
    let pred = tape.reshape(z, vec![4])?;
    ensure_finite(tape, pred, || "regression head".into())?;
    Ok(ForwardOutput { pred, attn })
}

/// Gradient-free prediction for one sample.
pub fn predict(
    cfg: &ModelConfig,
    params: &ModelParams,
    sample: &GroundingSample,
    capture: &[usize],
) -> Result<(BoxSpec, CapturedAttention)> {
    let mut tape = Tape::no_grad();
    let bound = params.map(|t| tape.constant(t.clone()));
    let out = forward(&mut tape, cfg, &bound, sample, capture)?;
    let d = tape.value(out.pred).data();
    let pred = BoxSpec {
        cx: d[0],
        cy: d[1],
        w: d[2],
        h: d[3],
    };
    Ok((pred, out.attn.detach(&tape)))
}

/// [`predict`] over a batch, fanned out across threads; output order
/// matches input order.
pub fn forward_batch(
    cfg: &ModelConfig,
    params: &ModelParams,
    samples: &[GroundingSample],
    capture: &[usize],
) -> Result<Vec<(BoxSpec, CapturedAttention)>> {
    samples.par_iter().map(|s| predict(cfg, params, s, capture)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rasterize_mask;
    use crate::numerics::grad_check;
    use crate::synth::{generate, DatasetConfig};

    fn tiny() -> (ModelConfig, Vec<GroundingSample>) {
        let ds = generate(&DatasetConfig {
            n_train: 8,
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
        (cfg, ds.train)
    }

    #[test]
    fn names_match_values() {
        let (cfg, _) = tiny();
        let p = init_params(&cfg, 1).unwrap();
        assert_eq!(p.values().len(), param_names(2).len());
        p.check_shapes(&cfg).unwrap();
        let names = param_names(2);
        let unique: std::collections::HashSet<_> = names.iter().collect();
        assert_eq!(unique.len(), names.len());
    }

    #[test]
    fn init_is_deterministic() {
        let (cfg, _) = tiny();
        assert_eq!(init_params(&cfg, 3).unwrap(), init_params(&cfg, 3).unwrap());
        assert_ne!(init_params(&cfg, 3).unwrap(), init_params(&cfg, 4).unwrap());
        let p = init_params(&cfg, 3).unwrap();
        assert!(p.head_b3.data().iter().all(|&v| v == 0.0));
        assert_eq!(p.num_scalars(), init_params(&cfg, 9).unwrap().num_scalars());
    }

    #[test]
    fn maps_are_distributions() {
        let (cfg, samples) = tiny();
        let p = init_params(&cfg, 5).unwrap();
        for s in &samples {
            let (pred, attn) = predict(&cfg, &p, s, &[0, 1]).unwrap();
            for &v in &pred.as_array() {
                assert!(v > 0.0 && v < 1.0);
            }
            let mask = rasterize_mask(&s.gt, cfg.grid_rows, cfg.grid_cols).unwrap();
            for m in &attn.maps {
                assert_eq!(m.len(), cfg.n_visual());
                assert!(m.iter().all(|&a| a >= 0.0));
                assert!((m.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                let inside = mask.masked_sum(m);
                let outside = mask.complement().masked_sum(m);
                assert!((inside + outside - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn identical_visual_tokens_give_uniform_map() {
        let (cfg, samples) = tiny();
        let p = init_params(&cfg, 6).unwrap();
        let mut s = samples[0].clone();
        let row: Vec<f64> = s.features[..s.feature_dim].to_vec();
        for c in 0..s.n_cells() {
            s.features[c * s.feature_dim..(c + 1) * s.feature_dim].copy_from_slice(&row);
        }
        // positional embeddings would break the symmetry
        let mut p = p;
        p.vis_row_pos = Tensor::zeros(p.vis_row_pos.shape());
        p.vis_col_pos = Tensor::zeros(p.vis_col_pos.shape());
        let (_, attn) = predict(&cfg, &p, &s, &[0, 1]).unwrap();
        for m in &attn.maps {
            for &a in m {
                assert!((a - 1.0 / 16.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_is_pure_and_batch_consistent() {
        let (cfg, samples) = tiny();
        let p = init_params(&cfg, 7).unwrap();
        let a = predict(&cfg, &p, &samples[0], &[1]).unwrap();
        let b = predict(&cfg, &p, &samples[0], &[1]).unwrap();
        assert_eq!(a, b);
        let batch = forward_batch(&cfg, &p, &samples[..1], &[1]).unwrap();
        assert_eq!(batch[0], a);
        let fwd = forward_batch(&cfg, &p, &samples, &[1]).unwrap();
        let rev: Vec<_> = samples.iter().rev().cloned().collect();
        let mut back = forward_batch(&cfg, &p, &rev, &[1]).unwrap();
        back.reverse();
        assert_eq!(fwd, back);
    }

    #[test]
    fn recording_and_plain_forward_agree() {
        let (cfg, samples) = tiny();
        let p = init_params(&cfg, 8).unwrap();
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape);
        let out = forward(&mut tape, &cfg, &bound, &samples[1], &[0, 1]).unwrap();
        let (pred, attn) = predict(&cfg, &p, &samples[1], &[0, 1]).unwrap();
        assert_eq!(tape.value(out.pred).data(), &pred.as_array());
        assert_eq!(out.attn.detach(&tape), attn);
    }

    #[test]
    fn bad_capture_layers_rejected() {
        let (cfg, samples) = tiny();
        let p = init_params(&cfg, 1).unwrap();
        assert!(matches!(
            predict(&cfg, &p, &samples[0], &[1, 0]),
            Err(Error::Contract(_))
        ));
        assert!(matches!(predict(&cfg, &p, &samples[0], &[2]), Err(Error::Contract(_))));
    }

    #[test]
    fn non_finite_activation_names_layer() {
        let (cfg, samples) = tiny();
        let mut p = init_params(&cfg, 1).unwrap();
        p.layers[1].w1.data_mut()[0] = f64::INFINITY;
        let err = predict(&cfg, &p, &samples[0], &[]).unwrap_err();
        match err {
            Error::NonFinite(m) => assert!(m.contains("layer 1"), "{m}"),
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn head_mean_equals_manual_average() {
        let mut tape = Tape::no_grad();
        let q = tape.constant(Tensor::from_rows(&[vec![1.0, -2.0, 0.5, 3.0]]).unwrap());
        let k = tape.constant(Tensor::from_rows(&[vec![0.2, 0.1, -1.0, 2.0], vec![1.0, 1.0, 1.0, 1.0]]).unwrap());
        let s = head_mean_similarity(&mut tape, q, k, 2).unwrap();
        let inv = 1.0 / 2f64.sqrt();
        let h0 = [(0.2 - 0.2) * inv, (1.0 - 2.0) * inv];
        let h1 = [(-0.5 + 6.0) * inv, (0.5 + 3.0) * inv];
        for j in 0..2 {
            assert!((tape.value(s).data()[j] - (h0[j] + h1[j]) / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn doubling_head_width_keeps_argmax() {
        // duplicating every coordinate doubles d_k and the dot products
        let q = [0.3, -1.2, 0.8];
        let keys = [[1.0, 0.0, 0.5], [-0.3, 2.0, 0.1], [0.4, -0.9, 1.5], [0.0, 0.0, 0.0]];
        let run = |dup: bool| {
            let widen = |v: &[f64]| -> Vec<f64> {
                if dup {
                    v.iter().flat_map(|&x| [x, x]).collect()
                } else {
                    v.to_vec()
                }
            };
            let mut tape = Tape::no_grad();
            let qv = tape.constant(Tensor::from_rows(&[widen(&q)]).unwrap());
            let kv = tape.constant(Tensor::from_rows(&keys.iter().map(|k| widen(k)).collect::<Vec<_>>()).unwrap());
            let s = head_mean_similarity(&mut tape, qv, kv, 1).unwrap();
            let d = tape.value(s).data().to_vec();
            (0..d.len()).max_by(|&a, &b| d[a].total_cmp(&d[b])).unwrap()
        };
        assert_eq!(run(false), run(true));
    }

    #[test]
    fn in_mask_mass_gradient_matches_finite_differences() {
        let (cfg, samples) = tiny();
        let p = init_params(&cfg, 11).unwrap();
        let s = samples[2].clone();
        let mask = rasterize_mask(&s.gt, cfg.grid_rows, cfg.grid_cols).unwrap().to_tensor();
        let names = param_names(cfg.n_layers);
        let wq_index = names.iter().position(|n| n == "layers.0.attn.wq").unwrap();
        let base = p.values().into_iter().cloned().collect::<Vec<_>>();
        let params = vec![(names[wq_index].clone(), base[wq_index].clone())];
        let report = grad_check(
            |tape, v| {
                let mut vars: Vec<Var> = base.iter().map(|t| tape.constant(t.clone())).collect();
                vars[wq_index] = v[0];
                let bound = Params::from_values(cfg.n_layers, vars)?;
                let out = forward(tape, &cfg, &bound, &s, &[0])?;
                let m = tape.constant(mask.clone());
                let prod = tape.mul(out.attn.maps[0], m)?;
                Ok(tape.sum_all(prod))
            },
            &params,
            1e-6,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }
}
