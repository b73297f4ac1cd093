//! Run configuration, read from TOML with `section.key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attbalance::AttBalanceConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objective::TrainMode;
use crate::synth::DatasetConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Plain gradient descent with a fixed learning rate.
    #[default]
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Global-norm clip; `0` disables clipping.
    pub grad_clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Sgd,
            lr: 0.05,
            epochs: 20,
            batch_size: 16,
            grad_clip: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub mode: TrainMode,
    pub out_dir: PathBuf,
    /// Existing dataset file; generated from `[dataset]` when absent.
    pub dataset_path: Option<PathBuf>,
    /// Validation pass every this many epochs (`0`: only at the end).
    pub eval_every: usize,
    /// Checkpoint every this many epochs (`0`: only at the end).
    pub checkpoint_every: usize,
    /// Adds `wall_ms` to metrics events; off keeps the stream
    /// bitwise-reproducible.
    pub log_wall_clock: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: 1,
            mode: TrainMode::Attbalance,
            out_dir: PathBuf::from("runs/default"),
            dataset_path: None,
            eval_every: 1,
            checkpoint_every: 1,
            log_wall_clock: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub attbalance: AttBalanceConfig,
    pub dataset: DatasetConfig,
    pub optim: OptimConfig,
    pub run: RunSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Loads `path` (or defaults) and applies `section.key=value`
    /// overrides, where `value` is a TOML literal (bare words are taken as
    /// strings).
    pub fn load_with_overrides(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
            None => Self::default().to_toml()?,
        };
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Self = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.dataset.validate()?;
        if self.run.mode == TrainMode::Attbalance {
            self.attbalance.validate(self.model.n_layers)?;
        }
        let m = &self.model;
        let d = &self.dataset;
        let checks = [
            ("grid_rows", m.grid_rows, d.grid_rows),
            ("grid_cols", m.grid_cols, d.grid_cols),
            ("max_text_len", m.max_text_len, d.max_text_len),
            ("vocab_size", m.vocab_size, d.vocab().size()),
            ("visual_dim", m.visual_dim, d.feature_dim()),
        ];
        for (name, model, data) in checks {
            if model != data {
                return Err(Error::Config(format!(
                    "model.{name} = {model} but the dataset implies {data}"
                )));
            }
        }
        let o = &self.optim;
        if o.batch_size == 0 || o.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        if !(o.lr > 0.0 && o.lr.is_finite()) || o.grad_clip < 0.0 {
            return Err(Error::Config("lr must be positive and grad_clip non-negative".into()));
        }
        let betas_ok = (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.adam_eps > 0.0;
        if o.optimizer == OptimizerKind::Adam && !betas_ok {
            return Err(Error::Config(
                "Adam betas must lie in [0, 1) and adam_eps be positive".into(),
            ));
        }
        Ok(())
    }
}

fn apply_override(table: &mut toml::Table, item: &str) -> Result<()> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {item:?} is not key=value")))?;
    let value: toml::Value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, path) = parts.split_last().expect("split yields one part");
    let mut cur = table;
    for p in path {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{p} in {key} is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
