//! Exponential-moving-average shadow of the model parameters.

use crate::error::{Error, Result};
use crate::model::{predict, CapturedAttention, ModelConfig, ModelParams};
use crate::synth::GroundingSample;

#[derive(Clone, Debug, PartialEq)]
pub struct MomentumState {
    pub shadow: ModelParams,
    pub m: f64,
    pub step_count: u64,
}

impl MomentumState {
    pub fn init(params: &ModelParams, m: f64) -> Result<Self> {
        check_m(m)?;
        if !params.is_finite() {
            return Err(Error::NonFinite("momentum init from non-finite parameters".into()));
        }
        Ok(Self {
            shadow: params.clone(),
            m,
            step_count: 0,
        })
    }

    /// `shadow <- m * shadow + (1 - m) * params`.
    pub fn update(&mut self, params: &ModelParams, m: f64) -> Result<()> {
        check_m(m)?;
        let live = params.values();
        let shadow = self.shadow.values();
        if live.len() != shadow.len() || live.iter().zip(&shadow).any(|(a, b)| a.shape() != b.shape()) {
            return Err(Error::Contract("momentum update: parameter shapes differ".into()));
        }
        let mut it = live.into_iter();
        self.shadow = self.shadow.map(|s| {
            let p = it.next().expect("lengths checked");
            let mut out = s.clone();
            for (o, &x) in out.data_mut().iter_mut().zip(p.data()) {
                *o = m * *o + (1.0 - m) * x;
            }
            out
        });
        self.m = m;
        self.step_count += 1;
        Ok(())
    }

    /// Captured attention of the shadow model. Runs on its own
    /// non-recording tape, so nothing it returns can carry a gradient.
    pub fn forward(&self, cfg: &ModelConfig, sample: &GroundingSample, capture: &[usize]) -> Result<CapturedAttention> {
        Ok(predict(cfg, &self.shadow, sample, capture)?.1)
    }
}

fn check_m(m: f64) -> Result<()> {
    if m > 0.0 && m < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("momentum {m} outside (0, 1)")))
    }
}

/// Euclidean distance between two parameter sets of the same layout.
pub fn param_distance(a: &ModelParams, b: &ModelParams) -> f64 {
    a.values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| {
            x.data()
                .iter()
                .zip(y.data())
                .map(|(p, q)| (p - q) * (p - q))
                .sum::<f64>()
        })
        .sum::<f64>()
        .sqrt()
}
