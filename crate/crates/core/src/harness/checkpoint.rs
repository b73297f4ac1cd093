//! Versioned little-endian checkpoint container.
//!
//! ```text
//! magic   8 bytes  "ATBCKPT\0"
//! version u32
//! n_kv    u32, then n_kv x (key: u32 len + utf8, value: u32 len + utf8)
//! n_t     u32, then n_t x (name: u32 len + utf8, rank u32, dims u64 x rank, f64 x numel)
//! ```
//!
//! Keys are written in sorted order. Tensor names are prefixed `model.`,
//! `momentum.`, `adam.m.` and `adam.v.`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{param_names, ModelConfig, ModelParams, Params};
use crate::momentum::MomentumState;
use crate::numerics::Tensor;

use super::config::RunConfig;

pub const MAGIC: &[u8; 8] = b"ATBCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub t: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub run_config: Option<RunConfig>,
    /// Optimizer steps taken.
    pub step: u64,
    pub params: ModelParams,
    pub momentum: Option<MomentumState>,
    pub adam: Option<AdamState>,
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    put_bytes(out, name.as_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("invalid utf-8 in checkpoint".into()))
    }
    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let name = self.string()?;
        let rank = self.u32()? as usize;
        let shape = (0..rank)
            .map(|_| Ok(self.u64()? as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Format("tensor too large".into()))?,
        )?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok((name, Tensor::new(shape, data)?))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut kv = BTreeMap::new();
        kv.insert("model_config".to_string(), serde_json::to_string(&self.model_config)?);
        kv.insert("step".to_string(), self.step.to_string());
        if let Some(rc) = &self.run_config {
            kv.insert("run_config".to_string(), serde_json::to_string(rc)?);
        }
        if let Some(m) = &self.momentum {
            kv.insert("momentum.m".to_string(), serde_json::to_string(&m.m)?);
            kv.insert("momentum.step_count".to_string(), m.step_count.to_string());
        }
        if let Some(a) = &self.adam {
            kv.insert("adam.t".to_string(), a.t.to_string());
        }

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(kv.len() as u32).to_le_bytes());
        for (k, v) in &kv {
            put_bytes(&mut out, k.as_bytes());
            put_bytes(&mut out, v.as_bytes());
        }
        let mut sets: Vec<(&str, &ModelParams)> = vec![("model.", &self.params)];
        if let Some(m) = &self.momentum {
            sets.push(("momentum.", &m.shadow));
        }
        if let Some(a) = &self.adam {
            sets.push(("adam.m.", &a.m));
            sets.push(("adam.v.", &a.v));
        }
        let n: usize = sets.iter().map(|(_, p)| p.values().len()).sum();
        out.extend_from_slice(&(n as u32).to_le_bytes());
        for (prefix, p) in sets {
            for (name, t) in p.named() {
                put_tensor(&mut out, &format!("{prefix}{name}"), t);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let mut kv = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            kv.insert(k, r.string()?);
        }
        let mut tensors = BTreeMap::new();
        for _ in 0..r.u32()? {
            let (name, t) = r.tensor()?;
            tensors.insert(name, t);
        }
        if r.pos != buf.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        let get = |k: &str| {
            kv.get(k)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks key {k}")))
        };
        let parse_u64 = |k: &str| -> Result<u64> {
            get(k)?
                .parse()
                .map_err(|_| Error::Format(format!("checkpoint key {k} is not an integer")))
        };
        let model_config: ModelConfig = serde_json::from_str(get("model_config")?)?;
        let run_config = kv.get("run_config").map(|s| serde_json::from_str(s)).transpose()?;
        let names = param_names(model_config.n_layers);
        let mut take_set = |prefix: &str| -> Result<Option<ModelParams>> {
            if !tensors.contains_key(&format!("{prefix}{}", names[0])) {
                return Ok(None);
            }
            let values = names
                .iter()
                .map(|n| {
                    tensors
                        .remove(&format!("{prefix}{n}"))
                        .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {prefix}{n}")))
                })
                .collect::<Result<Vec<_>>>()?;
            let p = Params::from_values(model_config.n_layers, values)?;
            p.check_shapes(&model_config)?;
            Ok(Some(p))
        };
        let params = take_set("model.")?.ok_or_else(|| Error::Format("checkpoint has no model tensors".into()))?;
        let shadow = take_set("momentum.")?;
        let adam_m = take_set("adam.m.")?;
        let adam_v = take_set("adam.v.")?;
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Format(format!("unexpected tensor {extra} in checkpoint")));
        }
        let momentum = match shadow {
            Some(shadow) => Some(MomentumState {
                shadow,
                m: serde_json::from_str(get("momentum.m")?)?,
                step_count: parse_u64("momentum.step_count")?,
            }),
            None => None,
        };
        let adam = match (adam_m, adam_v) {
            (Some(m), Some(v)) => Some(AdamState {
                m,
                v,
                t: parse_u64("adam.t")?,
            }),
            (None, None) => None,
            _ => return Err(Error::Format("checkpoint has only one Adam moment".into())),
        };
        Ok(Self {
            model_config,
            run_config,
            step: parse_u64("step")?,
            params,
            momentum,
            adam,
        })
    }

    /// Writes via a temporary file and rename, so an interrupted save
    /// never replaces a good checkpoint with a partial one.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}
