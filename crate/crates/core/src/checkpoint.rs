//! Binary checkpoint: magic, length-prefixed JSON header, named f64 arrays.
//!
//! ```text
//! FITNET01
//! u64 header_len | header (JSON)
//! u32 n_arrays
//! repeated: u32 name_len | name | u32 rank | u64 dims[rank] | f64 data[prod(dims)]
//! ```
//! All integers and floats are little-endian.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FitError, Result};
use crate::features::Vocabularies;
use crate::model::{Method, Model, ModelConfig};
use crate::sampling::SamplingPolicy;
use crate::training::TrainConfig;

pub const MAGIC: &[u8; 8] = b"FITNET01";
const MAGIC_STEM: &[u8; 6] = b"FITNET";

#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub method: Method,
    pub model: Model,
    pub loss_history: Vec<f64>,
}

impl TrainedModel {
    pub fn final_loss(&self) -> Option<f64> {
        self.loss_history.last().copied()
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub vocabularies: Vocabularies,
    pub train: TrainConfig,
    pub sampling: SamplingPolicy,
    pub models: Vec<TrainedModel>,
}

#[derive(Serialize, Deserialize)]
struct ModelEntry {
    method: Method,
    config: ModelConfig,
    epochs: usize,
    final_loss: Option<f64>,
    loss_history: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    models: Vec<ModelEntry>,
    train: TrainConfig,
    sampling: SamplingPolicy,
    vocabularies: Vocabularies,
}

impl Checkpoint {
    pub fn model(&self, method: Method) -> Result<&TrainedModel> {
        self.models
            .iter()
            .find(|m| m.method == method)
            .ok_or_else(|| FitError::config(format!("checkpoint has no trained {method} model")))
    }

    pub fn methods(&self) -> Vec<Method> {
        self.models.iter().map(|m| m.method).collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            models: self
                .models
                .iter()
                .map(|m| ModelEntry {
                    method: m.method,
                    config: m.model.config().clone(),
                    epochs: m.loss_history.len(),
                    final_loss: m.final_loss(),
                    loss_history: m.loss_history.clone(),
                })
                .collect(),
            train: self.train.clone(),
            sampling: self.sampling.clone(),
            vocabularies: self.vocabularies.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| FitError::Data(e.to_string()))?;
        let mut out = Vec::with_capacity(json.len() + 1024);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let total: usize = self.models.iter().map(|m| m.model.params().len()).sum();
        out.extend_from_slice(&(total as u32).to_le_bytes());
        for m in &self.models {
            for (_, name, t) in m.model.params().iter() {
                let full = format!("{}/{}", m.method, name);
                out.extend_from_slice(&(full.len() as u32).to_le_bytes());
                out.extend_from_slice(full.as_bytes());
                out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
                for &d in t.shape() {
                    out.extend_from_slice(&(d as u64).to_le_bytes());
                }
                for x in t.data() {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8, "magic")?;
        if magic != MAGIC {
            if magic.starts_with(MAGIC_STEM) {
                return Err(FitError::Version {
                    found: String::from_utf8_lossy(magic).into_owned(),
                    expected: String::from_utf8_lossy(MAGIC).into_owned(),
                });
            }
            return Err(FitError::Format {
                offset: 0,
                message: "not a checkpoint file".into(),
            });
        }
        let header_len = r.u64("header length")? as usize;
        let header_at = r.pos;
        let raw = r.take(header_len, "header")?;
        let mut header: Header = serde_json::from_slice(raw).map_err(|e| FitError::Format {
            offset: header_at,
            message: format!("bad header: {e}"),
        })?;
        header.vocabularies.reindex();

        let count = r.u32("array count")? as usize;
        let mut arrays = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_at = r.pos;
            let name_len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|_| FitError::Format {
                    offset: name_at,
                    message: "array name is not UTF-8".into(),
                })?
                .to_string();
            let rank = r.u32("rank")? as usize;
            if rank > 8 {
                return Err(r.error(format!("implausible rank {rank} for {name}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64("dimension")? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|n| n.checked_mul(8).is_some())
                .ok_or_else(|| r.error(format!("array {name} is too large")))?;
            let raw = r.take(n * 8, "array data")?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            arrays.push((name_at, name, shape, data));
        }
        if r.pos != bytes.len() {
            return Err(r.error("trailing bytes after last array".into()));
        }

        let mut arrays = arrays.into_iter();
        let mut models = Vec::with_capacity(header.models.len());
        for entry in header.models {
            let mut model = Model::new(entry.config, &header.vocabularies)
                .map_err(|e| FitError::Format {
                    offset: header_at,
                    message: format!("model {}: {e}", entry.method),
                })?;
            let prefix = format!("{}/", entry.method);
            let mut own = Vec::with_capacity(model.params().len());
            for _ in 0..model.params().len() {
                let (at, name, shape, data) = arrays.next().ok_or(FitError::Format {
                    offset: bytes.len(),
                    message: format!("missing arrays for model {}", entry.method),
                })?;
                let local = name.strip_prefix(&prefix).ok_or_else(|| FitError::Format {
                    offset: at,
                    message: format!("array {name} does not belong to {}", entry.method),
                })?;
                own.push((local.to_string(), shape, data));
            }
            let at = r.pos;
            model.load_arrays(own).map_err(|e| FitError::Format {
                offset: at,
                message: e.to_string(),
            })?;
            models.push(TrainedModel {
                method: entry.method,
                model,
                loss_history: entry.loss_history,
            });
        }
        if let Some((at, name, ..)) = arrays.next() {
            return Err(FitError::Format {
                offset: at,
                message: format!("array {name} belongs to no model"),
            });
        }
        Ok(Self {
            vocabularies: header.vocabularies,
            train: header.train,
            sampling: header.sampling,
            models,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn error(&self, message: String) -> FitError {
        FitError::Format {
            offset: self.pos,
            message,
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.error(format!(
                "truncated {what}: need {n} bytes, {} left",
                self.bytes.len() - self.pos
            ))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}
