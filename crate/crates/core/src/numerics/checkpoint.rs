//! JSON checkpoint of a [`ParamStore`].
//!
//! ```json
//! { "header": { "format_version": 1, "C": 20, "D": 32, "R": 16, "seed": 7 },
//!   "step": 1260,
//!   "tensors": [ { "name": "backbone.w1", "shape": [32, 16], "data": [...] } ] }
//! ```
//!
//! `R` is the raw per-region feature width. Data is row-major.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{Matrix, ParamStore};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    #[serde(rename = "C")]
    pub c: usize,
    #[serde(rename = "D")]
    pub d: usize,
    #[serde(rename = "R")]
    pub r: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedTensor {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub step: u64,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn capture(header: CheckpointHeader, store: &ParamStore) -> Self {
        let tensors = store
            .ids()
            .map(|id| {
                let v = store.value(id);
                NamedTensor {
                    name: store.name(id).to_string(),
                    shape: [v.rows(), v.cols()],
                    data: v.as_slice().to_vec(),
                }
            })
            .collect();
        Self {
            header,
            step: store.step(),
            tensors,
        }
    }

    /// Copies tensors into `store`, which must already hold every named
    /// tensor with the same shape and the header's dimensions.
    pub fn restore_into(&self, expected: &CheckpointHeader, store: &mut ParamStore) -> Result<()> {
        let h = &self.header;
        if h.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format_version {}",
                h.format_version
            )));
        }
        if (h.c, h.d, h.r) != (expected.c, expected.d, expected.r) {
            return Err(Error::Checkpoint(format!(
                "dimension mismatch: checkpoint has C={} D={} R={}, model expects C={} D={} R={}",
                h.c, h.d, h.r, expected.c, expected.d, expected.r
            )));
        }
        if self.tensors.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                store.len(),
                self.tensors.len()
            )));
        }
        for t in &self.tensors {
            let id = store
                .find(&t.name)
                .ok_or_else(|| Error::UnknownParam(t.name.clone()))?;
            let want = store.value(id).shape();
            if want != (t.shape[0], t.shape[1]) {
                return Err(Error::Shape {
                    context: format!("checkpoint tensor `{}`", t.name),
                    expected: want,
                    actual: (t.shape[0], t.shape[1]),
                });
            }
            let m = Matrix::from_vec(t.shape[0], t.shape[1], t.data.clone())?;
            if !m.is_finite() {
                return Err(Error::NonFinite {
                    param: t.name.clone(),
                    what: "checkpoint value",
                });
            }
            *store.value_mut(id) = m;
        }
        store.set_step(self.step);
        store.zero_grads();
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}
