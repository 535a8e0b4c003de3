//! Checkpoint files.
//!
//! A checkpoint is one JSON document:
//!
//! ```text
//! {
//!   "format_version": 1,
//!   "payload": {
//!     "trainer": {                      full TrainerState
//!       "config": { ... },              training config echo
//!       "model": {
//!         "network": { ... },           network config echo
//!         "forward":  {"params": [{"name", "shape", "data"}, ...]},
//!         "backward": {"params": [...]},
//!         "projection": {"params": [...]}
//!       },
//!       "teacher", "bank_f", "bank_b",
//!       "opt_forward", "opt_backward", "opt_projection",
//!       "step", "rng", "order", "cursor"
//!     }
//!   }
//! }
//! ```
//!
//! or, with `"payload": {"oracle": {"classes", "predictions": {frame_id: map}}}`,
//! a fixed set of per-frame predictions that exercises the evaluation path
//! without a network. Floats round-trip exactly.

use std::collections::BTreeMap;
use std::path::Path;

use evseg_core::evaluator::{miou, ConfusionMatrix, MetricsReport};
use evseg_core::synth::{DenseLabelMap, SyntheticSample};
use evseg_core::trainer::TrainerState;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::write_atomic;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleCheckpoint {
    pub classes: usize,
    pub predictions: BTreeMap<String, DenseLabelMap>,
}

impl OracleCheckpoint {
    /// Predicts each sample's own ground truth, with ignored pixels mapped
    /// to class 0.
    pub fn perfect(samples: &[SyntheticSample], classes: usize) -> Self {
        let predictions = samples
            .iter()
            .map(|s| {
                let mut map = s.gt.clone();
                for v in &mut map.data {
                    if usize::from(*v) >= classes {
                        *v = 0;
                    }
                }
                (s.id.clone(), map)
            })
            .collect();
        Self { classes, predictions }
    }

    pub fn evaluate(&self, samples: &[SyntheticSample]) -> Result<MetricsReport> {
        if samples.is_empty() {
            return Err(evseg_core::Error::EmptyDataset.into());
        }
        let mut cm = ConfusionMatrix::new(self.classes);
        for s in samples {
            let pred = self
                .predictions
                .get(&s.id)
                .ok_or_else(|| Error::format(&s.id, "no oracle prediction for this frame"))?;
            cm.accumulate(&pred.data, &s.gt)?;
        }
        Ok(miou(&cm)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Payload {
    Trainer(Box<TrainerState>),
    Oracle(OracleCheckpoint),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub payload: Payload,
}

impl Checkpoint {
    pub fn trainer(state: &TrainerState) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            payload: Payload::Trainer(Box::new(state.clone())),
        }
    }

    pub fn oracle(oracle: OracleCheckpoint) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            payload: Payload::Oracle(oracle),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("checkpoint serialization is infallible")
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Version {
            format_version: Option<u32>,
        }
        let version: Version = serde_json::from_slice(bytes).map_err(|e| Error::format(path, e))?;
        match version.format_version {
            Some(FORMAT_VERSION) => {}
            Some(v) => {
                return Err(Error::format(
                    path,
                    format!("checkpoint format version {v} is not supported (expected {FORMAT_VERSION})"),
                ))
            }
            None => return Err(Error::format(path, "missing `format_version`")),
        }
        let ckpt: Checkpoint = serde_json::from_slice(bytes).map_err(|e| Error::format(path, e))?;
        if let Payload::Trainer(state) = &ckpt.payload {
            state.check_layout().map_err(|e| Error::format(path, e))?;
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn into_trainer(self, path: &Path) -> Result<TrainerState> {
        match self.payload {
            Payload::Trainer(s) => Ok(*s),
            Payload::Oracle(_) => Err(Error::format(path, "oracle checkpoints cannot resume training")),
        }
    }
}
