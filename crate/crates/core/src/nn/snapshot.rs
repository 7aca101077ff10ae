//! Model snapshots: one JSON header line followed by the parameters as
//! little-endian `f64`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{Architecture, Model};
use super::train::TrainConfig;
use crate::error::{Error, Result};

const FORMAT: &str = "biaslens-snapshot";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    architecture: Architecture,
    seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    train_config: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    epoch: Option<usize>,
    n_params: usize,
}

/// Immutable copy of a model's parameters plus what is needed to rebuild it.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSnapshot {
    pub architecture: Architecture,
    /// Seed the parameters were initialized from.
    pub seed: u64,
    pub train_config: Option<TrainConfig>,
    pub epoch: Option<usize>,
    pub params: Vec<f64>,
}

impl ModelSnapshot {
    pub fn capture(model: &Model, seed: u64, train_config: Option<TrainConfig>, epoch: Option<usize>) -> Self {
        ModelSnapshot {
            architecture: model.architecture().clone(),
            seed,
            train_config,
            epoch,
            params: model.params().to_vec(),
        }
    }

    pub fn to_model(&self) -> Result<Model> {
        Model::from_params(self.architecture.clone(), self.params.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            format: FORMAT.into(),
            version: VERSION,
            architecture: self.architecture.clone(),
            seed: self.seed,
            train_config: self.train_config.clone(),
            epoch: self.epoch,
            n_params: self.params.len(),
        };
        let mut out = serde_json::to_vec(&header)?;
        out.push(b'\n');
        out.reserve(self.params.len() * 8);
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::InvalidArgument("snapshot has no header line".into()))?;
        let header: Header = serde_json::from_slice(&bytes[..nl])?;
        if header.format != FORMAT || header.version != VERSION {
            return Err(Error::InvalidArgument(format!(
                "unsupported snapshot format {} v{}",
                header.format, header.version
            )));
        }
        let blob = &bytes[nl + 1..];
        if blob.len() != header.n_params * 8 {
            return Err(Error::ShapeMismatch {
                expected: vec![header.n_params * 8],
                actual: vec![blob.len()],
            });
        }
        let params = blob
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let snap = ModelSnapshot {
            architecture: header.architecture,
            seed: header.seed,
            train_config: header.train_config,
            epoch: header.epoch,
            params,
        };
        snap.to_model()?;
        Ok(snap)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::model::ModelKind;

    #[test]
    fn round_trip_is_bit_exact() {
        for kind in [ModelKind::TinyCnn, ModelKind::TinyVit] {
            let model = Model::new(Architecture::default_for(kind, 3), 11).unwrap();
            let snap = ModelSnapshot::capture(&model, 11, Some(TrainConfig::default_for(kind, 11)), Some(4));
            let back = ModelSnapshot::from_bytes(&snap.to_bytes().unwrap()).unwrap();
            assert_eq!(back, snap);
            assert!(back.params.iter().zip(model.params()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let model = Model::new(Architecture::default_for(ModelKind::TinyCnn, 3), 1).unwrap();
        let mut bytes = ModelSnapshot::capture(&model, 1, None, None).to_bytes().unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(ModelSnapshot::from_bytes(&bytes).is_err());
    }
}
