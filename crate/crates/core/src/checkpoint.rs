//! Versioned JSON container for trained encoders and the CCA baseline.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cca::CcaModel;
use crate::lang::LangNormalizer;
use crate::visual::{EncoderParams, EncoderSpec};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelState {
    Model1 {
        spec: EncoderSpec,
        params: EncoderParams,
    },
    Model2 {
        spec: EncoderSpec,
        params: EncoderParams,
    },
    Cca {
        model: CcaModel,
    },
}

impl ModelState {
    pub fn label(&self) -> &'static str {
        match self {
            ModelState::Model1 { .. } => "model1",
            ModelState::Model2 { .. } => "model2",
            ModelState::Cca { .. } => "cca",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub seed: u64,
    /// Language slot means the model was trained against.
    pub normalizer: LangNormalizer,
    pub model: ModelState,
}

impl Checkpoint {
    pub fn new(seed: u64, normalizer: LangNormalizer, model: ModelState) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            seed,
            normalizer,
            model,
        }
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<(), CheckpointError> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, self)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self, CheckpointError> {
        let ckpt: Checkpoint = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(ckpt.version));
        }
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::visual::init_params;

    #[test]
    fn round_trip_is_exact() {
        let spec = EncoderSpec::model2(5, vec![4], vec![3], vec![2], 3);
        let params = init_params(&spec, 9).unwrap();
        let ckpt = Checkpoint::new(
            9,
            LangNormalizer::zeros(3),
            ModelState::Model2 { spec, params },
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        ckpt.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ckpt);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"kind\":\"model2\""));
    }

    #[test]
    fn rejects_future_version() {
        let spec = EncoderSpec::model1(2, vec![], 2);
        let params = init_params(&spec, 1).unwrap();
        let mut ckpt = Checkpoint::new(
            1,
            LangNormalizer::zeros(2),
            ModelState::Model1 { spec, params },
        );
        ckpt.version = 99;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        ckpt.save(&path).unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(CheckpointError::Version(99))
        ));
    }
}
