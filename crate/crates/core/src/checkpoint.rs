//! JSON checkpoints of the full training state, tied to a config hash.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::trainer::TrainState;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config_hash: String,
    pub state: TrainState,
}

/// Hex SHA-256 of the JSON serialization of `config`.
pub fn config_hash<T: Serialize>(config: &T) -> String {
    let bytes = serde_json::to_vec(config).expect("config serializes");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    let json = serde_json::to_vec(checkpoint).map_err(|e| Error::json(path, e))?;
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, json).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint and rejects it unless it was written under
/// `expected_hash`.
pub fn load(path: &Path, expected_hash: &str) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let ck: Checkpoint = serde_json::from_slice(&bytes).map_err(|e| Error::json(path, e))?;
    if ck.config_hash != expected_hash {
        return Err(Error::CheckpointMismatch(format!(
            "checkpoint hash {} does not match config hash {expected_hash}",
            ck.config_hash
        )));
    }
    ck.state.student.check_same_layout(&ck.state.teacher)?;
    ck.state.student.check_same_layout(&ck.state.velocity)?;
    Ok(ck)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::DataConfig;
    use crate::trainer::{dims_for, ModelConfig, TrainConfig};

    fn state() -> TrainState {
        let data = DataConfig::default();
        let train = TrainConfig::default();
        TrainState::init(&dims_for(&ModelConfig::default(), &data, &train), &train)
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = TrainConfig::default();
        let b = TrainConfig { seed: 1, ..TrainConfig::default() };
        assert_eq!(config_hash(&a), config_hash(&a.clone()));
        assert_ne!(config_hash(&a), config_hash(&b));
        assert_eq!(config_hash(&a).len(), 64);
    }

    #[test]
    fn round_trip_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        let ck = Checkpoint { config_hash: "abc".into(), state: state() };
        save(&path, &ck).unwrap();
        assert_eq!(load(&path, "abc").unwrap(), ck);
        assert!(matches!(load(&path, "abd"), Err(Error::CheckpointMismatch(_))));
    }

    #[test]
    fn corrupt_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        std::fs::write(&path, b"{not json").unwrap();
        assert!(matches!(load(&path, "abc"), Err(Error::Json { .. })));
    }
}
