//! Versioned JSON checkpoints. Parameters are stored as base64-encoded
//! little-endian `f64` bytes so that a round trip is bit-exact.

use std::collections::BTreeMap;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::CheckpointError;
use crate::modelcore::{Model, ModelConfig};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "kinfair-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct StoredParam {
    shape: Vec<usize>,
    data: String,
}

#[derive(Serialize, Deserialize)]
struct Archive {
    format: String,
    version: u32,
    model_config: ModelConfig,
    params: BTreeMap<String, StoredParam>,
}

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let params = model
        .params
        .iter()
        .map(|(name, t)| {
            let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            (name.clone(), StoredParam { shape: t.shape().to_vec(), data: STANDARD.encode(bytes) })
        })
        .collect();
    let archive = Archive {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        model_config: model.config.clone(),
        params,
    };
    serde_json::to_vec(&archive).expect("checkpoint serialization cannot fail")
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model, CheckpointError> {
    let value: serde_json::Value =
        serde_json::from_slice(bytes).map_err(|e| CheckpointError::Format(e.to_string()))?;
    if value.get("format").and_then(|f| f.as_str()) != Some(CHECKPOINT_FORMAT) {
        return Err(CheckpointError::Format("missing checkpoint format tag".into()));
    }
    let version = value
        .get("version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| CheckpointError::Format("missing version".into()))?;
    if version != u64::from(CHECKPOINT_VERSION) {
        return Err(CheckpointError::Version { found: version as u32, expected: CHECKPOINT_VERSION });
    }
    let archive: Archive = serde_json::from_value(value).map_err(|e| CheckpointError::Format(e.to_string()))?;
    let mut model = Model::new(archive.model_config).map_err(|e| CheckpointError::Format(e.to_string()))?;
    if archive.params.len() != model.params.len() {
        return Err(CheckpointError::Format(format!(
            "{} parameters stored, model expects {}",
            archive.params.len(),
            model.params.len()
        )));
    }
    for (name, slot) in model.params.iter_mut() {
        let stored = archive
            .params
            .get(name)
            .ok_or_else(|| CheckpointError::Param { name: name.clone(), message: "missing".into() })?;
        let param_err = |message: String| CheckpointError::Param { name: name.clone(), message };
        if stored.shape != slot.shape() {
            return Err(param_err(format!("shape {:?}, expected {:?}", stored.shape, slot.shape())));
        }
        let bytes = STANDARD.decode(&stored.data).map_err(|e| param_err(e.to_string()))?;
        if bytes.len() != slot.len() * 8 {
            return Err(param_err(format!("{} bytes for {} values", bytes.len(), slot.len())));
        }
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        *slot = Tensor::new(stored.shape.clone(), data);
    }
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<(), CheckpointError> {
    std::fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model, CheckpointError> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modelcore::TrainMode;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut model = Model::new(ModelConfig { width: 8, init_seed: 3, ..ModelConfig::default() }).unwrap();
        model.params.get_mut("debias.b").unwrap().data_mut()[0] = f64::MIN_POSITIVE / 3.0;
        let back = from_bytes(&to_bytes(&model)).unwrap();
        assert_eq!(back.config, model.config);
        for (a, b) in model.params.values().zip(back.params.values()) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn truncated_and_wrong_version() {
        let model = Model::new(ModelConfig { width: 8, ..ModelConfig::default() }).unwrap();
        let bytes = to_bytes(&model);
        assert!(matches!(from_bytes(&bytes[..bytes.len() / 2]), Err(CheckpointError::Format(_))));
        let text = String::from_utf8(bytes).unwrap().replacen("\"version\":1", "\"version\":2", 1);
        assert!(matches!(
            from_bytes(text.as_bytes()),
            Err(CheckpointError::Version { found: 2, expected: 1 })
        ));
    }

    #[test]
    fn mode_does_not_change_parameters() {
        let base = ModelConfig { width: 8, ..ModelConfig::default() };
        let a = Model::new(base.clone()).unwrap();
        let mut cfg = base;
        cfg.mode = TrainMode::Adversarial;
        let b = Model::new(cfg).unwrap();
        assert_eq!(a.signature(), b.signature());
        assert_eq!(a.params, b.params);
    }
}
