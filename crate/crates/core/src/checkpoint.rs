//! Single-file model checkpoints: named tensors plus the model config as JSON
//! in the file header.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};

use crate::collab::CosamModel;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::ParamStore;

const CONFIG_KEY: &str = "config";
const FORMAT_KEY: &str = "format";
const FORMAT: &str = "cosam-checkpoint-1";

pub struct Checkpoint {
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, Tensor>,
}

pub fn save_model(model: &CosamModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut meta = HashMap::new();
    meta.insert(
        CONFIG_KEY.to_string(),
        serde_json::to_string(&model.config)?,
    );
    meta.insert(FORMAT_KEY.to_string(), FORMAT.to_string());
    let tensors = model.params.tensors();
    safetensors::serialize_to_file(tensors.iter(), Some(meta), path)
        .map_err(|e| Error::Checkpoint(format!("writing {}: {e}", path.display())))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, header) = safetensors::SafeTensors::read_metadata(&bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let meta = header.metadata().clone().unwrap_or_default();
    let config_text = meta.get(CONFIG_KEY).ok_or_else(|| {
        Error::Checkpoint(format!(
            "{}: missing `{CONFIG_KEY}` header field",
            path.display()
        ))
    })?;
    let config: ModelConfig = serde_json::from_str(config_text)?;
    let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?
        .into_iter()
        .collect();
    Ok(Checkpoint { config, tensors })
}

/// Builds a model whose tensors under each prefix in `required` all come
/// from `tensors`; anything else is freshly initialized.
fn build(
    config: ModelConfig,
    tensors: BTreeMap<String, Tensor>,
    required: &[&str],
) -> Result<CosamModel> {
    let provided: Vec<String> = tensors.keys().cloned().collect();
    let params = ParamStore::with_loaded(config.seed, tensors);
    let model = CosamModel::with_params(config, params)?;
    let missing: Vec<String> = model
        .params
        .tensors()
        .into_keys()
        .filter(|k| required.iter().any(|p| k.starts_with(p)) && provided.binary_search(k).is_err())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Checkpoint(format!(
            "missing tensors: {}",
            missing.join(", ")
        )));
    }
    let unused = model.params.unused_loaded();
    if required.len() == 3 && !unused.is_empty() {
        return Err(Error::Checkpoint(format!(
            "unexpected tensors: {}",
            unused.join(", ")
        )));
    }
    Ok(model)
}

/// Loads a complete model.
pub fn load_model(path: impl AsRef<Path>) -> Result<CosamModel> {
    let ckpt = read_checkpoint(path)?;
    build(ckpt.config, ckpt.tensors, &["det.", "seg.", "joint."])
}

/// Assembles a model from a detector checkpoint and a segmenter checkpoint;
/// the joint head starts fresh. Both checkpoints must match `config`.
pub fn load_pretrained(
    config: &ModelConfig,
    det_ckpt: impl AsRef<Path>,
    seg_ckpt: impl AsRef<Path>,
) -> Result<CosamModel> {
    let det = read_checkpoint(det_ckpt)?;
    let seg = read_checkpoint(seg_ckpt)?;
    if det.config.detector != config.detector {
        return Err(Error::Checkpoint(format!(
            "detector checkpoint config {:?} does not match {:?}",
            det.config.detector, config.detector
        )));
    }
    if seg.config.segmenter != config.segmenter {
        return Err(Error::Checkpoint(format!(
            "segmenter checkpoint config {:?} does not match {:?}",
            seg.config.segmenter, config.segmenter
        )));
    }
    let tensors = det
        .tensors
        .into_iter()
        .filter(|(k, _)| k.starts_with("det."))
        .chain(
            seg.tensors
                .into_iter()
                .filter(|(k, _)| k.starts_with("seg.")),
        )
        .collect();
    build(config.clone(), tensors, &["det.", "seg."])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{DetectorConfig, SegmenterConfig};

    fn tiny() -> ModelConfig {
        ModelConfig {
            detector: DetectorConfig {
                window_size: 3,
                feat_dim: 8,
                n_queries: 2,
                top_m: 4,
                backbone_channels: [2, 4],
                heads: 2,
                ffn_dim: 8,
                encoder_layers: 1,
                decoder_layers: 1,
                ..Default::default()
            },
            segmenter: SegmenterConfig {
                dim: 8,
                channels: [2, 2, 4],
                heads: 2,
                ffn_dim: 8,
                ..Default::default()
            },
            seed: 5,
            ..Default::default()
        }
    }

    #[test]
    fn round_trip_restores_every_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        let model = CosamModel::new(tiny()).unwrap();
        save_model(&model, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back.config, model.config);
        let (a, b) = (model.params.tensors(), back.params.tensors());
        assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
        for (k, t) in &a {
            let x = t.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            let y = b[k].flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert_eq!(x, y, "{k}");
        }
    }

    #[test]
    fn missing_tensor_is_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        let model = CosamModel::new(tiny()).unwrap();
        let mut tensors = model.params.tensors();
        tensors.remove("det.queries");
        let mut meta = HashMap::new();
        meta.insert(
            CONFIG_KEY.to_string(),
            serde_json::to_string(&model.config).unwrap(),
        );
        safetensors::serialize_to_file(tensors.iter(), Some(meta), &path).unwrap();
        let err = load_model(&path).err().unwrap().to_string();
        assert!(err.contains("det.queries"), "{err}");
    }

    #[test]
    fn mismatched_pretrained_config_is_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        save_model(&CosamModel::new(tiny()).unwrap(), &path).unwrap();
        let mut other = tiny();
        other.detector.feat_dim = 16;
        assert!(load_pretrained(&other, &path, &path).is_err());
        assert!(load_pretrained(&tiny(), &path, &path).is_ok());
    }
}
