//! Checkpoint directories: `header.json` plus one little-endian f32 file per
//! named tensor under `tensors/`.
//!
//! Writes go to a sibling temporary directory that is renamed into place.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::autoencoder::Autoencoder;
use super::bundle::{Component, FreezeFlags, ModelBundle, ModelConfig};
use super::denoiser::Denoiser;
use super::params::ParamStore;
use super::text::TextEncoder;
use crate::error::{Error, IoContext, Result};

pub const CHECKPOINT_FORMAT: &str = "colorize-checkpoint/1";
pub const HEADER_FILE: &str = "header.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub component: Component,
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub config: ModelConfig,
    pub freeze: FreezeFlags,
    pub latent_scale: f64,
    pub seed: u64,
    pub step: usize,
    pub tensors: Vec<TensorEntry>,
}

impl CheckpointHeader {
    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join(HEADER_FILE);
        let text = fs::read_to_string(&path).at(&path)?;
        let header: Self = serde_json::from_str(&text)?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unsupported format {:?}", header.format)));
        }
        Ok(header)
    }
}

fn tensor_file(component: Component, name: &str) -> String {
    format!("tensors/{component}.{name}.bin")
}

fn tmp_sibling(dir: &Path) -> PathBuf {
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    dir.with_file_name(format!(".{name}.tmp-{}", std::process::id()))
}

/// Writes `bundle` to `dir`, replacing any existing checkpoint there.
pub fn save_checkpoint(bundle: &ModelBundle, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let tmp = tmp_sibling(dir);
    if tmp.exists() {
        fs::remove_dir_all(&tmp).at(&tmp)?;
    }
    fs::create_dir_all(tmp.join("tensors")).at(&tmp)?;
    let mut entries = Vec::new();
    for c in Component::ALL {
        for (name, t) in bundle.store(c).tensors() {
            let file = tensor_file(c, &name);
            let values = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
            let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
            let path = tmp.join(&file);
            fs::write(&path, bytes).at(&path)?;
            entries.push(TensorEntry {
                component: c,
                name,
                shape: t.dims().to_vec(),
                file,
            });
        }
    }
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.to_string(),
        config: bundle.config.clone(),
        freeze: bundle.freeze,
        latent_scale: bundle.autoencoder.latent_scale(),
        seed: bundle.seed,
        step: bundle.step,
        tensors: entries,
    };
    let path = tmp.join(HEADER_FILE);
    fs::write(&path, serde_json::to_string_pretty(&header)?).at(&path)?;
    if dir.exists() {
        fs::remove_dir_all(dir).at(dir)?;
    }
    if let Some(parent) = dir.parent() {
        fs::create_dir_all(parent).at(parent)?;
    }
    fs::rename(&tmp, dir).at(dir)?;
    Ok(())
}

/// Loads a checkpoint, verifying every tensor's size and finiteness.
pub fn load_checkpoint(dir: impl AsRef<Path>, device: &Device) -> Result<ModelBundle> {
    let dir = dir.as_ref();
    let header = CheckpointHeader::read(dir)?;
    header.config.validate()?;
    let mut groups: BTreeMap<Component, BTreeMap<String, Tensor>> = BTreeMap::new();
    for entry in &header.tensors {
        let path = dir.join(&entry.file);
        let bytes = fs::read(&path).at(&path)?;
        let expected: usize = entry.shape.iter().product();
        if bytes.len() != expected * 4 {
            return Err(Error::Checkpoint(format!(
                "{}: {} bytes, expected {} for shape {:?}",
                entry.file,
                bytes.len(),
                expected * 4,
                entry.shape
            )));
        }
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Checkpoint(format!("{}: non-finite values", entry.file)));
        }
        let t = Tensor::from_vec(values, entry.shape.as_slice(), device)?;
        groups.entry(entry.component).or_default().insert(entry.name.clone(), t);
    }
    let mut take = |c: Component| -> Result<ParamStore> {
        ParamStore::from_tensors(groups.remove(&c).unwrap_or_default(), !header.freeze.get(c))
    };
    let cfg = &header.config;
    let autoencoder = Autoencoder::new(
        &cfg.autoencoder,
        take(Component::Autoencoder)?,
        header.latent_scale,
        DType::F32,
        device,
    )
    .map_err(|e| Error::Checkpoint(format!("autoencoder: {e}")))?;
    let text_encoder = TextEncoder::new(&cfg.text, take(Component::TextEncoder)?, DType::F32, device)
        .map_err(|e| Error::Checkpoint(format!("text encoder: {e}")))?;
    let denoiser = Denoiser::new(&cfg.denoiser, take(Component::Denoiser)?, DType::F32, device)
        .map_err(|e| Error::Checkpoint(format!("denoiser: {e}")))?;
    Ok(ModelBundle {
        config: header.config.clone(),
        freeze: header.freeze,
        autoencoder,
        text_encoder,
        denoiser,
        seed: header.seed,
        step: header.step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn bundle() -> ModelBundle {
        let config = ModelConfig {
            image_size: 16,
            ..Default::default()
        };
        let ae = Autoencoder::new(&config.autoencoder, ParamStore::seeded(2, false), 1.7, DType::F32, &Device::Cpu)
            .unwrap();
        ModelBundle::new(config, ae, 2).unwrap()
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let b = bundle();
        let path = dir.path().join("ckpt");
        save_checkpoint(&b, &path).unwrap();
        let loaded = load_checkpoint(&path, &Device::Cpu).unwrap();
        assert_eq!(loaded.config, b.config);
        assert_eq!(loaded.freeze, b.freeze);
        assert_eq!(loaded.autoencoder.latent_scale(), 1.7);
        for c in Component::ALL {
            let a = b.store(c).tensors();
            let l = loaded.store(c).tensors();
            assert_eq!(a.keys().collect::<Vec<_>>(), l.keys().collect::<Vec<_>>());
            for (k, t) in a {
                let x = t.flatten_all().unwrap().to_vec1::<f32>().unwrap();
                let y = l[&k].flatten_all().unwrap().to_vec1::<f32>().unwrap();
                assert_eq!(x, y, "{c}.{k}");
            }
        }
        assert!(loaded.denoiser.store().is_trainable());
        assert!(!loaded.autoencoder.store().is_trainable());
        // Saving again over an existing checkpoint replaces it.
        save_checkpoint(&loaded, &path).unwrap();
    }

    #[test]
    fn truncated_tensor_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        save_checkpoint(&bundle(), &path).unwrap();
        let header = CheckpointHeader::read(&path).unwrap();
        let victim = path.join(&header.tensors[0].file);
        let bytes = std::fs::read(&victim).unwrap();
        std::fs::write(&victim, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(load_checkpoint(&path, &Device::Cpu), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn non_finite_tensor_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        save_checkpoint(&bundle(), &path).unwrap();
        let header = CheckpointHeader::read(&path).unwrap();
        let victim = path.join(&header.tensors[1].file);
        let mut bytes = std::fs::read(&victim).unwrap();
        bytes[..4].copy_from_slice(&f32::NAN.to_le_bytes());
        std::fs::write(&victim, bytes).unwrap();
        assert!(matches!(load_checkpoint(&path, &Device::Cpu), Err(Error::Checkpoint(_))));
    }
}
