//! Trained decoder parameters plus the spec and training record that produced them.
//!
//! On disk a checkpoint with base `runs/artnet` is three files: the tensor
//! archive `runs/artnet.bin` + `runs/artnet.manifest.json`, and
//! `runs/artnet.meta.json` holding the spec, config, loss history and the
//! archive checksum. The meta file is renamed into place last, so a checkpoint
//! is only visible once its tensors are complete.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::arch::{ArchitectureSpec, Decoder, Model};
use crate::codec::{archive_paths, write_atomic, Encoder, WeightArchive};
use crate::error::{Error, Result};
use crate::train::{LossRecord, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub decoder_params: WeightArchive,
    pub spec: ArchitectureSpec,
    pub train_config: TrainConfig,
    pub step: usize,
    pub loss_history: Vec<LossRecord>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    spec: ArchitectureSpec,
    train_config: TrainConfig,
    step: usize,
    loss_history: Vec<LossRecord>,
    archive_sha256: String,
}

/// `<stem>.meta.json` for a base path or any of the three checkpoint file names.
pub fn meta_path(base: impl AsRef<Path>) -> PathBuf {
    let s = base.as_ref().to_string_lossy().to_string();
    let stem = s.strip_suffix(".meta.json").unwrap_or(&s);
    let (manifest, _) = archive_paths(stem);
    let m = manifest.to_string_lossy();
    PathBuf::from(format!("{}.meta.json", m.strip_suffix(".manifest.json").unwrap_or(&m)))
}

impl Decoder<f32> {
    pub fn to_archive(&self) -> WeightArchive {
        let mut archive = WeightArchive::new();
        for (name, shape, values) in self.named_params() {
            archive.insert(name, shape, values.to_vec());
        }
        archive
    }

    /// Decoder for `spec` filled from an archive holding exactly its parameters.
    pub fn from_archive(spec: &ArchitectureSpec, archive: &WeightArchive) -> Result<Self> {
        let mut decoder = Decoder::zeros(spec);
        let names: Vec<(String, Vec<usize>)> = decoder
            .named_params()
            .into_iter()
            .map(|(n, s, _)| (n, s))
            .collect();
        if archive.len() != names.len() {
            return Err(Error::Format(format!(
                "decoder archive has {} tensors, spec needs {}",
                archive.len(),
                names.len()
            )));
        }
        for ((name, shape), buf) in names.iter().zip(decoder.params_mut()) {
            buf.copy_from_slice(archive.expect(name, shape)?);
        }
        Ok(decoder)
    }
}

impl Checkpoint {
    pub fn new(model: &Model, train_config: TrainConfig, step: usize, loss_history: Vec<LossRecord>) -> Self {
        Self {
            decoder_params: model.decoder.to_archive(),
            spec: model.spec().clone(),
            train_config,
            step,
            loss_history,
        }
    }

    pub fn save(&self, base: impl AsRef<Path>) -> Result<()> {
        let base = base.as_ref();
        if let Some(dir) = base.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        self.decoder_params.write(base)?;
        let meta = Meta {
            spec: self.spec.clone(),
            train_config: self.train_config.clone(),
            step: self.step,
            loss_history: self.loss_history.clone(),
            archive_sha256: self.decoder_params.checksum(),
        };
        write_atomic(&meta_path(base), serde_json::to_string_pretty(&meta)?.as_bytes())
    }

    pub fn load(base: impl AsRef<Path>) -> Result<Self> {
        let base = base.as_ref();
        let mp = meta_path(base);
        let text = std::fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
        let meta: Meta = serde_json::from_str(&text)?;
        let stem = mp.to_string_lossy().trim_end_matches(".meta.json").to_string();
        let decoder_params = WeightArchive::read(&stem)?;
        if decoder_params.checksum() != meta.archive_sha256 {
            return Err(Error::Format(format!("{}: tensor data does not match its metadata", mp.display())));
        }
        meta.spec.validate()?;
        Ok(Self {
            decoder_params,
            spec: meta.spec,
            train_config: meta.train_config,
            step: meta.step,
            loss_history: meta.loss_history,
        })
    }

    /// Model for `requested`, which must share this checkpoint's parameter
    /// structure (kind, FA, NS, channel plan). Transfer kind and MST placement
    /// carry no parameters and may differ.
    pub fn into_model(self, requested: &ArchitectureSpec, encoder: Arc<Encoder>) -> Result<Model> {
        if !self.spec.same_parameters(requested) {
            return Err(Error::CheckpointMismatch {
                found: self.spec.to_string(),
                requested: requested.to_string(),
            });
        }
        let decoder = Decoder::from_archive(&self.spec, &self.decoder_params)?;
        Model::from_parts(requested.clone(), encoder, decoder)
    }
}
