//! Checkpoint archive: one JSON file holding a metadata record, every
//! named parameter array for theta/epsilon/omega (plus BN running
//! statistics), and the producing config hash. Arrays are base64-coded
//! little-endian f64, so save/load round-trips bit-exactly.

use std::path::Path;

use base64::Engine;

use crate::error::{Error, Result};
use crate::model::{BackboneSpec, HeadKind, ModelBundle, ProjectorConfig};
use crate::nn::params::ParamGroup;
use crate::paradigms::ParadigmKind;

use super::config::ExperimentConfig;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub backbone: BackboneSpec,
    pub projector: ProjectorConfig,
    pub head: HeadKind,
    pub paradigm: ParadigmKind,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub seed: u64,
    pub epoch: usize,
}

impl CheckpointMeta {
    /// Reject when the checkpoint contradicts the requesting config.
    pub fn validate_against(&self, cfg: &ExperimentConfig) -> Result<()> {
        let mut problems = Vec::new();
        if self.backbone != cfg.backbone {
            problems.push(format!(
                "backbone: checkpoint {:?}, config {:?}",
                self.backbone, cfg.backbone
            ));
        }
        if self.projector != cfg.projector {
            problems.push(format!(
                "projector: checkpoint {}, config {}",
                self.projector, cfg.projector
            ));
        }
        if self.head != cfg.paradigm.head {
            problems.push(format!(
                "head: checkpoint {}, config {}",
                self.head, cfg.paradigm.head
            ));
        }
        if self.seed != cfg.seed {
            problems.push(format!(
                "seed: checkpoint {}, config {}",
                self.seed, cfg.seed
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::CheckpointMismatch(problems))
        }
    }
}

#[derive(serde::Serialize, serde::Deserialize)]
struct NamedArray {
    name: String,
    group: ParamGroup,
    shape: Vec<usize>,
    data: String,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct NamedBuffer {
    name: String,
    data: String,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct CheckpointFile {
    meta: CheckpointMeta,
    config_hash: String,
    params: Vec<NamedArray>,
    buffers: Vec<NamedBuffer>,
}

fn encode(values: impl Iterator<Item = f64>) -> String {
    let mut bytes = Vec::new();
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

fn decode(data: &str, expect_len: usize) -> Result<Vec<f64>> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(data)
        .map_err(|e| Error::MalformedCheckpoint(format!("bad base64: {e}")))?;
    if bytes.len() != expect_len * 8 {
        return Err(Error::MalformedCheckpoint(format!(
            "array byte length {} != {}",
            bytes.len(),
            expect_len * 8
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn save_checkpoint(
    path: &Path,
    bundle: &ModelBundle,
    paradigm: ParadigmKind,
    config_hash: &str,
) -> Result<()> {
    let meta = CheckpointMeta {
        format_version: CHECKPOINT_FORMAT_VERSION,
        backbone: bundle.arch.spec,
        projector: bundle.arch.projector.cfg,
        head: bundle.arch.head.kind,
        paradigm,
        feature_dim: bundle.feature_dim(),
        num_classes: bundle.num_classes(),
        seed: bundle.seed,
        epoch: bundle.epoch,
    };
    let params = bundle
        .params
        .layout
        .entries
        .iter()
        .zip(bundle.params.tensors())
        .map(|(e, t)| NamedArray {
            name: e.name.clone(),
            group: e.group,
            shape: e.shape.clone(),
            data: encode(t.iter().copied()),
        })
        .collect();
    let buffers = bundle
        .buffers
        .entries()
        .map(|(name, t)| NamedBuffer {
            name: name.to_string(),
            data: encode(t.iter().copied()),
        })
        .collect();
    let file = CheckpointFile {
        meta,
        config_hash: config_hash.to_string(),
        params,
        buffers,
    };
    std::fs::write(path, serde_json::to_string(&file)?)?;
    Ok(())
}

pub struct LoadedCheckpoint {
    pub bundle: ModelBundle,
    pub meta: CheckpointMeta,
    pub config_hash: String,
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let text = std::fs::read_to_string(path)?;
    let file: CheckpointFile = serde_json::from_str(&text)
        .map_err(|e| Error::MalformedCheckpoint(e.to_string()))?;
    if file.meta.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::MalformedCheckpoint(format!(
            "format version {} unsupported",
            file.meta.format_version
        )));
    }
    let mut bundle = ModelBundle::new(
        file.meta.backbone,
        file.meta.projector,
        file.meta.head,
        file.meta.num_classes,
        file.meta.seed,
    )?;
    bundle.epoch = file.meta.epoch;

    let by_name: std::collections::HashMap<&str, &NamedArray> =
        file.params.iter().map(|a| (a.name.as_str(), a)).collect();
    let entries = bundle.params.layout.clone();
    for (entry, tensor) in entries.entries.iter().zip(bundle.params.tensors_mut()) {
        let arr = by_name.get(entry.name.as_str()).ok_or_else(|| {
            Error::MalformedCheckpoint(format!("missing parameter '{}'", entry.name))
        })?;
        if arr.shape != entry.shape {
            return Err(Error::MalformedCheckpoint(format!(
                "parameter '{}' shape {:?} != expected {:?}",
                entry.name, arr.shape, entry.shape
            )));
        }
        let values = decode(&arr.data, tensor.len())?;
        for (t, v) in tensor.iter_mut().zip(values) {
            *t = v;
        }
    }
    let buf_by_name: std::collections::HashMap<&str, &NamedBuffer> =
        file.buffers.iter().map(|b| (b.name.as_str(), b)).collect();
    for (name, tensor) in bundle.buffers.entries_mut() {
        let buf = buf_by_name.get(name).ok_or_else(|| {
            Error::MalformedCheckpoint(format!("missing buffer '{name}'"))
        })?;
        let values = decode(&buf.data, tensor.len())?;
        for (t, v) in tensor.iter_mut().zip(values) {
            *t = v;
        }
    }
    Ok(LoadedCheckpoint {
        bundle,
        meta: file.meta,
        config_hash: file.config_hash,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BackboneKind, ImageShape};

    fn tiny_bundle() -> ModelBundle {
        let spec = BackboneSpec::new(BackboneKind::Conv32fTiny, ImageShape::new(3, 16, 16));
        let d = spec.feature_dim().unwrap();
        ModelBundle::new(spec, ProjectorConfig::full(d), HeadKind::Linear, 3, 9).unwrap()
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let mut bundle = tiny_bundle();
        // make buffers non-trivial
        let x = ndarray::Array4::from_elem((2, 3, 16, 16), 0.3);
        bundle.forward_train(&x).unwrap();
        save_checkpoint(&path, &bundle, ParadigmKind::NonEpisodic, "deadbeef").unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.config_hash, "deadbeef");
        assert_eq!(loaded.meta.epoch, bundle.epoch);
        for (a, b) in loaded
            .bundle
            .params
            .tensors()
            .iter()
            .zip(bundle.params.tensors())
        {
            assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        let bufs_a: Vec<f64> = loaded
            .bundle
            .buffers
            .entries()
            .flat_map(|(_, t)| t.iter().copied().collect::<Vec<_>>())
            .collect();
        let bufs_b: Vec<f64> = bundle
            .buffers
            .entries()
            .flat_map(|(_, t)| t.iter().copied().collect::<Vec<_>>())
            .collect();
        assert_eq!(bufs_a.len(), bufs_b.len());
        assert!(bufs_a.iter().zip(&bufs_b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn contradicting_config_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let bundle = tiny_bundle();
        save_checkpoint(&path, &bundle, ParadigmKind::NonEpisodic, "h").unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        let mut cfg = super::super::config::smoke_config(9, std::path::PathBuf::from("x"));
        cfg.backbone = bundle.arch.spec;
        cfg.projector = bundle.arch.projector.cfg;
        // same settings pass
        loaded.meta.validate_against(&cfg).unwrap();
        // flipping the projector flags contradicts
        cfg.projector = ProjectorConfig::none(cfg.projector.feature_dim);
        assert!(matches!(
            loaded.meta.validate_against(&cfg),
            Err(Error::CheckpointMismatch(_))
        ));
    }

    #[test]
    fn truncated_file_is_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        std::fs::write(&path, "{\"meta\":").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::MalformedCheckpoint(_))
        ));
    }
}
