//! Checkpoints: a JSON manifest plus a blob of little-endian `f32` tensors.
//!
//! The blob holds the model parameters in manifest order followed by the
//! Adam moments, if any. Values are computed in `f64` and stored as `f32`,
//! so a round trip is exact up to `f32` rounding.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use dense2moe_core::dit::{DitConfig, DitModel, Layout};
use dense2moe_core::optim::{Adam, AdamConfig};
use dense2moe_core::params::Params;
use dense2moe_core::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// The pipeline step that wrote a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageTag {
    TrainTeacher,
    StageInit,
    StageMoe,
    StageMob,
}

impl StageTag {
    pub fn name(self) -> &'static str {
        match self {
            StageTag::TrainTeacher => "train-teacher",
            StageTag::StageInit => "stage-init",
            StageTag::StageMoe => "stage-moe",
            StageTag::StageMob => "stage-mob",
        }
    }

    /// Stage whose checkpoint this stage consumes.
    pub fn parent(self) -> Option<StageTag> {
        match self {
            StageTag::TrainTeacher => None,
            StageTag::StageInit => Some(StageTag::TrainTeacher),
            StageTag::StageMoe => Some(StageTag::StageInit),
            StageTag::StageMob => Some(StageTag::StageMoe),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: u64,
    pub sha256: String,
}

impl TensorEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Another checkpoint, by file name next to this one and manifest hash.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Link {
    pub file: String,
    pub sha256: String,
}

impl Link {
    pub fn to(manifest_path: &Path) -> Result<Self> {
        let bytes = fs::read(manifest_path).map_err(|e| CliError::io(manifest_path, e))?;
        Ok(Self {
            file: manifest_path
                .file_name()
                .map(|f| f.to_string_lossy().into_owned())
                .unwrap_or_default(),
            sha256: sha256_hex(&bytes),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerIndex {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<TensorEntry>,
    pub v: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub stage: StageTag,
    pub seed: u64,
    /// Optimizer steps run by the stage that wrote this checkpoint.
    pub steps: u64,
    pub model_config: DitConfig,
    pub layout: Layout,
    pub run_config: RunConfig,
    pub parent: Option<Link>,
    pub teacher: Option<Link>,
    pub tensors: Vec<TensorEntry>,
    pub optimizer: Option<OptimizerIndex>,
    pub blob: String,
    pub blob_len: u64,
    pub blob_sha256: String,
}

impl Manifest {
    pub fn tensor(&self, name: &str) -> Option<&TensorEntry> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

/// Provenance of a checkpoint being written.
#[derive(Debug, Clone)]
pub struct SaveMeta {
    pub stage: StageTag,
    pub seed: u64,
    pub steps: u64,
    pub run_config: RunConfig,
    pub parent: Option<Link>,
    pub teacher: Option<Link>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub path: PathBuf,
    pub manifest: Manifest,
    pub model: DitModel,
    pub adam: Option<Adam>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of a checkpoint: the SHA-256 of its manifest file, which in turn
/// records the blob hash.
pub fn checkpoint_hash(manifest_path: &Path) -> Result<String> {
    Ok(Link::to(manifest_path)?.sha256)
}

fn encode(t: &Tensor, blob: &mut Vec<u8>) -> (u64, String) {
    let offset = blob.len() as u64;
    let start = blob.len();
    for &v in t.data() {
        blob.extend_from_slice(&(v as f32).to_le_bytes());
    }
    (offset, sha256_hex(&blob[start..]))
}

fn push_all<'a>(items: impl Iterator<Item = (&'a String, &'a Tensor)>, blob: &mut Vec<u8>) -> Vec<TensorEntry> {
    items
        .map(|(name, t)| {
            let (offset, sha256) = encode(t, blob);
            TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
                sha256,
            }
        })
        .collect()
}

/// Writes `<dir>/<stem>.json` and `<dir>/<stem>.bin`; returns the manifest path.
pub fn save(dir: &Path, stem: &str, model: &DitModel, adam: Option<&Adam>, meta: SaveMeta) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut blob = Vec::with_capacity(model.params.total_numel() * 4);
    let tensors = push_all(model.params.iter(), &mut blob);
    let optimizer = adam.map(|a| OptimizerIndex {
        config: a.config,
        step: a.step,
        m: push_all(a.m.iter(), &mut blob),
        v: push_all(a.v.iter(), &mut blob),
    });
    let blob_name = format!("{stem}.bin");
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        stage: meta.stage,
        seed: meta.seed,
        steps: meta.steps,
        model_config: model.config.clone(),
        layout: model.layout.clone(),
        run_config: meta.run_config,
        parent: meta.parent,
        teacher: meta.teacher,
        tensors,
        optimizer,
        blob: blob_name.clone(),
        blob_len: blob.len() as u64,
        blob_sha256: sha256_hex(&blob),
    };
    let blob_path = dir.join(blob_name);
    fs::write(&blob_path, &blob).map_err(|e| CliError::io(&blob_path, e))?;
    let path = dir.join(format!("{stem}.json"));
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
    Ok(path)
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let m: Manifest = serde_json::from_str(&text)?;
    if m.schema_version != SCHEMA_VERSION {
        return Err(CliError::Checkpoint(format!(
            "schema version {} is not {SCHEMA_VERSION}",
            m.schema_version
        )));
    }
    Ok(m)
}

fn decode(entries: &[TensorEntry], blob: &[u8]) -> Result<BTreeMap<String, Tensor>> {
    entries
        .iter()
        .map(|e| {
            let start = e.offset as usize;
            let end = start + 4 * e.numel();
            let bytes = blob
                .get(start..end)
                .ok_or_else(|| CliError::Checkpoint(format!("tensor {} lies outside the blob", e.name)))?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            let t = Tensor::new(e.shape.clone(), data)?;
            Ok((e.name.clone(), t))
        })
        .collect()
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let manifest = read_manifest(path)?;
    let blob_path = path.with_file_name(&manifest.blob);
    let blob = fs::read(&blob_path).map_err(|e| CliError::io(&blob_path, e))?;
    let indexed: usize = manifest
        .tensors
        .iter()
        .chain(manifest.optimizer.iter().flat_map(|o| o.m.iter().chain(&o.v)))
        .map(|e| 4 * e.numel())
        .sum();
    if blob.len() as u64 != manifest.blob_len || blob.len() != indexed {
        return Err(CliError::Checkpoint(format!(
            "{}: blob has {} bytes, manifest expects {} (index covers {indexed})",
            blob_path.display(),
            blob.len(),
            manifest.blob_len
        )));
    }
    if sha256_hex(&blob) != manifest.blob_sha256 {
        return Err(CliError::Checkpoint(format!("{}: blob hash mismatch", blob_path.display())));
    }
    let mut params = Params::new();
    for (name, t) in decode(&manifest.tensors, &blob)? {
        params.insert(name, t);
    }
    let adam = match &manifest.optimizer {
        Some(o) => Some(Adam {
            config: o.config,
            step: o.step,
            m: decode(&o.m, &blob)?,
            v: decode(&o.v, &blob)?,
        }),
        None => None,
    };
    let model = DitModel {
        config: manifest.model_config.clone(),
        layout: manifest.layout.clone(),
        params,
    };
    Ok(Checkpoint {
        path: path.to_path_buf(),
        manifest,
        model,
        adam,
    })
}

/// Loads a checkpoint and refuses it unless `stage` wrote it.
pub fn load_from_stage(path: &Path, stage: StageTag) -> Result<Checkpoint> {
    let found = read_manifest(path)?.stage;
    if found != stage {
        return Err(CliError::Provenance {
            expected: stage.name().into(),
            found: found.name().into(),
        });
    }
    load(path)
}

/// The checkpoint `link` names, next to `from`.
pub fn resolve(from: &Path, link: &Link) -> PathBuf {
    from.with_file_name(&link.file)
}
