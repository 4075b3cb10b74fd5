//! Checkpoints: a JSON manifest describing named tensors plus one raw
//! little-endian f64 payload. Adapter-only checkpoints hold just the
//! trainable tensors and BatchNorm buffers, composable over a backbone
//! checkpoint.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use ila_core::params::{ParamKind, ParamStore};
use ila_core::tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::{LabError, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    pub kind: String,
    /// Element offset into the payload.
    pub offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub dtype: String,
    pub tensors: BTreeMap<String, TensorEntry>,
}

fn kind_str(kind: ParamKind) -> &'static str {
    match kind {
        ParamKind::Trainable => "trainable",
        ParamKind::Frozen => "frozen",
        ParamKind::Buffer => "buffer",
    }
}

fn kind_from(s: &str) -> Result<ParamKind> {
    match s {
        "trainable" => Ok(ParamKind::Trainable),
        "frozen" => Ok(ParamKind::Frozen),
        "buffer" => Ok(ParamKind::Buffer),
        other => Err(LabError::Config(format!("unknown tensor kind `{other}`"))),
    }
}

fn save_filtered(dir: &Path, store: &ParamStore, keep: impl Fn(ParamKind) -> bool) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut tensors = BTreeMap::new();
    let mut payload = fs::File::create(dir.join("weights.f64le"))?;
    let mut offset = 0usize;
    for (name, p) in store.iter() {
        if !keep(p.kind) {
            continue;
        }
        tensors.insert(
            name.clone(),
            TensorEntry {
                shape: p.value.shape().to_vec(),
                kind: kind_str(p.kind).into(),
                offset,
            },
        );
        for v in p.value.data() {
            payload.write_all(&v.to_le_bytes())?;
        }
        offset += p.value.numel();
    }
    let manifest = Manifest {
        schema_version: 1,
        dtype: "f64le".into(),
        tensors,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

/// Save every tensor, backbone included.
pub fn save_full(dir: &Path, store: &ParamStore) -> Result<()> {
    save_filtered(dir, store, |_| true)
}

/// Save only what fine-tuning can change: trainable tensors and buffers.
pub fn save_adapter(dir: &Path, store: &ParamStore) -> Result<()> {
    save_filtered(dir, store, |k| k != ParamKind::Frozen)
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    if manifest.schema_version != 1 {
        return Err(LabError::Config(format!(
            "unsupported checkpoint schema_version {}",
            manifest.schema_version
        )));
    }
    if manifest.dtype != "f64le" {
        return Err(LabError::Config(format!(
            "unsupported checkpoint dtype `{}`",
            manifest.dtype
        )));
    }
    Ok(manifest)
}

/// Load a checkpoint as a standalone store.
pub fn load(dir: &Path) -> Result<ParamStore> {
    let manifest = load_manifest(dir)?;
    let bytes = fs::read(dir.join("weights.f64le"))?;
    let mut store = ParamStore::new();
    for (name, entry) in &manifest.tensors {
        let n: usize = entry.shape.iter().product();
        let start = entry.offset * 8;
        let end = start + n * 8;
        if end > bytes.len() {
            return Err(LabError::Config(format!(
                "checkpoint payload truncated at tensor `{name}`"
            )));
        }
        let data: Vec<f64> = bytes[start..end]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        store.insert(
            name,
            Tensor::new(&entry.shape, data).map_err(LabError::Core)?,
            kind_from(&entry.kind)?,
        );
    }
    Ok(store)
}

/// Overlay `overlay` onto `base`: every overlay tensor must already exist
/// in `base` with the same shape. Used to compose a frozen-backbone
/// checkpoint with an adapter-only checkpoint.
pub fn compose(base: &mut ParamStore, overlay: &ParamStore) -> Result<()> {
    for (name, p) in overlay.iter() {
        let existing = base
            .get(name)
            .map_err(|_| LabError::Config(format!("overlay tensor `{name}` not in base model")))?;
        if existing.value.shape() != p.value.shape() {
            return Err(LabError::Config(format!(
                "shape mismatch for `{name}`: base {:?} vs overlay {:?}",
                existing.value.shape(),
                p.value.shape()
            )));
        }
        base.get_mut(name).unwrap().value = p.value.clone();
    }
    Ok(())
}

/// Restore a model's parameters from a full checkpoint; the name sets and
/// shapes must match exactly.
pub fn restore_into(store: &mut ParamStore, loaded: &ParamStore) -> Result<()> {
    if store.len() != loaded.len() {
        return Err(LabError::Config(format!(
            "checkpoint has {} tensors, model expects {}",
            loaded.len(),
            store.len()
        )));
    }
    compose(store, loaded)
}
