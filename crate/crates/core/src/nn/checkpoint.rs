//! Checkpoint directory: `manifest.json` plus `weights.bin`, the latter
//! holding every parameter as little-endian `f64` in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ParamStore;
use crate::{Error, Result, Tensor};

pub const FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const WEIGHTS: &str = "weights.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into `weights.bin`.
    pub offset: u64,
    /// Element count.
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub params: Vec<ManifestEntry>,
}

pub fn save_checkpoint(store: &ParamStore, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut bytes = Vec::with_capacity(store.num_elements() * 8);
    let mut params = Vec::with_capacity(store.len());
    for (name, p) in store.iter() {
        params.push(ManifestEntry {
            name: name.to_string(),
            shape: p.value.shape().to_vec(),
            offset: bytes.len() as u64,
            count: p.value.len() as u64,
        });
        for v in p.value.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        params,
    };
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    fs::write(dir.join(MANIFEST), json)?;
    fs::write(dir.join(WEIGHTS), bytes)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<ParamStore> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST))?)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format_version {} is not supported (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    let bytes = fs::read(dir.join(WEIGHTS))?;
    let mut store = ParamStore::new();
    let mut expected_end = 0u64;
    for e in &manifest.params {
        let n: usize = e.shape.iter().product();
        let end = e.offset + e.count * 8;
        if end > bytes.len() as u64 {
            return Err(Error::Truncated(format!(
                "`{}` needs bytes {}..{end} but weights.bin has {}",
                e.name,
                e.offset,
                bytes.len()
            )));
        }
        if e.count as usize != n || e.offset != expected_end {
            return Err(Error::Truncated(format!(
                "`{}` declares {} elements at offset {} but shape {:?} at offset {expected_end} was expected",
                e.name, e.count, e.offset, e.shape
            )));
        }
        let data = bytes[e.offset as usize..end as usize]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        store.insert(e.name.clone(), Tensor::new(&e.shape, data)?)?;
        expected_end = end;
    }
    if expected_end != bytes.len() as u64 {
        return Err(Error::Truncated(format!(
            "manifest covers {expected_end} bytes, weights.bin has {}",
            bytes.len()
        )));
    }
    Ok(store)
}

/// Loads a checkpoint and checks it has exactly the names and shapes of
/// `template` (typically freshly initialized from a config).
pub fn load_checkpoint_into(dir: &Path, template: &ParamStore) -> Result<ParamStore> {
    let loaded = load_checkpoint(dir)?;
    let mut names: Vec<&str> = template.names().chain(loaded.names()).collect();
    names.sort_unstable();
    names.dedup();
    for name in names {
        match (template.get(name), loaded.get(name)) {
            (Some(a), Some(b)) if a.value.shape() == b.value.shape() => {}
            (Some(a), Some(b)) => {
                return Err(Error::Checkpoint(format!(
                    "`{name}` has shape {:?} in the checkpoint but the config expects {:?}",
                    b.value.shape(),
                    a.value.shape()
                )))
            }
            (Some(_), None) => return Err(Error::Checkpoint(format!("`{name}` missing from checkpoint"))),
            (None, _) => return Err(Error::Checkpoint(format!("`{name}` is not part of the config"))),
        }
    }
    Ok(loaded)
}
