//! On-disk model format: a directory holding `manifest.json` and one
//! little-endian `params.f64` blob.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::{Adapter, LoraPair, Site};
use crate::model::{FreezeSelector, MicroTransformer, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: u32 = 1;
const MANIFEST: &str = "manifest.json";
const BLOB: &str = "params.f64";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    requires_grad: bool,
    /// Offset into the blob, in values.
    offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct PairEntry {
    site: Site,
    rank: usize,
    b: String,
    a: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct AdapterEntry {
    task_id: u32,
    block: usize,
    pairs: Vec<PairEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    model: ModelConfig,
    seed: u64,
    freeze: FreezeSelector,
    merged_tasks: Vec<u32>,
    checksum: String,
    params: Vec<ParamEntry>,
    adapters: Vec<AdapterEntry>,
    /// Caller-defined metadata, stored verbatim.
    #[serde(default)]
    meta: serde_json::Value,
}

/// Writes `model` into `dir` (created if needed), with free-form `meta`.
pub fn save(model: &MicroTransformer, dir: &Path, meta: serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let store = model.params();
    let mut blob = Vec::with_capacity(store.total_count() * 8);
    let mut params = Vec::new();
    let mut offset = 0;
    for (_, p) in store.iter() {
        params.push(ParamEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            requires_grad: p.requires_grad,
            offset,
        });
        offset += p.value.len();
        blob.extend(p.value.to_le_bytes());
    }
    let adapters = model
        .adapters()
        .iter()
        .map(|a| AdapterEntry {
            task_id: a.task_id,
            block: a.block,
            pairs: a
                .pairs
                .iter()
                .map(|p| PairEntry {
                    site: p.site,
                    rank: p.rank,
                    b: store.get(p.b).name.clone(),
                    a: store.get(p.a).name.clone(),
                })
                .collect(),
        })
        .collect();
    let manifest = Manifest {
        format_version: CHECKPOINT_FORMAT,
        model: model.config().clone(),
        seed: model.seed(),
        freeze: model.freeze_state(),
        merged_tasks: model.merged_tasks().to_vec(),
        checksum: model.checksum(),
        params,
        adapters,
        meta,
    };
    let bpath = dir.join(BLOB);
    fs::write(&bpath, blob).map_err(|e| Error::io(&bpath, e))?;
    let mpath = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&mpath, text + "\n").map_err(|e| Error::io(&mpath, e))?;
    Ok(())
}

/// Metadata stored with a checkpoint, without loading the weights.
pub fn read_meta(dir: &Path) -> Result<(ModelConfig, serde_json::Value)> {
    let m = read_manifest(dir)?;
    Ok((m.model, m.meta))
}

fn read_manifest(dir: &Path) -> Result<Manifest> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&mpath, e.to_string()))?;
    if m.format_version != CHECKPOINT_FORMAT {
        return Err(Error::format(
            &mpath,
            format!("unsupported format version {}", m.format_version),
        ));
    }
    Ok(m)
}

/// Loads a checkpoint and verifies its checksum.
pub fn load(dir: &Path) -> Result<(MicroTransformer, serde_json::Value)> {
    let m = read_manifest(dir)?;
    let mpath = dir.join(MANIFEST);
    let bpath = dir.join(BLOB);
    let raw = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    if raw.len() % 8 != 0 {
        return Err(Error::format(&bpath, "length is not a multiple of 8"));
    }
    let values: Vec<f64> = raw
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect();

    let mut store = ParamStore::new();
    let mut ids = BTreeMap::new();
    for p in &m.params {
        let n: usize = p.shape.iter().product();
        let slice = values
            .get(p.offset..p.offset + n)
            .ok_or_else(|| Error::format(&bpath, format!("parameter `{}` runs past the end of the blob", p.name)))?;
        let t = Tensor::new(&p.shape, slice.to_vec()).map_err(|e| Error::format(&mpath, e.to_string()))?;
        let id = store.insert(p.name.clone(), t)?;
        store.set_requires_grad(id, p.requires_grad);
        ids.insert(p.name.clone(), id);
    }
    let lookup = |name: &str| {
        ids.get(name)
            .copied()
            .ok_or_else(|| Error::format(&mpath, format!("adapter refers to unknown parameter `{name}`")))
    };
    let mut adapters = Vec::new();
    for a in &m.adapters {
        let mut pairs = Vec::new();
        for p in &a.pairs {
            pairs.push(LoraPair {
                site: p.site,
                rank: p.rank,
                b: lookup(&p.b)?,
                a: lookup(&p.a)?,
            });
        }
        adapters.push(Adapter {
            task_id: a.task_id,
            block: a.block,
            pairs,
        });
    }
    let model = MicroTransformer::from_parts(m.model, m.seed, store, adapters, m.merged_tasks, m.freeze)?;
    if model.checksum() != m.checksum {
        return Err(Error::format(
            &mpath,
            "checksum mismatch; weights do not match the manifest",
        ));
    }
    Ok((model, m.meta))
}
