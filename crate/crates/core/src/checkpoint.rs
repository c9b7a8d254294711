//! On-disk tensor store: a directory holding a JSON `manifest` and a
//! `params.bin` blob of little-endian f32 arrays, each starting on a 64-byte
//! boundary. Model checkpoints and cached datasets share the format.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use dplot_tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::model::{ArchSpec, BlockNet, RunningStats};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest";
pub const BLOB_FILE: &str = "params.bin";
const ALIGN: u64 = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Param,
    RunningMean,
    RunningVar,
    Data,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub block_index: usize,
    pub kind: TensorKind,
    pub offset_bytes: u64,
    pub len_bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub dtype: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arch: Option<ArchSpec>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, serde_json::Value>,
    pub tensors: Vec<TensorEntry>,
}

/// A tensor to be written; offsets are assigned by [`write_store`].
pub struct Record {
    pub name: String,
    pub block_index: usize,
    pub kind: TensorKind,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

fn align(n: u64) -> u64 {
    n.div_ceil(ALIGN) * ALIGN
}

fn ck_err(dir: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: dir.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn write_store(
    dir: &Path,
    arch: Option<&ArchSpec>,
    meta: BTreeMap<String, serde_json::Value>,
    records: Vec<Record>,
) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(io_err(format!("creating {}", dir.display())))?;
    let mut blob = Vec::new();
    let mut tensors = Vec::with_capacity(records.len());
    for r in records {
        let offset = align(blob.len() as u64);
        blob.resize(offset as usize, 0u8);
        for v in &r.data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(TensorEntry {
            name: r.name,
            shape: r.shape,
            block_index: r.block_index,
            kind: r.kind,
            offset_bytes: offset,
            len_bytes: 4 * r.data.len() as u64,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        dtype: "f32".into(),
        arch: arch.cloned(),
        meta,
        tensors,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| ck_err(dir, e.to_string()))?;
    let blob_path = dir.join(BLOB_FILE);
    fs::write(&blob_path, &blob).map_err(io_err(format!("writing {}", blob_path.display())))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    fs::write(&manifest_path, text + "\n").map_err(io_err(format!("writing {}", manifest_path.display())))?;
    Ok(manifest)
}

/// Reads and validates a store, returning the manifest and one f32 array
/// per tensor entry.
pub fn read_store(dir: &Path) -> Result<(Manifest, Vec<Vec<f32>>)> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(io_err(format!("reading {}", manifest_path.display())))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| ck_err(dir, format!("unparseable manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(ck_err(
            dir,
            format!(
                "format version {} (this build reads {FORMAT_VERSION})",
                manifest.format_version
            ),
        ));
    }
    if manifest.dtype != "f32" {
        return Err(ck_err(dir, format!("unsupported dtype {}", manifest.dtype)));
    }
    let blob_path = dir.join(BLOB_FILE);
    let blob = fs::read(&blob_path).map_err(io_err(format!("reading {}", blob_path.display())))?;

    let mut expected = 0u64;
    let mut out = Vec::with_capacity(manifest.tensors.len());
    for t in &manifest.tensors {
        let numel: usize = t.shape.iter().product();
        if t.len_bytes != 4 * numel as u64 {
            return Err(ck_err(
                dir,
                format!("{}: {} bytes for shape {:?}", t.name, t.len_bytes, t.shape),
            ));
        }
        let offset = align(expected);
        if t.offset_bytes != offset {
            return Err(ck_err(
                dir,
                format!("{}: offset {} inconsistent with layout (expected {offset})", t.name, t.offset_bytes),
            ));
        }
        let end = offset + t.len_bytes;
        if end > blob.len() as u64 {
            return Err(ck_err(
                dir,
                format!("truncated blob: {} needs {end} bytes, file has {}", t.name, blob.len()),
            ));
        }
        let bytes = &blob[offset as usize..end as usize];
        out.push(
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        );
        expected = end;
    }
    if expected != blob.len() as u64 {
        return Err(ck_err(
            dir,
            format!("blob has {} bytes, manifest accounts for {expected}", blob.len()),
        ));
    }
    Ok((manifest, out))
}

fn to_f32<T: Scalar>(t: &Tensor<T>) -> Vec<f32> {
    t.data().iter().map(|v| v.as_f64() as f32).collect()
}

/// Saves parameters and BN running statistics; `meta` lands verbatim in the
/// manifest.
pub fn save_checkpoint<T: Scalar>(
    model: &BlockNet<T>,
    dir: &Path,
    meta: BTreeMap<String, serde_json::Value>,
) -> Result<Manifest> {
    let mut records = Vec::new();
    for (p, info) in model.params().iter().zip(model.param_infos()) {
        records.push(Record {
            name: info.name.clone(),
            block_index: info.block,
            kind: TensorKind::Param,
            shape: p.shape().to_vec(),
            data: to_f32(p),
        });
    }
    for (s, info) in model.running_stats().iter().zip(model.bn_infos()) {
        for (suffix, kind, t) in [
            ("running_mean", TensorKind::RunningMean, &s.mean),
            ("running_var", TensorKind::RunningVar, &s.var),
        ] {
            records.push(Record {
                name: format!("{}.{suffix}", info.name),
                block_index: info.block,
                kind,
                shape: t.shape().to_vec(),
                data: to_f32(t),
            });
        }
    }
    write_store(dir, Some(model.arch()), meta, records)
}

pub struct Loaded<T: Scalar> {
    pub model: BlockNet<T>,
    pub manifest: Manifest,
}

pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<Loaded<T>> {
    let (manifest, arrays) = read_store(dir)?;
    let arch = manifest
        .arch
        .clone()
        .ok_or_else(|| ck_err(dir, "manifest has no architecture"))?;
    let template = BlockNet::<T>::new(&arch, &mut dplot_tensor::Rng::new(0))?;
    let n_params = template.params().len();
    let n_bn = template.bn_infos().len();
    if manifest.tensors.len() != n_params + 2 * n_bn {
        return Err(ck_err(
            dir,
            format!(
                "{} tensors, architecture needs {}",
                manifest.tensors.len(),
                n_params + 2 * n_bn
            ),
        ));
    }
    let tensor = |i: usize, data: Vec<f32>| -> Result<Tensor<T>> {
        let e = &manifest.tensors[i];
        Ok(Tensor::new(
            &e.shape,
            data.into_iter().map(|v| T::from_f64_lossy(v as f64)).collect(),
        )?)
    };
    let mut params = Vec::with_capacity(n_params);
    let mut arrays = arrays.into_iter();
    for (i, info) in template.param_infos().iter().enumerate() {
        let e = &manifest.tensors[i];
        if e.name != info.name || e.kind != TensorKind::Param {
            return Err(ck_err(dir, format!("entry {i} is {}, expected {}", e.name, info.name)));
        }
        params.push(tensor(i, arrays.next().unwrap_or_default())?);
    }
    let mut stats = Vec::with_capacity(n_bn);
    for (j, info) in template.bn_infos().iter().enumerate() {
        let i = n_params + 2 * j;
        let names = [format!("{}.running_mean", info.name), format!("{}.running_var", info.name)];
        for (k, name) in names.iter().enumerate() {
            if &manifest.tensors[i + k].name != name {
                return Err(ck_err(
                    dir,
                    format!("entry {} is {}, expected {name}", i + k, manifest.tensors[i + k].name),
                ));
            }
        }
        stats.push(RunningStats {
            mean: tensor(i, arrays.next().unwrap_or_default())?,
            var: tensor(i + 1, arrays.next().unwrap_or_default())?,
        });
    }
    let model = BlockNet::from_parts(&arch, params, stats).map_err(|e| ck_err(dir, e.to_string()))?;
    Ok(Loaded { model, manifest })
}

pub fn blob_path(dir: &Path) -> PathBuf {
    dir.join(BLOB_FILE)
}
