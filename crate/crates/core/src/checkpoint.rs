//! Portable checkpoint container for a [`ParamSet`].
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! bytes 0..8    magic "FTLABCK1"
//! bytes 8..16   u64 manifest length M
//! bytes 16..16+M  UTF-8 JSON manifest
//! remaining     concatenated raw array payloads
//! ```
//!
//! The manifest holds `format_version`, the encoder `config`, the string
//! `metadata` map and an `arrays` list of `{group, name, dtype, shape, offset,
//! nbytes}` entries, sorted by group then name. `offset` is relative to the
//! start of the payload section and `dtype` is `"f32"` or `"f64"`; payloads are
//! row-major little-endian IEEE-754 values. Decoding reproduces every array
//! bit for bit.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vit::{ArrayMap, GroupId, ParamSet, ViTConfig};

pub const MAGIC: &[u8; 8] = b"FTLABCK1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub group: GroupId,
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: ViTConfig,
    pub metadata: BTreeMap<String, String>,
    pub arrays: Vec<ArrayEntry>,
}

pub fn encode(params: &ParamSet) -> Result<Vec<u8>> {
    let mut arrays = Vec::new();
    let mut payload = Vec::new();
    for (id, group) in params.groups() {
        for (name, t) in group {
            let bytes = crate::vit::tensor_le_bytes(t)?;
            let dtype = match t.dtype() {
                candle_core::DType::F32 => "f32",
                candle_core::DType::F64 => "f64",
                other => return Err(Error::Format(format!("unsupported dtype {other:?}"))),
            };
            arrays.push(ArrayEntry {
                group: *id,
                name: name.clone(),
                dtype: dtype.to_string(),
                shape: t.dims().to_vec(),
                offset: payload.len() as u64,
                nbytes: bytes.len() as u64,
            });
            payload.extend_from_slice(&bytes);
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: params.config().clone(),
        metadata: params.metadata.clone(),
        arrays,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Reads only the manifest.
pub fn read_manifest(bytes: &[u8]) -> Result<(Manifest, usize)> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Format("missing checkpoint magic".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let end = 16usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Format("manifest length exceeds file size".into()))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[16..end])?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported format version {}",
            manifest.format_version
        )));
    }
    Ok((manifest, end))
}

pub fn decode(bytes: &[u8]) -> Result<ParamSet> {
    let (manifest, payload_start) = read_manifest(bytes)?;
    let payload = &bytes[payload_start..];
    let mut groups: BTreeMap<GroupId, ArrayMap> = BTreeMap::new();
    for e in &manifest.arrays {
        let start = e.offset as usize;
        let end = start
            .checked_add(e.nbytes as usize)
            .filter(|&x| x <= payload.len())
            .ok_or_else(|| Error::Format(format!("array {}/{} out of bounds", e.group, e.name)))?;
        let raw = &payload[start..end];
        let n: usize = e.shape.iter().product();
        let t = match e.dtype.as_str() {
            "f32" => {
                check_len(e, raw, n * 4)?;
                let v: Vec<f32> = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Tensor::from_vec(v, e.shape.as_slice(), &Device::Cpu)?
            }
            "f64" => {
                check_len(e, raw, n * 8)?;
                let v: Vec<f64> = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Tensor::from_vec(v, e.shape.as_slice(), &Device::Cpu)?
            }
            other => return Err(Error::Format(format!("unsupported dtype `{other}`"))),
        };
        if groups.entry(e.group).or_default().insert(e.name.clone(), t).is_some() {
            return Err(Error::Format(format!("duplicate array {}/{}", e.group, e.name)));
        }
    }
    ParamSet::from_parts(manifest.config, groups, manifest.metadata)
}

fn check_len(e: &ArrayEntry, raw: &[u8], want: usize) -> Result<()> {
    if raw.len() != want {
        return Err(Error::Format(format!(
            "array {}/{}: {} bytes for shape {:?}",
            e.group,
            e.name,
            raw.len(),
            e.shape
        )));
    }
    Ok(())
}

/// Writes through a temporary sibling file and renames it into place.
pub fn save(params: &ParamSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(params)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp-write");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<ParamSet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
