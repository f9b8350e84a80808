//! `RSFW` weight bundles.
//!
//! ```text
//! offset  size        field
//! 0       4           magic "RSFW"
//! 4       1           version = 1
//! 5       3           reserved = 0
//! 8       8           manifest length L, u64 little-endian
//! 16      4           CRC-32 of the manifest bytes, u32 little-endian
//! 20      L           manifest, UTF-8 JSON
//! 20+L    8           entry count N, u64 little-endian
//! 28+L    16 * N      (offset, length) per entry, u64 little-endian,
//!                     relative to the first block
//! ...                 N concatenated RSFT blocks
//! ```
//!
//! Blocks are stored in manifest order, contiguously, and must end exactly
//! at the end of the file. Each manifest entry carries the CRC-32 of its
//! block.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{build_model, ModelConfig, RepSfNet};
use crate::io::tensor_file::{decode_prefix, encode_raw, TensorData};
use crate::params::{load_from, Parameters};
use crate::tensor::{DType, Scalar};

pub const BUNDLE_MAGIC: &[u8; 4] = b"RSFW";
pub const BUNDLE_VERSION: u8 = 1;
/// Manifests larger than this are rejected before allocation.
pub const MAX_MANIFEST_LEN: u64 = 64 << 20;
const PREFIX_LEN: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub crc32: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleManifest {
    pub format_version: u32,
    pub config: ModelConfig,
    pub merged: bool,
    pub seed: u64,
    pub dtype: DType,
    pub params: Vec<ManifestEntry>,
}

/// A loaded model in its stored precision.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyModel {
    F32(RepSfNet<f32>),
    F64(RepSfNet<f64>),
}

impl AnyModel {
    pub fn dtype(&self) -> DType {
        match self {
            AnyModel::F32(_) => DType::F32,
            AnyModel::F64(_) => DType::F64,
        }
    }

    /// The model converted to `T`.
    pub fn into_model<T: Scalar>(self) -> RepSfNet<T> {
        match self {
            AnyModel::F32(m) => m.cast(),
            AnyModel::F64(m) => m.cast(),
        }
    }
}

pub fn encode_bundle<T: Scalar>(model: &RepSfNet<T>) -> Result<Vec<u8>> {
    let mut entries = Vec::new();
    let mut blocks: Vec<Vec<u8>> = Vec::new();
    let mut failure = None;
    model.visit("", &mut |name, dims, data, _| {
        if failure.is_some() {
            return;
        }
        match encode_raw(dims, data) {
            Ok(block) => {
                entries.push(ManifestEntry {
                    name: name.to_string(),
                    shape: dims.to_vec(),
                    crc32: crc32fast::hash(&block),
                });
                blocks.push(block);
            }
            Err(e) => failure = Some(e),
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    let manifest = BundleManifest {
        format_version: u32::from(BUNDLE_VERSION),
        config: model.config.clone(),
        merged: model.is_merged_only(),
        seed: model.config.seed(),
        dtype: T::DTYPE,
        params: entries,
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| Error::Validation(e.to_string()))?;

    let mut out = Vec::new();
    out.extend_from_slice(BUNDLE_MAGIC);
    out.extend_from_slice(&[BUNDLE_VERSION, 0, 0, 0]);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&crc32fast::hash(&json).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(blocks.len() as u64).to_le_bytes());
    let mut offset = 0u64;
    for b in &blocks {
        out.extend_from_slice(&offset.to_le_bytes());
        out.extend_from_slice(&(b.len() as u64).to_le_bytes());
        offset += b.len() as u64;
    }
    for b in &blocks {
        out.extend_from_slice(b);
    }
    Ok(out)
}

fn read_u64(bytes: &[u8], at: usize) -> Result<u64> {
    bytes
        .get(at..at + 8)
        .map(|s| u64::from_le_bytes(s.try_into().expect("8 bytes")))
        .ok_or_else(|| Error::format(bytes.len(), "truncated bundle"))
}

/// Parses and checks the manifest without building a model.
pub fn read_manifest(bytes: &[u8]) -> Result<BundleManifest> {
    Ok(parse_container(bytes)?.0)
}

type Blocks = Vec<(usize, TensorData, Vec<usize>)>;

fn parse_container(bytes: &[u8]) -> Result<(BundleManifest, Blocks)> {
    if bytes.len() < PREFIX_LEN {
        return Err(Error::format(bytes.len(), "truncated bundle header"));
    }
    if &bytes[..4] != BUNDLE_MAGIC {
        return Err(Error::format(0, "bad magic, expected \"RSFW\""));
    }
    if bytes[4] != BUNDLE_VERSION {
        return Err(Error::format(4, format!("unsupported version {}", bytes[4])));
    }
    if let Some(k) = bytes[5..8].iter().position(|&b| b != 0) {
        return Err(Error::format(5 + k, "reserved byte must be zero"));
    }
    let len = read_u64(bytes, 8)?;
    if len > MAX_MANIFEST_LEN || len as usize > bytes.len() - PREFIX_LEN {
        return Err(Error::format(8, format!("manifest length {len} exceeds file")));
    }
    let len = len as usize;
    let crc = u32::from_le_bytes(bytes[16..20].try_into().expect("4 bytes"));
    let json = &bytes[PREFIX_LEN..PREFIX_LEN + len];
    if crc32fast::hash(json) != crc {
        return Err(Error::format(16, "manifest checksum mismatch"));
    }
    let manifest: BundleManifest = serde_json::from_slice(json)
        .map_err(|e| Error::format(PREFIX_LEN, format!("manifest: {e}")))?;
    if manifest.format_version != u32::from(BUNDLE_VERSION) {
        return Err(Error::format(PREFIX_LEN, "manifest format_version mismatch"));
    }
    if manifest.seed != manifest.config.seed() {
        return Err(Error::format(PREFIX_LEN, "manifest seed disagrees with config"));
    }
    manifest
        .config
        .validate()
        .map_err(|e| Error::format(PREFIX_LEN, format!("manifest config: {e}")))?;

    let table = PREFIX_LEN + len;
    let count = read_u64(bytes, table)?;
    if count != manifest.params.len() as u64 {
        return Err(Error::format(
            table,
            format!("{count} blocks for {} manifest entries", manifest.params.len()),
        ));
    }
    let count = count as usize;
    let data_start = table
        .checked_add(8 + 16 * count)
        .filter(|&s| s <= bytes.len())
        .ok_or_else(|| Error::format(table, "offset table exceeds file"))?;
    let mut expected = 0u64;
    let mut blocks = Vec::with_capacity(count);
    for (k, entry) in manifest.params.iter().enumerate() {
        let at = table + 8 + 16 * k;
        let offset = read_u64(bytes, at)?;
        let length = read_u64(bytes, at + 8)?;
        if offset != expected {
            return Err(Error::format(at, format!("block {k} offset {offset}, expected {expected}")));
        }
        let start = data_start as u64 + offset;
        let end = start
            .checked_add(length)
            .filter(|&e| e <= bytes.len() as u64)
            .ok_or_else(|| Error::format(at + 8, format!("block {k} runs past end of file")))?;
        let (start, end) = (start as usize, end as usize);
        let block = &bytes[start..end];
        if crc32fast::hash(block) != entry.crc32 {
            return Err(Error::format(start, format!("checksum mismatch for `{}`", entry.name)));
        }
        let (raw, used) = decode_prefix(block, start)?;
        if used != block.len() {
            return Err(Error::format(start + used, format!("block `{}` has trailing bytes", entry.name)));
        }
        if raw.dims != entry.shape {
            return Err(Error::format(
                start,
                format!("`{}` has dims {:?}, manifest says {:?}", entry.name, raw.dims, entry.shape),
            ));
        }
        if raw.dtype() != manifest.dtype {
            return Err(Error::format(start + 5, format!("`{}` dtype differs from manifest", entry.name)));
        }
        blocks.push((start, raw.data, raw.dims));
        expected = offset + length;
    }
    if data_start as u64 + expected != bytes.len() as u64 {
        return Err(Error::format(
            data_start + expected as usize,
            "trailing bytes after last block",
        ));
    }
    Ok((manifest, blocks))
}

fn materialize<T: Scalar>(manifest: &BundleManifest, blocks: Blocks) -> Result<RepSfNet<T>> {
    let mut model = build_model::<T>(&manifest.config)?;
    if manifest.merged {
        model.reparameterize()?;
        model.strip_branches()?;
    }
    let mut by_name: HashMap<&str, (usize, TensorData, Vec<usize>)> = HashMap::new();
    for (entry, block) in manifest.params.iter().zip(blocks) {
        let start = block.0;
        if by_name.insert(&entry.name, block).is_some() {
            return Err(Error::format(start, format!("duplicate entry `{}`", entry.name)));
        }
    }
    let total = by_name.len();
    let mut used = 0;
    load_from(&mut model, |name, dims| {
        let (start, data, stored) = by_name
            .remove(name)
            .ok_or_else(|| Error::format(PREFIX_LEN, format!("missing parameter `{name}`")))?;
        if stored != dims {
            return Err(Error::format(
                start,
                format!("`{name}` has dims {stored:?}, model expects {dims:?}"),
            ));
        }
        used += 1;
        Ok(data.to_vec())
    })
    .map_err(|e| match e {
        Error::Format { .. } => e,
        other => Error::format(PREFIX_LEN, format!("parameters rejected: {other}")),
    })?;
    if used != total {
        let extra = by_name.keys().next().copied().unwrap_or_default();
        return Err(Error::format(PREFIX_LEN, format!("unused manifest entry `{extra}`")));
    }
    Ok(model)
}

pub fn decode_bundle(bytes: &[u8]) -> Result<(BundleManifest, AnyModel)> {
    let (manifest, blocks) = parse_container(bytes)?;
    let model = match manifest.dtype {
        DType::F32 => AnyModel::F32(materialize(&manifest, blocks)?),
        DType::F64 => AnyModel::F64(materialize(&manifest, blocks)?),
    };
    Ok((manifest, model))
}

pub fn save_bundle<T: Scalar>(path: impl AsRef<Path>, model: &RepSfNet<T>) -> Result<()> {
    std::fs::write(path, encode_bundle(model)?)?;
    Ok(())
}

pub fn load_bundle(path: impl AsRef<Path>) -> Result<(BundleManifest, AnyModel)> {
    decode_bundle(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RepSfNet<f32> {
        build_model(&ModelConfig::tiny(8)).unwrap()
    }

    fn bits<T: Scalar>(m: &RepSfNet<T>) -> Vec<(String, Vec<u64>)> {
        let mut out = Vec::new();
        m.visit("", &mut |name, _, data, _| {
            out.push((name.to_string(), data.iter().map(|v| v.as_f64().to_bits()).collect()));
        });
        out
    }

    #[test]
    fn branch_and_merged_round_trip() {
        let m = tiny();
        let bytes = encode_bundle(&m).unwrap();
        let (manifest, back) = decode_bundle(&bytes).unwrap();
        assert!(!manifest.merged);
        assert_eq!(manifest.dtype, DType::F32);
        let back = back.into_model::<f32>();
        assert_eq!(bits(&back), bits(&m));
        assert_eq!(encode_bundle(&back).unwrap(), bytes);

        let mut merged = m.clone();
        merged.reparameterize().unwrap();
        merged.strip_branches().unwrap();
        let bytes = encode_bundle(&merged).unwrap();
        let (manifest, back) = decode_bundle(&bytes).unwrap();
        assert!(manifest.merged);
        let back = back.into_model::<f32>();
        assert!(back.is_merged_only());
        assert_eq!(bits(&back), bits(&merged));
    }

    #[test]
    fn f64_bundle_keeps_precision() {
        let m: RepSfNet<f64> = build_model(&ModelConfig::tiny(8)).unwrap();
        let (_, back) = decode_bundle(&encode_bundle(&m).unwrap()).unwrap();
        assert_eq!(back.dtype(), DType::F64);
        assert_eq!(bits(&back.into_model::<f64>()), bits(&m));
    }

    #[test]
    fn payload_flip_is_caught_by_checksum() {
        let mut bytes = encode_bundle(&tiny()).unwrap();
        let last = bytes.len() - 3;
        bytes[last] ^= 0x10;
        assert!(matches!(decode_bundle(&bytes), Err(Error::Format { .. })));
        bytes.truncate(10);
        assert!(matches!(decode_bundle(&bytes), Err(Error::Format { offset: 10, .. })));
    }
}
