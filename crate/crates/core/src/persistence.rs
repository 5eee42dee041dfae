//! Checkpoints, mask files and the binary container shared by stats and
//! mask files.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes   e.g. "MOEPSTAT" or "MOEPMASK"
//! version    u32
//! json_len   u64
//! manifest   json_len bytes of UTF-8 JSON (declares "payload_bytes")
//! payload    raw bytes (f64 values or packed bitmaps)
//! crc32      u32 over every preceding byte
//! ```
//!
//! A checkpoint is a directory holding `manifest.json`, `tensors.bin`
//! (concatenated little-endian f64) and optionally `masks.bin`. Binaries are
//! renamed into place before the manifest, so a manifest never points at a
//! partially written blob.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::model::{ExpertTarget, MoEModel, ModelConfig};
use crate::pruning::{MaskSet, SparsityMask};

pub const CONTAINER_VERSION: u32 = 1;
pub const CHECKPOINT_VERSION: u32 = 1;
pub const MASK_MAGIC: &[u8; 8] = b"MOEPMASK";

const MANIFEST: &str = "manifest.json";
const TENSORS: &str = "tensors.bin";
const MASKS: &str = "masks.bin";

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::storage(path, e)
    })
}

pub fn f64s_to_bytes(values: &[f64], out: &mut Vec<u8>) {
    out.reserve(values.len() * 8);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn bytes_to_f64s(bytes: &[u8]) -> Result<Vec<f64>> {
    if !bytes.len().is_multiple_of(8) {
        return Err(Error::Format(format!(
            "{} bytes is not a whole number of f64 values",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

pub fn encode_container(magic: &[u8; 8], manifest: &Value, payload: &[u8]) -> Vec<u8> {
    let mut manifest = manifest.clone();
    manifest["payload_bytes"] = json!(payload.len());
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(8 + 4 + 8 + json.len() + payload.len() + 4);
    out.extend_from_slice(magic);
    out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(payload);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn write_container(
    path: &Path,
    magic: &[u8; 8],
    manifest: &Value,
    payload: &[u8],
) -> Result<()> {
    write_atomic(path, &encode_container(magic, manifest, payload))
}

/// Parses and verifies a container. Returns the manifest and the payload.
pub fn decode_container(path: &Path, bytes: &[u8], magic: &[u8; 8]) -> Result<(Value, Vec<u8>)> {
    let truncated = || Error::Format(format!("{} is truncated", path.display()));
    if bytes.len() < 8 + 4 + 8 + 4 {
        return Err(truncated());
    }
    if &bytes[..8] != magic {
        return Err(Error::Format(format!(
            "{} does not start with magic {:?}",
            path.display(),
            String::from_utf8_lossy(magic)
        )));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CONTAINER_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CONTAINER_VERSION,
        });
    }
    let json_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let json_end = 20usize.checked_add(json_len).ok_or_else(truncated)?;
    if json_end + 4 > bytes.len() {
        return Err(truncated());
    }
    let manifest: Value = serde_json::from_slice(&bytes[20..json_end])
        .map_err(|e| Error::Format(format!("{}: bad manifest: {e}", path.display())))?;
    let declared = manifest["payload_bytes"]
        .as_u64()
        .ok_or_else(|| Error::Format("manifest lacks payload_bytes".into()))?
        as usize;
    if bytes.len() != json_end + declared + 4 {
        return Err(truncated());
    }
    let body_end = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[body_end..].try_into().unwrap());
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(Error::Checksum {
            path: path.to_path_buf(),
            stored,
            computed,
        });
    }
    Ok((manifest, bytes[json_end..body_end].to_vec()))
}

pub fn read_container(path: &Path, magic: &[u8; 8]) -> Result<(Value, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::storage(path, e))?;
    decode_container(path, &bytes, magic)
}

#[derive(Debug, Serialize, Deserialize)]
struct MaskEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: usize,
    length: usize,
}

/// Packs bits 8 columns per byte, row-major, least significant bit first.
/// Each mask starts on a byte boundary.
fn pack_bits(keep: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; keep.len().div_ceil(8)];
    for (i, &k) in keep.iter().enumerate() {
        if k {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

fn unpack_bits(bytes: &[u8], n: usize) -> Vec<bool> {
    (0..n).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect()
}

pub fn encode_masks(masks: &MaskSet) -> Vec<u8> {
    let mut payload = Vec::new();
    let mut entries = Vec::with_capacity(masks.len());
    for (target, mask) in masks {
        let bits = pack_bits(mask.keep());
        entries.push(MaskEntry {
            name: target.to_string(),
            rows: mask.rows(),
            cols: mask.cols(),
            offset: payload.len(),
            length: bits.len(),
        });
        payload.extend_from_slice(&bits);
    }
    encode_container(MASK_MAGIC, &json!({ "masks": entries }), &payload)
}

pub fn decode_masks(path: &Path, bytes: &[u8]) -> Result<MaskSet> {
    let (manifest, payload) = decode_container(path, bytes, MASK_MAGIC)?;
    let entries: Vec<MaskEntry> = serde_json::from_value(manifest["masks"].clone())
        .map_err(|e| Error::Format(format!("bad mask index: {e}")))?;
    let mut out = MaskSet::new();
    for e in entries {
        let target: ExpertTarget = e.name.parse()?;
        let n = e.rows * e.cols;
        if e.length != n.div_ceil(8) || e.offset + e.length > payload.len() {
            return Err(Error::Format(format!(
                "mask {} has inconsistent extent",
                e.name
            )));
        }
        let keep = unpack_bits(&payload[e.offset..e.offset + e.length], n);
        out.insert(target, SparsityMask::new(e.rows, e.cols, keep)?);
    }
    Ok(out)
}

pub fn save_masks(masks: &MaskSet, path: &Path) -> Result<()> {
    write_atomic(path, &encode_masks(masks))
}

pub fn load_masks(path: &Path) -> Result<MaskSet> {
    let bytes = fs::read(path).map_err(|e| Error::storage(path, e))?;
    decode_masks(path, &bytes)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub shape: [usize; 2],
    pub offset: usize,
    pub length: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub bytes: usize,
    pub crc32: u32,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, TensorEntry>,
    pub files: BTreeMap<String, FileEntry>,
    /// Free-form provenance, e.g. the effective run configuration.
    #[serde(default)]
    pub metadata: Value,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: MoEModel,
    pub masks: Option<MaskSet>,
    pub metadata: Value,
}

/// Every masked-out weight must be exactly zero.
pub fn verify_masks(model: &MoEModel, masks: &MaskSet) -> Result<()> {
    for (target, mask) in masks {
        if target.layer >= model.config.n_layers || target.expert >= model.config.n_experts {
            return Err(Error::MaskConsistency(format!(
                "mask for {target} does not match the model"
            )));
        }
        let w = model.expert_matrix(*target);
        if w.shape() != (mask.rows(), mask.cols()) {
            return Err(Error::MaskConsistency(format!(
                "mask for {target} is {}x{}, weight is {}x{}",
                mask.rows(),
                mask.cols(),
                w.rows(),
                w.cols()
            )));
        }
        if let Some(i) = w
            .data()
            .iter()
            .zip(mask.keep())
            .position(|(&v, &k)| !k && v != 0.0)
        {
            return Err(Error::MaskConsistency(format!(
                "{target}: masked weight at ({}, {}) is {}",
                i / mask.cols(),
                i % mask.cols(),
                w.data()[i]
            )));
        }
    }
    Ok(())
}

pub fn save_checkpoint(
    model: &MoEModel,
    masks: Option<&MaskSet>,
    dir: &Path,
    metadata: Value,
) -> Result<()> {
    if let Some(m) = masks {
        verify_masks(model, m)?;
    }
    fs::create_dir_all(dir).map_err(|e| Error::storage(dir, e))?;

    let mut blob = Vec::with_capacity(model.parameter_count() * 8);
    let mut tensors = BTreeMap::new();
    for (name, m) in model.params() {
        let offset = blob.len();
        f64s_to_bytes(m.data(), &mut blob);
        tensors.insert(
            name,
            TensorEntry {
                shape: [m.rows(), m.cols()],
                offset,
                length: blob.len() - offset,
            },
        );
    }
    let mut files = BTreeMap::new();
    write_atomic(&dir.join(TENSORS), &blob)?;
    files.insert(
        TENSORS.to_string(),
        FileEntry {
            bytes: blob.len(),
            crc32: crc32fast::hash(&blob),
        },
    );
    let mask_path = dir.join(MASKS);
    match masks {
        Some(m) => {
            let bytes = encode_masks(m);
            write_atomic(&mask_path, &bytes)?;
            files.insert(
                MASKS.to_string(),
                FileEntry {
                    bytes: bytes.len(),
                    crc32: crc32fast::hash(&bytes),
                },
            );
        }
        None => {
            if mask_path.exists() {
                fs::remove_file(&mask_path).map_err(|e| Error::storage(&mask_path, e))?;
            }
        }
    }
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_VERSION,
        config: model.config.clone(),
        tensors,
        files,
        metadata,
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    write_atomic(&dir.join(MANIFEST), &json)
}

fn read_checked(dir: &Path, name: &str, entry: &FileEntry) -> Result<Vec<u8>> {
    let path: PathBuf = dir.join(name);
    let bytes = fs::read(&path).map_err(|e| Error::storage(&path, e))?;
    let computed = crc32fast::hash(&bytes);
    if computed != entry.crc32 || bytes.len() != entry.bytes {
        return Err(Error::Checksum {
            path,
            stored: entry.crc32,
            computed,
        });
    }
    Ok(bytes)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest_path = dir.join(MANIFEST);
    let raw = fs::read(&manifest_path).map_err(|e| Error::storage(&manifest_path, e))?;
    let manifest: CheckpointManifest = serde_json::from_slice(&raw)
        .map_err(|e| Error::Format(format!("{}: {e}", manifest_path.display())))?;
    if manifest.format_version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: manifest.format_version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let tensors_entry = manifest
        .files
        .get(TENSORS)
        .ok_or_else(|| Error::Format("manifest does not list tensors.bin".into()))?;
    let blob = read_checked(dir, TENSORS, tensors_entry)?;

    let mut model = MoEModel::new(manifest.config.clone())?;
    let names = model.parameter_names();
    if names.len() != manifest.tensors.len() {
        return Err(Error::Format(format!(
            "manifest indexes {} tensors, model has {}",
            manifest.tensors.len(),
            names.len()
        )));
    }
    for (name, param) in model.params_mut() {
        let entry = manifest
            .tensors
            .get(&name)
            .ok_or_else(|| Error::Format(format!("tensor {name} missing from manifest")))?;
        if entry.shape != [param.rows(), param.cols()] || entry.length != param.len() * 8 {
            return Err(Error::Format(format!("tensor {name} has wrong shape")));
        }
        let bytes = blob
            .get(entry.offset..entry.offset + entry.length)
            .ok_or_else(|| Error::Format(format!("tensor {name} extends past tensors.bin")))?;
        let values = bytes_to_f64s(bytes)?;
        param.data_mut().copy_from_slice(&values);
    }

    let masks = match manifest.files.get(MASKS) {
        Some(entry) if dir.join(MASKS).exists() => {
            let bytes = read_checked(dir, MASKS, entry)?;
            let masks = decode_masks(&dir.join(MASKS), &bytes)?;
            verify_masks(&model, &masks)?;
            Some(masks)
        }
        _ => None,
    };
    Ok(Checkpoint {
        model,
        masks,
        metadata: manifest.metadata,
    })
}
