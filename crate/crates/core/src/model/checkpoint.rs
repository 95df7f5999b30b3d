//! Binary container for named f32 tensors behind an 8-byte magic and a
//! JSON header.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::{Checkpoint, ModelConfig, ModelError};
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LDRCKPT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct DirEntry {
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
}

/// Serializes `tensors` after a header holding `fields` plus the tensor
/// directory under `"tensors"`.
pub fn encode_tensor_file(
    magic: &[u8; 8],
    mut fields: Map<String, Value>,
    tensors: &BTreeMap<String, Tensor<f32>>,
) -> Vec<u8> {
    let mut dir = BTreeMap::new();
    let mut offset = 0u64;
    for (name, t) in tensors {
        let length = (t.len() * 4) as u64;
        dir.insert(
            name.clone(),
            DirEntry {
                dtype: "f32".into(),
                shape: t.shape().to_vec(),
                offset,
                length,
            },
        );
        offset += length;
    }
    fields.insert(
        "tensors".into(),
        serde_json::to_value(&dir).expect("directory serializes"),
    );
    let header = serde_json::to_vec(&Value::Object(fields)).expect("header serializes");
    let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
    out.extend_from_slice(magic);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for t in tensors.values() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Inverse of [`encode_tensor_file`]: header fields (without the directory)
/// and the tensors.
pub fn decode_tensor_file(
    magic: &[u8; 8],
    bytes: &[u8],
) -> Result<(Map<String, Value>, BTreeMap<String, Tensor<f32>>), ModelError> {
    let fmt = |m: String| ModelError::Format(m);
    if bytes.len() < 16 || &bytes[..8] != magic {
        return Err(fmt(format!(
            "bad magic, expected {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body_start = 16usize
        .checked_add(hlen)
        .filter(|e| *e <= bytes.len())
        .ok_or_else(|| fmt("header length exceeds file size".into()))?;
    let mut fields: Map<String, Value> = serde_json::from_slice(&bytes[16..body_start])
        .map_err(|e| fmt(format!("header is not valid JSON: {e}")))?;
    let dir: BTreeMap<String, DirEntry> = fields
        .remove("tensors")
        .map(serde_json::from_value)
        .transpose()
        .map_err(|e| fmt(format!("bad tensor directory: {e}")))?
        .ok_or_else(|| fmt("header has no tensor directory".into()))?;
    let body = &bytes[body_start..];
    let mut tensors = BTreeMap::new();
    for (name, e) in dir {
        if e.dtype != "f32" {
            return Err(fmt(format!("tensor `{name}` has unsupported dtype {}", e.dtype)));
        }
        let count: usize = e.shape.iter().product();
        let (start, len) = (e.offset as usize, e.length as usize);
        if len != count * 4 || start.checked_add(len).is_none_or(|end| end > body.len()) {
            return Err(fmt(format!("tensor `{name}` payload out of bounds or truncated")));
        }
        let data = body[start..start + len]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.insert(name, Tensor::new(e.shape, data)?);
    }
    Ok((fields, tensors))
}

pub fn write_tensor_file(
    path: &Path,
    magic: &[u8; 8],
    fields: Map<String, Value>,
    tensors: &BTreeMap<String, Tensor<f32>>,
) -> Result<(), ModelError> {
    fs::write(path, encode_tensor_file(magic, fields, tensors))?;
    Ok(())
}

pub fn read_tensor_file(
    path: &Path,
    magic: &[u8; 8],
) -> Result<(Map<String, Value>, BTreeMap<String, Tensor<f32>>), ModelError> {
    decode_tensor_file(magic, &fs::read(path)?)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut fields = Map::new();
        fields.insert("format_version".into(), Value::from(self.format_version));
        fields.insert(
            "config".into(),
            serde_json::to_value(&self.config).expect("config serializes"),
        );
        fields.insert("pruned".into(), Value::Bool(self.pruned));
        if !self.meta.is_null() {
            fields.insert("meta".into(), self.meta.clone());
        }
        encode_tensor_file(CHECKPOINT_MAGIC, fields, &self.tensors)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let (mut fields, tensors) = decode_tensor_file(CHECKPOINT_MAGIC, bytes)?;
        let format_version = fields
            .get("format_version")
            .and_then(Value::as_u64)
            .ok_or_else(|| ModelError::Format("missing format_version".into()))?
            as u32;
        if format_version != FORMAT_VERSION {
            return Err(ModelError::Format(format!(
                "unsupported format_version {format_version}"
            )));
        }
        let config: ModelConfig = fields
            .remove("config")
            .map(serde_json::from_value)
            .transpose()
            .map_err(|e| ModelError::Format(format!("bad config: {e}")))?
            .ok_or_else(|| ModelError::Format("missing config".into()))?;
        let pruned = fields.get("pruned").and_then(Value::as_bool).unwrap_or(false);
        let meta = fields.remove("meta").unwrap_or(Value::Null);
        let ckpt = Checkpoint {
            config,
            tensors,
            format_version,
            pruned,
            meta,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), ModelError> {
    fs::write(path, ckpt.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, ModelError> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, prune_for_inference};

    fn cfg() -> ModelConfig {
        ModelConfig {
            alpha: 0.37,
            stage_channels: [8, 8, 8, 16, 16],
            tail_channels: 24,
            fused_width: 12,
            input_hw: 32,
            ..ModelConfig::desk()
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.ckpt");
        let b = dir.path().join("b.ckpt");
        let ckpt = build_model(&cfg(), 3).unwrap();
        save_checkpoint(&ckpt, &a).unwrap();
        let loaded = load_checkpoint(&a).unwrap();
        assert_eq!(loaded, ckpt);
        save_checkpoint(&loaded, &b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    }

    #[test]
    fn layout_starts_with_magic_and_header() {
        let bytes = build_model(&cfg(), 0).unwrap().to_bytes();
        assert_eq!(&bytes[..8], b"LDRCKPT1");
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header: Value = serde_json::from_slice(&bytes[16..16 + hlen]).unwrap();
        assert_eq!(header["format_version"], 1);
        assert_eq!(header["config"]["n_points"], 28);
        let first = &header["tensors"]["fusion.proj0.weight"];
        assert_eq!(first["offset"], 0);
        assert_eq!(first["dtype"], "f32");
    }

    #[test]
    fn random_tensors_round_trip_bitwise() {
        let mut ckpt = build_model(&cfg(), 1).unwrap();
        let mut state = 0x9e3779b97f4a7c15u64;
        for t in ckpt.tensors.values_mut() {
            for v in t.data_mut() {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                *v = f32::from_bits((state >> 32) as u32 & 0xff7f_ffff);
            }
        }
        let back = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
        for (name, t) in &ckpt.tensors {
            let bits = |x: &Tensor<f32>| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(t), bits(&back.tensors[name]), "{name}");
        }
    }

    #[test]
    fn meta_round_trips() {
        let mut ckpt = build_model(&cfg(), 2).unwrap();
        ckpt.meta = serde_json::json!({"command": "train", "flags": {"seed": 4}});
        assert_eq!(Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap(), ckpt);
    }

    #[test]
    fn pruned_flag_survives() {
        let p = prune_for_inference(&build_model(&cfg(), 1).unwrap()).unwrap();
        let back = Checkpoint::from_bytes(&p.to_bytes()).unwrap();
        assert!(back.pruned);
        assert_eq!(back, p);
    }

    #[test]
    fn corrupt_inputs_fail() {
        let bytes = build_model(&cfg(), 0).unwrap().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(ModelError::Format(_))));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 4]).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..10]).is_err());
        let mut huge = bytes.clone();
        huge[8..16].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(Checkpoint::from_bytes(&huge).is_err());
    }
}
