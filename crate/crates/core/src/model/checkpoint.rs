//! Checkpoint files.
//!
//! Layout: `HIEN`, a version byte, `\n`, one line of UTF-8 JSON manifest,
//! then every tensor as little-endian binary32, in manifest order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HIEN";
pub const CHECKPOINT_VERSION: u8 = 1;

const HEADER_LEN: usize = 6;

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    config_hash: String,
    tensors: Vec<TensorEntry>,
    blob_bytes: usize,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the blob.
    offset: usize,
}

/// Serialize a model; values are rounded to binary32.
pub fn checkpoint_bytes(model: &Model) -> Vec<u8> {
    let mut tensors = Vec::with_capacity(model.store.len());
    let mut offset = 0;
    for e in model.store.entries() {
        tensors.push(TensorEntry {
            name: e.name.clone(),
            shape: e.value.shape().to_vec(),
            offset,
        });
        offset += e.value.numel() * 4;
    }
    let manifest = Manifest {
        config: model.config.clone(),
        config_hash: model.config.hash(),
        tensors,
        blob_bytes: offset,
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");

    let mut out = Vec::with_capacity(HEADER_LEN + json.len() + 1 + offset);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.push(CHECKPOINT_VERSION);
    out.push(b'\n');
    out.extend_from_slice(&json);
    out.push(b'\n');
    for e in model.store.entries() {
        for &v in e.value.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

/// Parse a checkpoint. Nothing is returned unless every field checks out.
pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::format("magic", 0, "expected HIEN"));
    }
    match bytes.get(4) {
        Some(&CHECKPOINT_VERSION) => {}
        Some(v) => return Err(Error::format("version", 4, format!("unsupported version {v}"))),
        None => return Err(Error::format("version", 4, "file ends before version byte")),
    }
    if bytes.get(5) != Some(&b'\n') {
        return Err(Error::format("header", 5, "expected newline after version"));
    }
    let rest = &bytes[HEADER_LEN..];
    let nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format("manifest", HEADER_LEN, "unterminated manifest line"))?;
    let manifest: Manifest = serde_json::from_slice(&rest[..nl])
        .map_err(|e| Error::format("manifest", HEADER_LEN, e.to_string()))?;
    let blob_start = HEADER_LEN + nl + 1;
    let blob = &bytes[blob_start..];

    if manifest.config_hash != manifest.config.hash() {
        return Err(Error::format("config_hash", HEADER_LEN, "does not match the embedded config"));
    }
    if blob.len() != manifest.blob_bytes {
        return Err(Error::format(
            "blob_bytes",
            blob_start,
            format!("manifest declares {} bytes, file holds {}", manifest.blob_bytes, blob.len()),
        ));
    }

    let mut model = Model::build(&manifest.config).map_err(|e| Error::format("config", HEADER_LEN, e.to_string()))?;
    if manifest.tensors.len() != model.store.len() {
        return Err(Error::format(
            "tensors",
            HEADER_LEN,
            format!("expected {} tensors, manifest lists {}", model.store.len(), manifest.tensors.len()),
        ));
    }
    let mut expected_offset = 0;
    for (entry, slot) in manifest.tensors.iter().zip(model.store.entries_mut()) {
        let field = format!("tensors[{}]", entry.name);
        if entry.name != slot.name {
            return Err(Error::format(field, HEADER_LEN, format!("expected tensor {}", slot.name)));
        }
        if entry.shape != slot.value.shape() {
            return Err(Error::format(
                field,
                HEADER_LEN,
                format!("shape {:?}, config implies {:?}", entry.shape, slot.value.shape()),
            ));
        }
        if entry.offset != expected_offset {
            return Err(Error::format(
                field,
                HEADER_LEN,
                format!("offset {}, expected {expected_offset}", entry.offset),
            ));
        }
        let len = slot.value.numel() * 4;
        let raw = blob.get(entry.offset..entry.offset + len).ok_or_else(|| {
            Error::format(field.clone(), blob_start + entry.offset, "tensor runs past end of blob")
        })?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        slot.value = Tensor::new(entry.shape.clone(), data)?;
        expected_offset += len;
    }
    if expected_offset != manifest.blob_bytes {
        return Err(Error::format(
            "blob_bytes",
            blob_start,
            format!("tensors cover {expected_offset} bytes, manifest declares {}", manifest.blob_bytes),
        ));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, checkpoint_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}

/// Load, refusing checkpoints written for a different configuration.
pub fn load_checkpoint_for(path: impl AsRef<Path>, config: &ModelConfig) -> Result<Model> {
    let model = load_checkpoint(path)?;
    if model.config.hash() != config.hash() {
        return Err(Error::Config(format!(
            "checkpoint config hash {} does not match expected {}",
            model.config.hash(),
            config.hash()
        )));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::StageSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            input_size: 8,
            stages: vec![StageSpec::new(1, 4, true), StageSpec::new(1, 6, false)],
            head: vec![8, 6, 4],
            ..ModelConfig::hienet_mini()
        }
    }

    fn batch() -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        Tensor::from_fn([2, 8, 8, 3], |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn round_trip_matches_quantized_model() {
        let model = Model::build(&tiny()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.hien");
        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        let q = model.quantized();
        assert_eq!(loaded.predict(&batch()).unwrap(), q.predict(&batch()).unwrap());
        assert_eq!(checkpoint_bytes(&loaded), checkpoint_bytes(&model));
    }

    #[test]
    fn header_is_byte_exact() {
        let bytes = checkpoint_bytes(&Model::build(&tiny()).unwrap());
        assert_eq!(&bytes[..6], b"HIEN\x01\n");
        let nl = bytes[6..].iter().position(|&b| b == b'\n').unwrap();
        let v: serde_json::Value = serde_json::from_slice(&bytes[6..6 + nl]).unwrap();
        assert_eq!(v["tensors"][0]["offset"], 0);
        assert_eq!(v["config"]["input_size"], 8);
    }

    fn field_of(r: Result<Model>) -> String {
        match r {
            Err(Error::Format { field, .. }) => field,
            Err(e) => panic!("expected format error, got {e}"),
            Ok(_) => panic!("expected format error, got a model"),
        }
    }

    #[test]
    fn corrupt_files_name_the_field() {
        let good = checkpoint_bytes(&Model::build(&tiny()).unwrap());

        let mut bad = good.clone();
        bad[0] = b'X';
        assert_eq!(field_of(checkpoint_from_bytes(&bad)), "magic");

        let mut bad = good.clone();
        bad[4] = 2;
        assert_eq!(field_of(checkpoint_from_bytes(&bad)), "version");

        assert_eq!(field_of(checkpoint_from_bytes(&good[..good.len() - 3])), "blob_bytes");
        assert_eq!(field_of(checkpoint_from_bytes(&good[..20])), "manifest");

        let mut long = good.clone();
        long.extend_from_slice(&[0, 0, 0, 0]);
        assert_eq!(field_of(checkpoint_from_bytes(&long)), "blob_bytes");

        let nl = 6 + good[6..].iter().position(|&b| b == b'\n').unwrap();
        let manifest = std::str::from_utf8(&good[6..nl]).unwrap().replacen("\"seed\":42", "\"seed\":43", 1);
        let mut bad = good[..6].to_vec();
        bad.extend_from_slice(manifest.as_bytes());
        bad.extend_from_slice(&good[nl..]);
        assert_eq!(field_of(checkpoint_from_bytes(&bad)), "config_hash");
    }

    #[test]
    fn config_guard() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.hien");
        save_checkpoint(&Model::build(&tiny()).unwrap(), &path).unwrap();
        load_checkpoint_for(&path, &tiny()).unwrap();
        let other = ModelConfig { seed: 5, ..tiny() };
        assert!(matches!(load_checkpoint_for(&path, &other), Err(Error::Config(_))));
    }
}
