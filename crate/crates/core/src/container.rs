//! On-disk array container shared by model checkpoints, tokenizer
//! checkpoints, feature shards and mel dumps.
//!
//! A container is a directory holding
//!
//! * `meta.json`: kind, step, free-form config, the trainable-set listing
//!   and a manifest of arrays (name, shape, byte offset, byte length), plus
//!   a SHA-256 of the payload;
//! * `params.bin`: the arrays as little-endian `f64`, concatenated in
//!   manifest order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

pub const FORMAT: &str = "duospeech-container/1";
pub const META_FILE: &str = "meta.json";
pub const DATA_FILE: &str = "params.bin";

pub mod kind {
    pub const DUOLM: &str = "duolm";
    pub const FSQ_TOKENIZER: &str = "fsq-tokenizer";
    pub const FLOWDEC: &str = "flowdec";
    pub const FEATURES: &str = "features";
    pub const MEL: &str = "mel";
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub format: String,
    pub kind: String,
    pub step: u64,
    pub config: serde_json::Value,
    pub trainable: Vec<String>,
    pub arrays: Vec<ArrayEntry>,
    pub sha256: String,
}

/// In-memory form of a container.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub step: u64,
    pub config: serde_json::Value,
    pub params: ParamStore,
    pub trainable: Vec<String>,
}

fn ckpt_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

impl Checkpoint {
    pub fn new(kind: &str, params: ParamStore) -> Self {
        Self {
            kind: kind.to_string(),
            step: 0,
            config: serde_json::Value::Null,
            params,
            trainable: Vec::new(),
        }
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut payload = Vec::with_capacity(self.params.num_values() * 8);
        let mut arrays = Vec::with_capacity(self.params.len());
        for (name, t) in self.params.iter() {
            let offset = payload.len() as u64;
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            arrays.push(ArrayEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
                bytes: payload.len() as u64 - offset,
            });
        }
        let meta = Meta {
            format: FORMAT.to_string(),
            kind: self.kind.clone(),
            step: self.step,
            config: self.config.clone(),
            trainable: self.trainable.clone(),
            arrays,
            sha256: hex(&Sha256::digest(&payload)),
        };
        let data_path = dir.join(DATA_FILE);
        fs::write(&data_path, &payload).map_err(|e| Error::io(&data_path, e))?;
        let meta_path = dir.join(META_FILE);
        let json = serde_json::to_string_pretty(&meta)?;
        fs::write(&meta_path, json).map_err(|e| Error::io(&meta_path, e))?;
        Ok(())
    }

    /// Loads and validates a container. When `expected_kind` is given, a
    /// container of any other kind is rejected.
    pub fn load(dir: impl AsRef<Path>, expected_kind: Option<&str>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta_path = dir.join(META_FILE);
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: Meta =
            serde_json::from_str(&text).map_err(|e| ckpt_err(&meta_path, format!("bad metadata: {e}")))?;
        if meta.format != FORMAT {
            return Err(ckpt_err(dir, format!("unsupported format `{}`", meta.format)));
        }
        if let Some(k) = expected_kind {
            if meta.kind != k {
                return Err(ckpt_err(
                    dir,
                    format!("expected a `{k}` container, found `{}`", meta.kind),
                ));
            }
        }
        let data_path = dir.join(DATA_FILE);
        let payload = fs::read(&data_path).map_err(|e| Error::io(&data_path, e))?;
        if hex(&Sha256::digest(&payload)) != meta.sha256 {
            return Err(ckpt_err(&data_path, "checksum mismatch (corrupted arrays)"));
        }
        let mut params = ParamStore::new();
        let mut expected_offset = 0u64;
        for entry in &meta.arrays {
            let numel: usize = entry.shape.iter().product();
            if entry.offset != expected_offset || entry.bytes != numel as u64 * 8 {
                return Err(ckpt_err(dir, format!("array `{}` has an inconsistent layout", entry.name)));
            }
            let end = (entry.offset + entry.bytes) as usize;
            if end > payload.len() {
                return Err(ckpt_err(dir, format!("array `{}` runs past end of data", entry.name)));
            }
            let values: Vec<f64> = payload[entry.offset as usize..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            if values.iter().any(|v| !v.is_finite()) {
                return Err(ckpt_err(dir, format!("array `{}` holds non-finite values", entry.name)));
            }
            params.insert(entry.name.clone(), Tensor::new(entry.shape.clone(), values)?);
            expected_offset += entry.bytes;
        }
        if expected_offset as usize != payload.len() {
            return Err(ckpt_err(&data_path, "trailing bytes after last array"));
        }
        for name in &meta.trainable {
            if !params.contains(name) {
                return Err(ckpt_err(dir, format!("trainable entry `{name}` has no array")));
            }
        }
        Ok(Self {
            kind: meta.kind,
            step: meta.step,
            config: meta.config,
            params,
            trainable: meta.trainable,
        })
    }

    pub fn config_as<T: serde::de::DeserializeOwned>(&self) -> Result<T> {
        Ok(serde_json::from_value(self.config.clone())?)
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Resolves `path` relative to `root` unless it is absolute.
pub fn resolve(root: &Path, path: &str) -> PathBuf {
    let p = Path::new(path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn sample() -> Checkpoint {
        let mut rng = Rng::new(4);
        let mut params = ParamStore::new();
        params.insert("b", rng.normal_tensor(&[3, 2], 1.0));
        params.insert("a", rng.normal_tensor(&[5], 1.0));
        let mut c = Checkpoint::new(kind::DUOLM, params);
        c.step = 17;
        c.trainable = vec!["a".into()];
        c.config = serde_json::json!({"d_model": 8});
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let c = sample();
        c.save(dir.path()).unwrap();
        let back = Checkpoint::load(dir.path(), Some(kind::DUOLM)).unwrap();
        assert_eq!(back, c);
        for (name, t) in c.params.iter() {
            assert!(t.bit_eq(back.params.get(name).unwrap()));
        }
    }

    #[test]
    fn kind_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = sample();
        c.kind = kind::FSQ_TOKENIZER.into();
        c.save(dir.path()).unwrap();
        let err = Checkpoint::load(dir.path(), Some(kind::DUOLM)).unwrap_err();
        assert!(err.to_string().contains("fsq-tokenizer"), "{err}");
    }

    #[test]
    fn corruption_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        sample().save(dir.path()).unwrap();
        let path = dir.path().join(DATA_FILE);
        let mut bytes = fs::read(&path).unwrap();
        bytes[3] ^= 0x40;
        fs::write(&path, &bytes).unwrap();
        assert!(Checkpoint::load(dir.path(), None).is_err());
        bytes.truncate(bytes.len() - 8);
        fs::write(&path, &bytes).unwrap();
        assert!(Checkpoint::load(dir.path(), None).is_err());
    }
}
