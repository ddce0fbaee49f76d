//! Binary checkpoint format for trained weights.
//!
//! Layout: an 8-byte magic `TDCKPT01`, a little-endian u64 giving the
//! length of a JSON manifest, the manifest itself, then all weight
//! values as little-endian f64 concatenated in manifest order. The
//! manifest records the training iteration, the full configuration and
//! its hash, and the name/shape of every weight, so a checkpoint is
//! self-describing and refuses to load under a different configuration.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::util::write_atomic;

const MAGIC: &[u8; 8] = b"TDCKPT01";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    iteration: u64,
    config_hash: String,
    config: RunConfig,
    weights: Vec<WeightEntry>,
}

#[derive(Serialize, Deserialize)]
struct WeightEntry {
    name: String,
    shape: Vec<usize>,
}

/// A set of named weights plus the configuration that shaped them.
#[derive(Debug)]
pub struct Checkpoint {
    pub iteration: u64,
    pub config: RunConfig,
    /// Name -> (shape, values), ordered by name.
    pub weights: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = Vec::with_capacity(self.weights.len());
        let mut payload_len = 0usize;
        for (name, (shape, values)) in &self.weights {
            debug_assert_eq!(shape.iter().product::<usize>(), values.len());
            entries.push(WeightEntry { name: name.clone(), shape: shape.clone() });
            payload_len += values.len() * 8;
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            iteration: self.iteration,
            config_hash: self.config.hash(),
            config: self.config.clone(),
            weights: entries,
        };
        let manifest_bytes = serde_json::to_vec(&manifest).expect("manifest serializes");

        let mut out = Vec::with_capacity(16 + manifest_bytes.len() + payload_len);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest_bytes);
        for (_, (_, values)) in &self.weights {
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let corrupt = |msg: &str| Error::CorruptCheckpoint(msg.to_string());
        if bytes.len() < 16 {
            return Err(corrupt("file shorter than header"));
        }
        if &bytes[..8] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let payload_start = 16usize
            .checked_add(manifest_len)
            .ok_or_else(|| corrupt("manifest length overflows"))?;
        if bytes.len() < payload_start {
            return Err(corrupt("truncated manifest"));
        }
        let manifest: Manifest = serde_json::from_slice(&bytes[16..payload_start])
            .map_err(|e| Error::CorruptCheckpoint(format!("bad manifest: {e}")))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::CorruptCheckpoint(format!(
                "unsupported format version {}",
                manifest.format_version
            )));
        }
        manifest.config.validate()?;
        if manifest.config.hash() != manifest.config_hash {
            return Err(corrupt("config hash does not match embedded config"));
        }

        let total: usize = manifest
            .weights
            .iter()
            .map(|w| w.shape.iter().product::<usize>())
            .sum();
        let expected_len = payload_start + total * 8;
        if bytes.len() != expected_len {
            return Err(Error::CorruptCheckpoint(format!(
                "payload is {} bytes, manifest implies {}",
                bytes.len() - payload_start,
                total * 8
            )));
        }

        let mut weights = BTreeMap::new();
        let mut offset = payload_start;
        for entry in &manifest.weights {
            let n = entry.shape.iter().product::<usize>();
            let mut values = Vec::with_capacity(n);
            for _ in 0..n {
                values.push(f64::from_le_bytes(bytes[offset..offset + 8].try_into().unwrap()));
                offset += 8;
            }
            if weights.insert(entry.name.clone(), (entry.shape.clone(), values)).is_some() {
                return Err(Error::CorruptCheckpoint(format!(
                    "duplicate weight name {}",
                    entry.name
                )));
            }
        }
        Ok(Checkpoint { iteration: manifest.iteration, config: manifest.config, weights })
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }

    /// Load and insist the checkpoint was produced by `expected`.
    pub fn load_for_config(path: &Path, expected: &RunConfig) -> Result<Checkpoint> {
        let ckpt = Self::load(path)?;
        let expected_hash = expected.hash();
        let found = ckpt.config.hash();
        if found != expected_hash {
            return Err(Error::ConfigHashMismatch { expected: expected_hash, found });
        }
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut weights = BTreeMap::new();
        weights.insert("a.weight".to_string(), (vec![2, 2], vec![1.0, -2.0, 0.5, 3.25]));
        weights.insert("b.bias".to_string(), (vec![3], vec![0.0, 1e-9, -7.0]));
        Checkpoint { iteration: 42, config: RunConfig::default(), weights }
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        let ckpt = sample();
        let bytes = ckpt.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.iteration, 42);
        assert_eq!(back.weights, ckpt.weights);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ckpt = sample();
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.weights, ckpt.weights);
    }

    #[test]
    fn truncation_is_detected() {
        let bytes = sample().to_bytes();
        for cut in [4usize, 12, 20, bytes.len() - 1] {
            let err = Checkpoint::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(
                matches!(err, Error::CorruptCheckpoint(_)),
                "cut at {cut} gave {err}"
            );
        }
    }

    #[test]
    fn bad_magic_is_detected() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bytes).unwrap_err(),
            Error::CorruptCheckpoint(_)
        ));
    }

    #[test]
    fn config_mismatch_reports_both_hashes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        sample().save(&path).unwrap();

        let mut other = RunConfig::default();
        other.pyramid_channels = 64;
        let err = Checkpoint::load_for_config(&path, &other).unwrap_err();
        match err {
            Error::ConfigHashMismatch { expected, found } => {
                assert_eq!(expected, other.hash());
                assert_eq!(found, RunConfig::default().hash());
                assert_ne!(expected, found);
            }
            e => panic!("expected hash mismatch, got {e}"),
        }
        // The message shows both hashes so the operator can see which
        // side is stale.
        let msg = Error::ConfigHashMismatch {
            expected: "aaa".into(),
            found: "bbb".into(),
        }
        .to_string();
        assert!(msg.contains("aaa") && msg.contains("bbb"));
    }

    #[test]
    fn matching_config_loads() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        sample().save(&path).unwrap();
        let back = Checkpoint::load_for_config(&path, &RunConfig::default()).unwrap();
        assert_eq!(back.iteration, 42);
    }
}
