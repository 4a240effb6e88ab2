//! Run manifests: what was run, with which settings, and the SHA-256 of every
//! artifact it produced.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_err, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<String>,
    /// Artifact path → hex SHA-256.
    pub outputs: BTreeMap<String, String>,
    pub wall_clock_seconds: f64,
}

fn hex(digest: &[u8]) -> String {
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn hash_bytes(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> Result<String> {
    Ok(hash_bytes(&fs::read(path).map_err(io_err(path))?))
}

/// One digest over the concatenated contents of `paths`.
pub fn hash_files(paths: &[PathBuf]) -> Result<String> {
    let mut h = Sha256::new();
    for p in paths {
        h.update(fs::read(p).map_err(io_err(p))?);
    }
    Ok(hex(&h.finalize()))
}

/// Writes `bytes` to a sibling temp file, syncs it and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(bytes).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value) -> Self {
        Self {
            command: command.to_string(),
            config,
            seeds: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: BTreeMap::new(),
            wall_clock_seconds: 0.0,
        }
    }

    pub fn record_output(&mut self, path: &Path) -> Result<()> {
        let digest = hash_file(path)?;
        self.outputs.insert(path.display().to_string(), digest);
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }

    /// Re-hashes every recorded output.
    pub fn verify(&self) -> Result<()> {
        for (path, expected) in &self.outputs {
            let path = PathBuf::from(path);
            let found = hash_file(&path)?;
            if &found != expected {
                return Err(Error::HashMismatch {
                    path,
                    expected: expected.clone(),
                    found,
                });
            }
        }
        Ok(())
    }
}

/// `<artifact>.manifest.json`.
pub fn manifest_path_for(artifact: &Path) -> PathBuf {
    let mut p = artifact.as_os_str().to_owned();
    p.push(".manifest.json");
    PathBuf::from(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_known_vector() {
        assert_eq!(
            hash_bytes(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn verify_detects_edits() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("a.bin");
        fs::write(&out, b"one").unwrap();
        let mut m = RunManifest::new("test", serde_json::json!({}));
        m.record_output(&out).unwrap();
        let mp = manifest_path_for(&out);
        m.write(&mp).unwrap();
        let back = RunManifest::read(&mp).unwrap();
        assert_eq!(back, m);
        back.verify().unwrap();
        fs::write(&out, b"two").unwrap();
        assert!(matches!(back.verify(), Err(Error::HashMismatch { .. })));
    }
}
