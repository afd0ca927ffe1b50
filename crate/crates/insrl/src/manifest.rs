//! Run manifest: configuration, seed, input content hashes, per-epoch log.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::Config;
use crate::error::Result;
use crate::model::EpochStats;

#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub config: Config,
    pub seed: u64,
    /// Content (SHA-256) hash per input file, keyed by path.
    pub input_hashes: BTreeMap<String, String>,
    pub epochs: Vec<EpochStats>,
}

impl RunManifest {
    pub fn new(config: Config, seed: u64) -> Self {
        RunManifest {
            config,
            seed,
            input_hashes: BTreeMap::new(),
            epochs: Vec::new(),
        }
    }

    pub fn hash_input(&mut self, path: &Path) -> Result<()> {
        self.input_hashes
            .insert(path.display().to_string(), content_hash(path)?);
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }
}

/// SHA-256 of a file's bytes, hex-encoded.
pub fn content_hash(path: &Path) -> Result<String> {
    let mut f = File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    let digest = hasher.finalize();
    let mut hex = String::with_capacity(64);
    for b in digest {
        hex.push_str(&format!("{b:02x}"));
    }
    Ok(hex)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn content_hash_is_stable_and_sensitive() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("input.txt");
        std::fs::write(&path, "hello").unwrap();
        let a = content_hash(&path).unwrap();
        let b = content_hash(&path).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 64);
        std::fs::write(&path, "hello!").unwrap();
        assert_ne!(a, content_hash(&path).unwrap());
    }

    #[test]
    fn manifest_serializes_with_hashes() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("data.jsonl");
        std::fs::write(&input, "{}\n").unwrap();
        let mut m = RunManifest::new(Config::default(), 42);
        m.hash_input(&input).unwrap();
        let out = dir.path().join("manifest.json");
        m.write(&out).unwrap();
        let text = std::fs::read_to_string(&out).unwrap();
        assert!(text.contains("\"seed\": 42"));
        assert!(text.contains("data.jsonl"));
    }
}
