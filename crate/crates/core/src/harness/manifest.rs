//! Run manifests: what was run, with which configuration and seeds, and the
//! SHA-256 digest of every file read or written.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;

pub fn digest_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn digest_file(path: &Path) -> Result<String> {
    Ok(digest_bytes(&std::fs::read(path)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub subcommand: String,
    /// Arguments after the global flags, enough to re-run the command.
    pub args: Vec<String>,
    pub config_digest: String,
    /// The dumped configuration the digest covers.
    pub config: String,
    pub seeds: Vec<u64>,
    /// File name (relative to the output directory) → digest.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub wall_time_secs: f64,
}

impl Manifest {
    pub fn new(subcommand: &str, args: Vec<String>, config: String, seeds: Vec<u64>) -> Self {
        Manifest {
            subcommand: subcommand.to_string(),
            args,
            config_digest: digest_bytes(config.as_bytes()),
            config,
            seeds,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            wall_time_secs: 0.0,
        }
    }

    pub fn add_input(&mut self, dir: &Path, name: &str) -> Result<()> {
        self.inputs.insert(name.to_string(), digest_file(&dir.join(name))?);
        Ok(())
    }

    pub fn add_output(&mut self, dir: &Path, name: &str) -> Result<()> {
        self.outputs.insert(name.to_string(), digest_file(&dir.join(name))?);
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(
            digest_bytes(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn manifest_round_trip() {
        let dir = std::env::temp_dir().join(format!("kvr-manifest-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        std::fs::write(dir.join("a.txt"), b"abc").unwrap();
        let mut m = Manifest::new("gen", vec!["x".into()], "k = 1\n".into(), vec![3]);
        m.add_output(&dir, "a.txt").unwrap();
        m.save(&dir.join("m.json")).unwrap();
        let back = Manifest::load(&dir.join("m.json")).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.outputs["a.txt"], digest_bytes(b"abc"));
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
