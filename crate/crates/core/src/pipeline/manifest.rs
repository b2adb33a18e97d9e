//! Per-run manifest: everything needed to reproduce a CLI invocation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::PipelineConfig;
use crate::datasets::Split;
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub args: Vec<String>,
    pub seed: u64,
    pub crate_version: String,
    pub config: BTreeMap<String, String>,
    /// Content hash per dataset CSV present under the data root, keyed by file name.
    pub dataset_hashes: BTreeMap<String, String>,
}

/// SHA-256 over `"blob {len}\0"` followed by the content, in the style of git object ids.
pub fn blob_hash(content: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

impl Manifest {
    pub fn new(command: &str, args: &[String], cfg: &PipelineConfig) -> Result<Self> {
        let mut dataset_hashes = BTreeMap::new();
        for split in [Split::Train, Split::Test] {
            let p = split.csv_path(&cfg.data_root);
            if p.is_file() {
                dataset_hashes.insert(format!("{}.csv", split.as_str()), blob_hash(&fs::read(&p)?));
            }
        }
        Ok(Self {
            command: command.into(),
            args: args.to_vec(),
            seed: cfg.seed,
            crate_version: env!("CARGO_PKG_VERSION").into(),
            config: cfg.entries(),
            dataset_hashes,
        })
    }

    pub fn path(out: &Path, command: &str) -> PathBuf {
        out.join(format!("manifest_{command}.json"))
    }

    pub fn write(&self, out: &Path) -> Result<PathBuf> {
        fs::create_dir_all(out)?;
        let p = Self::path(out, &self.command);
        fs::write(&p, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(p)
    }

    /// The configuration this manifest recorded.
    pub fn config(&self) -> Result<PipelineConfig> {
        PipelineConfig::from_entries(&self.config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_hash_of_empty_content() {
        // sha256 of the 7 bytes "blob 0\0"
        let mut h = Sha256::new();
        h.update(b"blob 0\x00");
        let want: String = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
        assert_eq!(blob_hash(b""), want);
        assert_ne!(blob_hash(b"a"), blob_hash(b"b"));
    }

    #[test]
    fn manifest_round_trips_config() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("train.csv"), "sat_path,pano_path\n").unwrap();
        let cfg = PipelineConfig { seed: 9, data_root: dir.path().into(), ..Default::default() };
        let m = Manifest::new("train", &["--stage".into(), "1".into()], &cfg).unwrap();
        assert_eq!(m.dataset_hashes.len(), 1);
        let p = m.write(dir.path()).unwrap();
        let back: Manifest = serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap();
        assert_eq!(back.config().unwrap(), cfg);
    }
}
