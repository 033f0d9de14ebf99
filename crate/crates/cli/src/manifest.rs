//! Run manifests: what was run, on which inputs, and what it produced.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};
use snf_core::checkpoint::write_atomic;
use snf_core::Error;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    /// Parsed specs after flag overrides.
    pub config: Value,
    pub seed: u64,
    pub started: String,
    pub finished: Option<String>,
    pub status: String,
    /// Outputs, relative to the run directory.
    pub artifacts: Vec<String>,
    /// Input path to content hash.
    pub inputs: BTreeMap<String, String>,
    /// Hash over all input hashes, in path order.
    pub input_hash: String,
    #[serde(skip)]
    dir: PathBuf,
}

/// Object hash in git's SHA-256 form: `sha256("blob <len>\0" ++ bytes)`.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

impl RunManifest {
    /// Hash `inputs` and write the manifest into `dir` before any work runs.
    pub fn begin(dir: &Path, command: &str, config: Value, seed: u64, inputs: &[&Path]) -> Result<Self, Error> {
        std::fs::create_dir_all(dir)?;
        let mut hashed = BTreeMap::new();
        for p in inputs {
            hashed.insert(p.display().to_string(), blob_hash(&crate::specs::read(p)?));
        }
        let mut all = Sha256::new();
        for (p, h) in &hashed {
            all.update(p.as_bytes());
            all.update([0]);
            all.update(h.as_bytes());
        }
        let m = RunManifest {
            command: command.to_string(),
            argv: std::env::args().collect(),
            config,
            seed,
            started: chrono::Utc::now().to_rfc3339(),
            finished: None,
            status: "running".into(),
            artifacts: Vec::new(),
            inputs: hashed,
            input_hash: hex::encode(all.finalize()),
            dir: dir.to_path_buf(),
        };
        m.write()?;
        Ok(m)
    }

    pub fn add(&mut self, artifact: &str) {
        if !self.artifacts.iter().any(|a| a == artifact) {
            self.artifacts.push(artifact.to_string());
        }
    }

    pub fn finish(&mut self, status: &str) -> Result<(), Error> {
        self.finished = Some(chrono::Utc::now().to_rfc3339());
        self.status = status.to_string();
        self.write()
    }

    fn write(&self) -> Result<(), Error> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        write_atomic(&self.dir.join(MANIFEST_FILE), text.as_bytes())
    }
}
