//! Output directories and the manifest that describes them.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use hcvp::synth::SynthConfig;
use hcvp::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    /// Resolved configuration, defaults included.
    pub config: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<SynthConfig>,
    pub seed: Value,
    pub out_dir: PathBuf,
    /// `running` until the command finishes, then `complete`.
    pub status: String,
    /// Relative path to SHA-256 of every file the command wrote.
    pub artifacts: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, config: Value, dataset: Option<SynthConfig>, seed: Value, out_dir: &Path) -> Self {
        RunManifest {
            command: command.to_string(),
            args: std::env::args().skip(1).collect(),
            config,
            dataset,
            seed,
            out_dir: out_dir.to_path_buf(),
            status: "running".into(),
            artifacts: BTreeMap::new(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes") + "\n";
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
    }

    /// Hashes the given files and marks the run complete.
    pub fn finish(&mut self, dir: &Path, files: &[PathBuf]) -> Result<()> {
        for f in files {
            let bytes = fs::read(f).map_err(|e| Error::io(f, e))?;
            let rel = f.strip_prefix(dir).unwrap_or(f).to_string_lossy().replace('\\', "/");
            self.artifacts.insert(rel, hex(&Sha256::digest(&bytes)));
        }
        self.status = "complete".into();
        self.write(dir)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Why an output directory cannot be used.
#[derive(Debug)]
pub enum Refusal {
    NotEmpty(PathBuf),
    Io(Error),
}

/// Creates `dir` if needed. A directory that already has entries is only
/// reused with `force`, in which case `stale` entries are removed first.
pub fn prepare(dir: &Path, force: bool, stale: &[&str]) -> std::result::Result<(), Refusal> {
    if dir.exists() {
        let mut entries = fs::read_dir(dir).map_err(|e| Refusal::Io(Error::io(dir, e)))?;
        if entries.next().is_some() {
            if !force {
                return Err(Refusal::NotEmpty(dir.to_path_buf()));
            }
            for name in stale.iter().chain(&[MANIFEST]) {
                let p = dir.join(name);
                let r = if p.is_dir() {
                    fs::remove_dir_all(&p)
                } else if p.exists() {
                    fs::remove_file(&p)
                } else {
                    Ok(())
                };
                r.map_err(|e| Refusal::Io(Error::io(&p, e)))?;
            }
        }
    }
    fs::create_dir_all(dir).map_err(|e| Refusal::Io(Error::io(dir, e)))
}
