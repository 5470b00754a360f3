//! Run manifests: enough to reproduce a stage under the replay backend.
//!
//! Paths are stored relative to a base directory and no timestamps are
//! recorded, so reruns of the same inputs write identical manifests.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::util::{sha256_hex, write_atomic};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub seed: u64,
    pub config_sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub templates: BTreeMap<String, String>,
    /// Relative path to SHA-256 of the file contents.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub counts: BTreeMap<String, u64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub settings: BTreeMap<String, String>,
}

/// `path` relative to `base` with forward slashes, or unchanged when outside it.
pub fn display_rel(path: &Path, base: &Path) -> String {
    let rel: PathBuf = path.strip_prefix(base).map(Path::to_path_buf).unwrap_or_else(|_| path.to_path_buf());
    rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect::<Vec<_>>().join("/")
}

/// Digests of a file, or of every file under a directory, keyed by relative path.
pub fn hash_tree(path: &Path, base: &Path) -> std::io::Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![path.to_path_buf()];
    while let Some(p) = stack.pop() {
        if p.is_dir() {
            for e in std::fs::read_dir(&p)? {
                stack.push(e?.path());
            }
        } else if p.is_file() {
            out.insert(display_rel(&p, base), sha256_hex(std::fs::read(&p)?));
        }
    }
    Ok(out)
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config_sha256: &str) -> Self {
        Self {
            command: command.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            seed,
            config_sha256: config_sha256.into(),
            ..Self::default()
        }
    }

    pub fn input(&mut self, path: &Path, base: &Path) -> std::io::Result<()> {
        self.inputs.extend(hash_tree(path, base)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path, base: &Path) -> std::io::Result<()> {
        self.outputs.extend(hash_tree(path, base)?);
        Ok(())
    }

    pub fn count(&mut self, key: &str, n: impl TryInto<u64>) {
        self.counts.insert(key.into(), n.try_into().unwrap_or(u64::MAX));
    }

    pub fn setting(&mut self, key: &str, value: impl ToString) {
        self.settings.insert(key.into(), value.to_string());
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes") + "\n";
        write_atomic(path, text.as_bytes())
    }
}
