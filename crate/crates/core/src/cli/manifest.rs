use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

/// Everything needed to re-run a command and check its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// Subcommand path such as `kam run`.
    pub command: String,
    /// Command line without the output flags; input paths are relative to
    /// the directory the manifest is stored in.
    pub args: Vec<String>,
    pub parameters: serde_json::Value,
    pub seed: u64,
    pub inputs: Vec<FileHash>,
    /// Paths relative to the output directory.
    pub outputs: Vec<FileHash>,
    pub version: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub(crate) fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            what: path.display().to_string(),
            source,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }

    /// Output files whose content differs from the recorded hash in `dir`,
    /// with `None` for files that are missing.
    pub fn mismatches(&self, dir: &Path) -> Vec<(String, Option<String>)> {
        self.outputs
            .iter()
            .filter_map(|o| {
                let path: PathBuf = dir.join(&o.path);
                match std::fs::read(&path) {
                    Ok(bytes) => {
                        let h = sha256_hex(&bytes);
                        (h != o.sha256).then(|| (o.path.clone(), Some(h)))
                    }
                    Err(_) => Some((o.path.clone(), None)),
                }
            })
            .collect()
    }
}

/// Removes `--out-dir`, `--manifest` and their values from a command line.
pub(crate) fn strip_output_flags(args: &[String]) -> Vec<String> {
    let mut out = Vec::with_capacity(args.len());
    let mut skip = false;
    for a in args {
        if skip {
            skip = false;
            continue;
        }
        if a == "--out-dir" || a == "--manifest" {
            skip = true;
            continue;
        }
        if a.starts_with("--out-dir=") || a.starts_with("--manifest=") {
            continue;
        }
        out.push(a.clone());
    }
    out
}
