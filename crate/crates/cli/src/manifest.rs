//! Per-command run manifests with output content hashes.

use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::CliResult;

#[derive(Debug, Serialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Option<String>,
    pub seed: u64,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn hashes(root: &Path, files: &[PathBuf]) -> CliResult<Vec<FileHash>> {
    let mut out: Vec<FileHash> = files
        .iter()
        .map(|f| {
            let shown = f.strip_prefix(root).unwrap_or(f).display().to_string();
            Ok(FileHash { path: shown, sha256: sha256_file(f)? })
        })
        .collect::<CliResult<_>>()?;
    out.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(out)
}

impl RunManifest {
    pub fn new(command: &str, config: Option<&Path>, seed: u64) -> Self {
        Self { command: command.into(), config: config.map(|p| p.display().to_string()), seed, inputs: vec![], outputs: vec![] }
    }

    /// Hashes the files and writes `manifests/<name>.json` under `root`.
    pub fn write(mut self, root: &Path, name: &str, inputs: &[PathBuf], outputs: &[PathBuf]) -> CliResult<PathBuf> {
        self.inputs = hashes(root, inputs)?;
        self.outputs = hashes(root, outputs)?;
        let dir = root.join("manifests");
        std::fs::create_dir_all(&dir)?;
        let path = dir.join(format!("{name}.json"));
        std::fs::write(&path, serde_json::to_string_pretty(&self).expect("manifest serializes") + "\n")?;
        Ok(path)
    }
}
