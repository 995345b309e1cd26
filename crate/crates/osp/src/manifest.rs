//! Run manifests: what was run, with which resolved configuration, on which
//! inputs (by content hash) and what it wrote.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{OspError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: Option<u64>,
    /// Resolved configuration as TOML.
    pub config: String,
    pub input_hash: String,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
}

fn collect_files(path: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| OspError::io(path, e))?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()
            .map_err(|e| OspError::io(path, e))?;
        entries.sort();
        for e in entries {
            collect_files(&e, out)?;
        }
    } else {
        out.push(path.to_path_buf());
    }
    Ok(())
}

/// SHA-256 over the relative path and bytes of every file under `inputs`,
/// visited in sorted order.
pub fn hash_inputs(inputs: &[&Path]) -> Result<String> {
    let mut h = Sha256::new();
    for root in inputs {
        let mut files = Vec::new();
        collect_files(root, &mut files)?;
        for f in files {
            let rel = f.strip_prefix(root).unwrap_or(&f);
            h.update(rel.to_string_lossy().as_bytes());
            h.update([0]);
            let bytes = fs::read(&f).map_err(|e| OspError::io(&f, e))?;
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(&bytes);
        }
    }
    let digest = h.finalize();
    Ok(format!("sha256:{}", digest.iter().map(|b| format!("{b:02x}")).collect::<String>()))
}

impl RunManifest {
    pub fn new(command: &str, seed: Option<u64>, config: String, inputs: &[&Path], outputs: &[&Path]) -> Result<Self> {
        Ok(Self {
            command: command.to_string(),
            seed,
            config,
            input_hash: hash_inputs(inputs)?,
            inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
            outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).expect("manifest serializes");
        fs::write(path, text).map_err(|e| OspError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| OspError::io(path, e))?;
        toml::from_str(&text).map_err(|e| OspError::Data(format!("{}: {e}", path.display())))
    }
}

/// `<path>.manifest.toml`.
pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.toml");
    PathBuf::from(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_depends_on_content_and_names() {
        let d = tempfile::tempdir().unwrap();
        fs::write(d.path().join("a"), b"one").unwrap();
        let h1 = hash_inputs(&[d.path()]).unwrap();
        assert_eq!(h1, hash_inputs(&[d.path()]).unwrap());
        fs::write(d.path().join("a"), b"two").unwrap();
        let h2 = hash_inputs(&[d.path()]).unwrap();
        assert_ne!(h1, h2);
        fs::rename(d.path().join("a"), d.path().join("b")).unwrap();
        assert_ne!(h2, hash_inputs(&[d.path()]).unwrap());
        assert!(h1.starts_with("sha256:") && h1.len() == 7 + 64);
    }
}
