//! Run manifests and the `verify` pass.

use std::fs;
use std::path::Path;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::Context;
use erfseg::io::write_atomic;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::AssertionFailed;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the manifest's directory.
    pub path: String,
    /// Empty until the run finishes.
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub code_version: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub started_unix: u64,
    pub wall_clock_secs: f64,
    pub param_count: Option<usize>,
    pub complete: bool,
    pub artifacts: Vec<Artifact>,
}

/// Tracks one run; writes the manifest on creation and on [`finish`](Self::finish).
pub struct ManifestWriter {
    manifest: RunManifest,
    started: Instant,
}

impl ManifestWriter {
    pub fn start(out: &Path, command: &str, seed: u64, config: serde_json::Value) -> anyhow::Result<Self> {
        let manifest = RunManifest {
            command: command.to_string(),
            code_version: format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION")),
            seed,
            config,
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            wall_clock_secs: 0.0,
            param_count: None,
            complete: false,
            artifacts: Vec::new(),
        };
        let w = ManifestWriter {
            manifest,
            started: Instant::now(),
        };
        w.write(out)?;
        Ok(w)
    }

    pub fn set_param_count(&mut self, n: usize) {
        self.manifest.param_count = Some(n);
    }

    /// Records checksums for `files` (relative to `out`) and rewrites the manifest.
    pub fn finish(mut self, out: &Path, files: impl IntoIterator<Item = String>) -> anyhow::Result<RunManifest> {
        let mut files: Vec<String> = files.into_iter().collect();
        files.sort();
        files.dedup();
        self.manifest.artifacts = files
            .into_iter()
            .map(|path| {
                let bytes = fs::read(out.join(&path)).with_context(|| format!("reading artifact {path}"))?;
                Ok(Artifact {
                    sha256: sha256_hex(&bytes),
                    bytes: bytes.len() as u64,
                    path,
                })
            })
            .collect::<anyhow::Result<_>>()?;
        self.manifest.wall_clock_secs = self.started.elapsed().as_secs_f64();
        self.manifest.complete = true;
        self.write(out)?;
        Ok(self.manifest)
    }

    fn write(&self, out: &Path) -> anyhow::Result<()> {
        let json = serde_json::to_vec_pretty(&self.manifest)?;
        write_atomic(&out.join(MANIFEST_FILE), &json)?;
        Ok(())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Re-hashes every artifact of the manifest in `dir`.
pub fn verify(dir: &Path) -> anyhow::Result<RunManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let manifest: RunManifest = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if !manifest.complete {
        anyhow::bail!(AssertionFailed(format!("{} describes an unfinished run", path.display())));
    }
    let mut problems = Vec::new();
    for a in &manifest.artifacts {
        match fs::read(dir.join(&a.path)) {
            Err(_) => problems.push(format!("missing {}", a.path)),
            Ok(bytes) if sha256_hex(&bytes) != a.sha256 => problems.push(format!("checksum mismatch {}", a.path)),
            Ok(_) => {}
        }
    }
    if !problems.is_empty() {
        anyhow::bail!(AssertionFailed(problems.join("\n")));
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn verify_detects_deletion_and_edits() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.txt"), "one").unwrap();
        fs::write(dir.path().join("b.txt"), "two").unwrap();
        let w = ManifestWriter::start(dir.path(), "test", 0, serde_json::Value::Null).unwrap();
        assert!(verify(dir.path()).is_err());
        w.finish(dir.path(), ["a.txt".to_string(), "b.txt".to_string()]).unwrap();
        assert_eq!(verify(dir.path()).unwrap().artifacts.len(), 2);
        fs::write(dir.path().join("a.txt"), "uno").unwrap();
        assert!(verify(dir.path()).is_err());
        fs::write(dir.path().join("a.txt"), "one").unwrap();
        fs::remove_file(dir.path().join("b.txt")).unwrap();
        let err = verify(dir.path()).unwrap_err();
        assert!(err.to_string().contains("missing b.txt"));
    }
}
