//! Run directories: atomic file writes and the run manifest.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST: &str = "manifest.json";

/// SHA-256 over a git-style `blob <len>\0` header and the content.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, Serialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
}

/// Everything needed to rerun a command and check its outputs. No
/// timestamps or host details, so identical runs write identical manifests.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    pub inputs: Vec<FileRecord>,
    /// Hash of the command, resolved config and input hashes.
    pub input_hash: String,
    pub artifacts: Vec<FileRecord>,
}

/// The resolved configuration and input files of a run.
pub struct RunInputs {
    pub command: String,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    pub inputs: Vec<FileRecord>,
    pub input_hash: String,
}

impl RunInputs {
    /// `files` are read and hashed; they are recorded under the name given
    /// in the config.
    pub fn new(
        command: &str,
        seed: Option<u64>,
        config: &impl Serialize,
        files: &[(String, PathBuf)],
    ) -> anyhow::Result<Self> {
        let config = serde_json::to_value(config)?;
        let mut inputs = Vec::with_capacity(files.len());
        for (name, path) in files {
            let bytes =
                std::fs::read(path).with_context(|| format!("reading input {}", path.display()))?;
            inputs.push(FileRecord {
                path: name.clone(),
                sha256: content_hash(&bytes),
            });
        }
        let key = serde_json::to_vec(&serde_json::json!({
            "command": command,
            "config": config,
            "inputs": inputs.iter().map(|f| &f.sha256).collect::<Vec<_>>(),
        }))?;
        Ok(Self {
            command: command.to_string(),
            seed,
            config,
            inputs,
            input_hash: content_hash(&key),
        })
    }

    /// `--out` when given, else `<root>/<command>-<hash>` where the root is
    /// `SBS_OUT_DIR` or `runs`.
    pub fn out_dir(&self, out: Option<&Path>) -> PathBuf {
        match out {
            Some(p) => p.to_path_buf(),
            None => {
                let root = std::env::var_os("SBS_OUT_DIR")
                    .map_or_else(|| PathBuf::from("runs"), PathBuf::from);
                root.join(format!("{}-{}", self.command, &self.input_hash[..12]))
            }
        }
    }
}

/// A run directory being filled.
pub struct RunDir {
    dir: PathBuf,
    artifacts: Vec<FileRecord>,
}

impl RunDir {
    pub fn create(dir: &Path) -> anyhow::Result<Self> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            artifacts: Vec::new(),
        })
    }

    /// Write through a temporary file in the same directory, then rename.
    pub fn write(&mut self, name: &str, bytes: &[u8]) -> anyhow::Result<()> {
        write_atomic(&self.dir.join(name), bytes)?;
        self.artifacts.retain(|a| a.path != name);
        self.artifacts.push(FileRecord {
            path: name.to_string(),
            sha256: content_hash(bytes),
        });
        Ok(())
    }

    pub fn write_json(&mut self, name: &str, value: &impl Serialize) -> anyhow::Result<()> {
        let text = serde_json::to_string_pretty(value)? + "\n";
        self.write(name, text.as_bytes())
    }

    /// Record a file written by a nested run.
    pub fn adopt(&mut self, name: &str) -> anyhow::Result<()> {
        let bytes = std::fs::read(self.dir.join(name))?;
        self.artifacts.push(FileRecord {
            path: name.to_string(),
            sha256: content_hash(&bytes),
        });
        Ok(())
    }

    /// Write the manifest last, so its presence marks a complete run.
    pub fn finish(mut self, inputs: RunInputs) -> anyhow::Result<PathBuf> {
        self.artifacts.sort_by(|a, b| a.path.cmp(&b.path));
        let manifest = RunManifest {
            tool: "sbs",
            version: env!("CARGO_PKG_VERSION"),
            command: inputs.command,
            seed: inputs.seed,
            config: inputs.config,
            inputs: inputs.inputs,
            input_hash: inputs.input_hash,
            artifacts: self.artifacts,
        };
        let text = serde_json::to_string_pretty(&manifest)? + "\n";
        write_atomic(&self.dir.join(MANIFEST), text.as_bytes())?;
        Ok(self.dir)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut tmp = tempfile::Builder::new()
        .prefix(".sbs-partial-")
        .tempfile_in(dir)
        .with_context(|| format!("creating a temporary file in {}", dir.display()))?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path)
        .with_context(|| format!("renaming onto {}", path.display()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn git_style_hash() {
        // Same construction as `git hash-object` with SHA-256.
        assert_eq!(
            content_hash(b""),
            "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813"
        );
    }

    #[test]
    fn manifest_lists_artifacts_sorted() {
        let dir = tempfile::tempdir().unwrap();
        let mut run = RunDir::create(dir.path()).unwrap();
        run.write("b.txt", b"2").unwrap();
        run.write("a.txt", b"1").unwrap();
        let inputs = RunInputs::new("test", Some(1), &serde_json::json!({"k": 1}), &[]).unwrap();
        let out = run.finish(inputs).unwrap();
        let m: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out.join(MANIFEST)).unwrap()).unwrap();
        let names: Vec<&str> = m["artifacts"]
            .as_array()
            .unwrap()
            .iter()
            .map(|a| a["path"].as_str().unwrap())
            .collect();
        assert_eq!(names, ["a.txt", "b.txt"]);
        let leftovers = std::fs::read_dir(dir.path())
            .unwrap()
            .filter(|e| {
                e.as_ref()
                    .unwrap()
                    .file_name()
                    .to_string_lossy()
                    .starts_with(".sbs-partial-")
            })
            .count();
        assert_eq!(leftovers, 0);
    }
}
