//! Artifact writing and the run manifest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use sha2::{Digest, Sha256};

pub const MANIFEST_NAME: &str = "manifest.txt";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Artifact {
    pub name: String,
    pub content: String,
}

impl Artifact {
    pub fn new(name: impl Into<String>, content: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            content: content.into(),
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, content: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("artifact");
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let mut f = fs::File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
    f.write_all(content)?;
    f.sync_all()?;
    drop(f);
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

/// Command, config snapshot, seed, and a digest per artifact.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub config: String,
    pub artifacts: Vec<(String, String)>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: String, artifacts: &[Artifact]) -> Self {
        Self {
            command: command.to_string(),
            seed,
            config,
            artifacts: artifacts
                .iter()
                .map(|a| (a.name.clone(), sha256_hex(a.content.as_bytes())))
                .collect(),
        }
    }

    pub fn render(&self) -> String {
        let mut out = format!("command {}\nseed {}\n", self.command, self.seed);
        for line in self.config.lines() {
            out.push_str(&format!("config {line}\n"));
        }
        for (name, digest) in &self.artifacts {
            out.push_str(&format!("sha256 {digest}  {name}\n"));
        }
        out
    }
}

/// Writes every artifact, then the manifest. Returns the written paths.
pub fn write_run(
    out_dir: &Path,
    artifacts: &[Artifact],
    manifest: &RunManifest,
) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::with_capacity(artifacts.len() + 1);
    for a in artifacts {
        let p = out_dir.join(&a.name);
        write_atomic(&p, a.content.as_bytes())?;
        paths.push(p);
    }
    let p = out_dir.join(MANIFEST_NAME);
    write_atomic(&p, manifest.render().as_bytes())?;
    paths.push(p);
    Ok(paths)
}
