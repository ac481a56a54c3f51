//! Per-command provenance manifests.
//!
//! Every command writes `manifests/<command>[-qualifier].json` into the
//! workdir: the resolved configuration snapshot plus SHA-256 digests of the
//! artifacts it read and wrote. The document contains no timestamps or
//! host-specific state beyond the configured paths, so rerunning a command
//! with the same config and seed rewrites the same bytes — a cheap
//! idempotency check and a full provenance record.

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    /// Resolved run configuration, embedded verbatim.
    pub config: serde_json::Value,
    /// Workdir-relative path → `sha256:<hex>` of every artifact read.
    pub inputs: BTreeMap<String, String>,
    /// Same, for every artifact written.
    pub outputs: BTreeMap<String, String>,
    #[serde(skip)]
    workdir: PathBuf,
}

impl Manifest {
    pub fn new(command: impl Into<String>, cfg: &crate::config::RunConfig) -> Result<Self> {
        Ok(Manifest {
            command: command.into(),
            seed: cfg.seed,
            config: serde_json::to_value(cfg).context("serializing config snapshot")?,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            workdir: cfg.paths.workdir.clone(),
        })
    }

    /// Records `path` (file or directory tree) as an input.
    pub fn record_input(&mut self, path: &Path) -> Result<()> {
        let digest = hash_tree(path)?;
        self.inputs.insert(self.rel(path), digest);
        Ok(())
    }

    /// Records `path` (file or directory tree) as an output; call after
    /// writing it.
    pub fn record_output(&mut self, path: &Path) -> Result<()> {
        let digest = hash_tree(path)?;
        self.outputs.insert(self.rel(path), digest);
        Ok(())
    }

    /// Writes `manifests/<name>.json` and returns its path.
    pub fn write(&self, manifests_dir: &Path, name: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(manifests_dir)
            .with_context(|| format!("creating {}", manifests_dir.display()))?;
        let path = manifests_dir.join(format!("{name}.json"));
        let json = serde_json::to_string_pretty(self).context("serializing manifest")?;
        std::fs::write(&path, json.as_bytes())
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    /// Paths under the workdir are recorded relative to it; anything else
    /// (external inputs, absolute overrides) is recorded as given.
    fn rel(&self, path: &Path) -> String {
        path.strip_prefix(&self.workdir)
            .unwrap_or(path)
            .display()
            .to_string()
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let d = h.finalize();
    let mut out = String::with_capacity(7 + 64);
    out.push_str("sha256:");
    for b in d {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes =
        std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

/// Digest of a file, or of a directory tree: the tree digest hashes each
/// file's relative path and content digest in sorted order, so it changes
/// exactly when any contained file does.
pub fn hash_tree(path: &Path) -> Result<String> {
    let meta = std::fs::metadata(path)
        .with_context(|| format!("hashing {}", path.display()))?;
    if meta.is_file() {
        return hash_file(path);
    }
    let mut files = Vec::new();
    collect_files(path, &mut files)?;
    files.sort();
    let mut listing = String::new();
    for f in &files {
        let rel = f.strip_prefix(path).expect("collected under root");
        listing.push_str(&rel.display().to_string());
        listing.push('\0');
        listing.push_str(&hash_file(f)?);
        listing.push('\n');
    }
    Ok(sha256_hex(listing.as_bytes()))
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in
        std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))?
    {
        let path = entry
            .with_context(|| format!("listing {}", dir.display()))?
            .path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Overrides, RunConfig};

    #[test]
    fn sha256_matches_known_vector() {
        // `echo -n abc | sha256sum`
        assert_eq!(
            sha256_hex(b"abc"),
            "sha256:ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn tree_hash_tracks_content_and_ignores_write_order() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("sub")).unwrap();
        std::fs::write(dir.path().join("b.txt"), "beta").unwrap();
        std::fs::write(dir.path().join("sub/a.txt"), "alpha").unwrap();
        let h1 = hash_tree(dir.path()).unwrap();

        // rewriting identical content in the opposite order changes nothing
        std::fs::write(dir.path().join("sub/a.txt"), "alpha").unwrap();
        std::fs::write(dir.path().join("b.txt"), "beta").unwrap();
        assert_eq!(h1, hash_tree(dir.path()).unwrap());

        std::fs::write(dir.path().join("b.txt"), "changed").unwrap();
        assert_ne!(h1, hash_tree(dir.path()).unwrap());
    }

    #[test]
    fn manifest_bytes_are_stable_across_reruns() {
        let dir = tempfile::tempdir().unwrap();
        let ov = Overrides {
            workdir: Some(dir.path().to_path_buf()),
            ..Overrides::default()
        };
        let cfg = RunConfig::load(None, &ov).unwrap();
        let artifact = dir.path().join("x.bin");
        std::fs::write(&artifact, [1, 2, 3]).unwrap();

        let write_once = || {
            let mut m = Manifest::new("demo", &cfg).unwrap();
            m.record_input(&artifact).unwrap();
            m.record_output(&artifact).unwrap();
            let p = m.write(&cfg.paths.manifests_dir, "demo").unwrap();
            std::fs::read(p).unwrap()
        };
        assert_eq!(write_once(), write_once());

        let text = String::from_utf8(write_once()).unwrap();
        // artifact inside the workdir is recorded relative to it
        assert!(text.contains("\"x.bin\""), "{text}");
        assert!(!text.contains("timestamp"), "{text}");
    }
}
