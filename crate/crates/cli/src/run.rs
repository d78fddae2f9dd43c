//! Output directories and the per-command run manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::Resolved;
use crate::error::{io_err, CliError, CliResult};

pub const MANIFEST: &str = "run_manifest.json";

#[derive(Debug, Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    profile: clamp_core::models::Profile,
    config_hash: String,
    /// Digest of each input, keyed by role.
    inputs: &'a BTreeMap<String, String>,
    /// Digest of every top-level entry of the output directory.
    artifacts: BTreeMap<String, String>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_digest(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<(String, PathBuf)>) -> CliResult<()> {
    for entry in fs::read_dir(dir).map_err(|e| io_err(dir, e))? {
        let path = entry.map_err(|e| io_err(dir, e))?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).expect("under root").to_string_lossy().replace('\\', "/");
            if rel != MANIFEST {
                out.push((rel, path));
            }
        }
    }
    Ok(())
}

/// Order-independent digest of a directory tree (relative names and bytes),
/// ignoring run manifests at its root.
pub fn tree_digest(dir: &Path) -> CliResult<String> {
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for (rel, path) in files {
        h.update(rel.as_bytes());
        h.update([0]);
        h.update(fs::read(&path).map_err(|e| io_err(&path, e))?);
        h.update([0]);
    }
    Ok(hex(&h.finalize()))
}

pub fn digest(path: &Path) -> CliResult<String> {
    if path.is_dir() {
        tree_digest(path)
    } else {
        file_digest(path)
    }
}

/// An output directory being filled by one command.
pub struct Run {
    pub dir: PathBuf,
    command: &'static str,
    inputs: BTreeMap<String, String>,
}

impl Run {
    /// Creates `dir`; an existing non-empty directory is only replaced with
    /// `overwrite`.
    pub fn start(command: &'static str, dir: &Path, overwrite: bool) -> CliResult<Self> {
        if dir.exists() && !dir.is_dir() {
            return Err(CliError::Usage(format!("{} is not a directory", dir.display())));
        }
        if dir.exists() {
            let non_empty = fs::read_dir(dir).map_err(|e| io_err(dir, e))?.next().is_some();
            if non_empty && !overwrite {
                return Err(CliError::Usage(format!(
                    "{} already exists and is not empty; pass --overwrite to replace it",
                    dir.display()
                )));
            }
            if non_empty {
                fs::remove_dir_all(dir).map_err(|e| io_err(dir, e))?;
            }
        }
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        Ok(Self { dir: dir.to_path_buf(), command, inputs: BTreeMap::new() })
    }

    pub fn input(&mut self, role: &str, path: &Path) -> CliResult<()> {
        let d = digest(path)?;
        self.inputs.insert(role.to_string(), d);
        Ok(())
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&self, name: &str, bytes: impl AsRef<[u8]>) -> CliResult<()> {
        let path = self.path(name);
        fs::write(&path, bytes).map_err(|e| io_err(&path, e))
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> CliResult<()> {
        let text = serde_json::to_string_pretty(value).map_err(clamp_core::ClampError::from)?;
        self.write(name, text + "\n")
    }

    pub fn finish(self, cfg: &Resolved) -> CliResult<()> {
        let mut artifacts = BTreeMap::new();
        for entry in fs::read_dir(&self.dir).map_err(|e| io_err(&self.dir, e))? {
            let path = entry.map_err(|e| io_err(&self.dir, e))?.path();
            let name = path.file_name().expect("entry name").to_string_lossy().to_string();
            if name != MANIFEST {
                artifacts.insert(name, digest(&path)?);
            }
        }
        let manifest = RunManifest {
            command: self.command,
            version: env!("CARGO_PKG_VERSION"),
            seed: cfg.seed,
            profile: cfg.profile,
            config_hash: cfg.hash(),
            inputs: &self.inputs,
            artifacts,
        };
        self.write_json(MANIFEST, &manifest)?;
        log::info!("{}: wrote {}", self.command, self.dir.display());
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn refuses_to_clobber() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("out");
        let run = Run::start("t", &dir, false).unwrap();
        run.write("a.txt", "x").unwrap();
        assert!(matches!(Run::start("t", &dir, false), Err(CliError::Usage(_))));
        Run::start("t", &dir, true).unwrap();
        assert!(!dir.join("a.txt").exists());
    }

    #[test]
    fn tree_digest_ignores_manifest_and_tracks_content() {
        let tmp = tempfile::tempdir().unwrap();
        fs::create_dir_all(tmp.path().join("sub")).unwrap();
        fs::write(tmp.path().join("sub/x"), "1").unwrap();
        let a = tree_digest(tmp.path()).unwrap();
        fs::write(tmp.path().join(MANIFEST), "{}").unwrap();
        assert_eq!(a, tree_digest(tmp.path()).unwrap());
        fs::write(tmp.path().join("sub/x"), "2").unwrap();
        assert_ne!(a, tree_digest(tmp.path()).unwrap());
    }
}
