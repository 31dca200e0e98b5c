//! Run directories: exclusive locks and manifests.

use std::fs;
use std::io::ErrorKind as IoKind;
use std::path::{Path, PathBuf};

use anyhow::Result;
use serde::{Deserialize, Serialize};

pub const LOCK_FILE: &str = ".lock";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Held for the lifetime of a command writing into a run directory.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(run_dir: &Path) -> Result<Self> {
        fs::create_dir_all(run_dir)?;
        let path = run_dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => {
                fs::write(&path, std::process::id().to_string())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == IoKind::AlreadyExists => Err(infoseg::Error::Config(format!(
                "{} is in use by another run (delete {} if that run is gone)",
                run_dir.display(),
                path.display()
            ))
            .into()),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_name: String,
    pub command: String,
    pub config: serde_json::Value,
    pub dataset_fingerprint: String,
    pub code_version: String,
    pub seed: u64,
}

impl RunManifest {
    pub fn save(&self, run_dir: &Path) -> Result<()> {
        fs::write(run_dir.join(MANIFEST_FILE), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(run_dir: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(run_dir.join(MANIFEST_FILE))?)?)
    }
}

pub fn code_version() -> String {
    env!("CARGO_PKG_VERSION").to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn second_lock_fails_until_first_drops() {
        let dir = tempfile::tempdir().unwrap();
        let first = RunLock::acquire(dir.path()).unwrap();
        assert!(RunLock::acquire(dir.path()).is_err());
        drop(first);
        assert!(RunLock::acquire(dir.path()).is_ok());
    }
}
