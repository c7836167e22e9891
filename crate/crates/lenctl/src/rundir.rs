//! Run directories: config snapshot, seed, version string, append-only
//! logs, and a lock file against concurrent writers.

use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{Error, IoContextExt, Result};

/// Resolves the work directory: explicit flag, then `LENCTL_WORKDIR`, then
/// the configured default.
pub fn resolve_workdir(flag: Option<&str>, config: &RunConfig) -> PathBuf {
    if let Some(dir) = flag {
        return PathBuf::from(dir);
    }
    if let Ok(dir) = std::env::var("LENCTL_WORKDIR") {
        if !dir.is_empty() {
            return PathBuf::from(dir);
        }
    }
    PathBuf::from(&config.paths.workdir)
}

/// A locked run directory holding everything needed to reproduce a run.
pub struct RunDir {
    path: PathBuf,
    lock_path: PathBuf,
}

impl RunDir {
    /// Creates (or reuses) `workdir/name`, takes the lock, and writes the
    /// config snapshot, seed and version files.
    pub fn open(workdir: &Path, name: &str, config: &RunConfig, seed: u64) -> Result<RunDir> {
        let path = workdir.join(name);
        fs::create_dir_all(&path).io_context(format!("creating run dir {}", path.display()))?;
        let lock_path = path.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&lock_path) {
            Ok(_) => {}
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(Error::Lock(format!(
                    "{} is locked by another process (remove {} if stale)",
                    path.display(),
                    lock_path.display()
                )));
            }
            Err(e) => return Err(Error::IoContext {
                context: format!("creating lock {}", lock_path.display()),
                source: e,
            }),
        }
        let dir = RunDir { path, lock_path };
        config.save(dir.path.join("config.toml"))?;
        fs::write(dir.path.join("seed.txt"), format!("{seed}\n"))
            .io_context("writing seed.txt")?;
        fs::write(dir.path.join("version.txt"), format!("{}\n", version_string()))
            .io_context("writing version.txt")?;
        Ok(dir)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    /// Appends one JSON record to the named log.
    pub fn log<T: Serialize>(&self, log_name: &str, record: &T) -> Result<()> {
        crate::data::append_jsonl(self.path.join(log_name), record)
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock_path);
    }
}

/// Crate version plus the git description when available.
pub fn version_string() -> String {
    let base = concat!("lenctl ", env!("CARGO_PKG_VERSION"));
    match std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
    {
        Ok(out) if out.status.success() => {
            let describe = String::from_utf8_lossy(&out.stdout);
            format!("{base} ({})", describe.trim())
        }
        _ => base.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_dir_contents_and_lock() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = RunConfig::default();
        let dir = RunDir::open(tmp.path(), "sft-test", &cfg, 42).unwrap();
        assert!(dir.file("config.toml").exists());
        assert_eq!(
            std::fs::read_to_string(dir.file("seed.txt")).unwrap().trim(),
            "42"
        );
        assert!(std::fs::read_to_string(dir.file("version.txt"))
            .unwrap()
            .starts_with("lenctl "));

        // Second writer is rejected while the lock exists.
        match RunDir::open(tmp.path(), "sft-test", &cfg, 42) {
            Err(Error::Lock(_)) => {}
            Err(other) => panic!("expected lock error, got {other}"),
            Ok(_) => panic!("lock not enforced"),
        }

        // Lock releases on drop.
        drop(dir);
        let third = RunDir::open(tmp.path(), "sft-test", &cfg, 43);
        assert!(third.is_ok());
    }

    #[test]
    fn workdir_resolution_order() {
        let cfg = RunConfig::default();
        let flagged = resolve_workdir(Some("/tmp/explicit"), &cfg);
        assert_eq!(flagged, PathBuf::from("/tmp/explicit"));
        let fallback = resolve_workdir(None, &cfg);
        // Either the env override or the config default; both acceptable.
        if let Ok(env) = std::env::var("LENCTL_WORKDIR") {
            if !env.is_empty() {
                assert_eq!(fallback, PathBuf::from(env));
                return;
            }
        }
        assert_eq!(fallback, PathBuf::from("lenctl-work"));
    }
}
