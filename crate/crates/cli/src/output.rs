//! Output bookkeeping: one writer per destination, and no half-written
//! results left behind when a command fails.

use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

/// Bad flags or flag values. Exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

struct Lock {
    path: PathBuf,
}

impl Lock {
    fn acquire(path: PathBuf) -> Result<Lock> {
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Lock { path }),
            Err(e) if e.kind() == ErrorKind::AlreadyExists => Err(anyhow::anyhow!(
                "{} exists: another run is writing here (remove the file if that run is dead)",
                path.display()
            )),
            Err(e) => Err(e).with_context(|| format!("creating lock {}", path.display())),
        }
    }
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Files written by a command. Unless [`Outputs::commit`] is called they
/// are deleted on drop, along with the output directory if this run made it.
pub struct Outputs {
    created_dir: Option<PathBuf>,
    files: Vec<PathBuf>,
    committed: bool,
    _lock: Lock,
}

impl Outputs {
    pub fn dir(dir: &Path) -> Result<Outputs> {
        let created_dir = if dir.exists() {
            None
        } else {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            Some(dir.to_path_buf())
        };
        let lock = match Lock::acquire(dir.join(".ecrank.lock")) {
            Ok(l) => l,
            Err(e) => {
                if let Some(d) = &created_dir {
                    let _ = fs::remove_dir_all(d);
                }
                return Err(e);
            }
        };
        Ok(Outputs {
            created_dir,
            files: Vec::new(),
            committed: false,
            _lock: lock,
        })
    }

    pub fn file(path: &Path) -> Result<Outputs> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        let mut lock = path.as_os_str().to_owned();
        lock.push(".lock");
        Ok(Outputs {
            created_dir: None,
            files: Vec::new(),
            committed: false,
            _lock: Lock::acquire(PathBuf::from(lock))?,
        })
    }

    /// Registers a file some other routine will write.
    pub fn track(&mut self, path: PathBuf) {
        self.files.push(path);
    }

    pub fn write(&mut self, path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
        self.track(path.to_path_buf());
        fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
    }

    pub fn write_json(&mut self, path: &Path, value: &impl Serialize) -> Result<()> {
        self.write(path, serde_json::to_string_pretty(value)? + "\n")
    }

    pub fn commit(mut self) {
        self.committed = true;
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        for f in &self.files {
            let _ = fs::remove_file(f);
        }
        if let Some(d) = &self.created_dir {
            let _ = fs::remove_dir_all(d);
        }
    }
}

/// `<path>.manifest.json`
pub fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}
