//! Workdir bookkeeping: the advisory lock that keeps two commands from
//! sharing one workdir, and small path helpers.

use anyhow::{bail, Context, Result};
use std::path::{Path, PathBuf};

const LOCK_NAME: &str = ".lock";

/// Advisory lock on a workdir, held for the duration of one command.
///
/// Creation fails if the lock file already exists; dropping the guard
/// removes it. A crash can leave the file behind — the error message says
/// so, and deleting it is always safe once no command is running.
#[derive(Debug)]
pub struct WorkdirLock {
    path: PathBuf,
}

impl WorkdirLock {
    pub fn acquire(workdir: &Path) -> Result<WorkdirLock> {
        std::fs::create_dir_all(workdir)
            .with_context(|| format!("creating workdir {}", workdir.display()))?;
        let path = workdir.join(LOCK_NAME);
        match std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(_) => Ok(WorkdirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => bail!(
                "workdir {} is locked by another command; if no command is \
                 running, remove the stale {} file",
                workdir.display(),
                path.display()
            ),
            Err(e) => Err(e).with_context(|| format!("creating lock {}", path.display())),
        }
    }
}

impl Drop for WorkdirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Creates the parent directory of a file artifact.
pub fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(())
}
