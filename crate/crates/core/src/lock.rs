//! Whole-workspace lockfile at `.icm/lock`.

use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::PathBuf;

use chrono::Utc;
use thiserror::Error;

use crate::workspace::Workspace;

pub const LOCK_FILE: &str = "lock";

#[derive(Debug, Error)]
pub enum LockError {
    #[error("LockHeld: workspace is locked by another run ({holder}); remove {} if no run is active", path.display())]
    LockHeld { path: PathBuf, holder: String },
    #[error("cannot create lock {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

/// Held for the duration of a run; removed on drop.
#[derive(Debug)]
pub struct WorkspaceLock {
    path: PathBuf,
}

impl WorkspaceLock {
    pub fn acquire(ws: &Workspace) -> Result<WorkspaceLock, LockError> {
        let path = ws.state_dir.join(LOCK_FILE);
        let io_err = |source| LockError::Io {
            path: path.clone(),
            source,
        };
        fs::create_dir_all(&ws.state_dir).map_err(io_err)?;
        let mut file = match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(f) => f,
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => {
                let holder = fs::read_to_string(&path)
                    .map(|s| s.split_whitespace().collect::<Vec<_>>().join(" "))
                    .unwrap_or_default();
                return Err(LockError::LockHeld { path, holder });
            }
            Err(e) => return Err(io_err(e)),
        };
        write!(
            file,
            "pid {}\nstarted {}\n",
            std::process::id(),
            Utc::now().to_rfc3339()
        )
        .map_err(io_err)?;
        Ok(WorkspaceLock { path })
    }
}

impl Drop for WorkspaceLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
