//! Output files that disappear again if the command fails.

use std::path::{Path, PathBuf};

use crate::error::{io_error, CliError};

/// Records every file and directory a command creates. Unless
/// [`Outputs::commit`] is called, dropping it deletes them again, newest
/// first.
#[derive(Debug, Default)]
pub struct Outputs {
    created: Vec<PathBuf>,
    committed: bool,
}

impl Outputs {
    pub fn new() -> Self {
        Self::default()
    }

    /// Creates `dir` and any missing parents, remembering the ones it made.
    pub fn dir(&mut self, dir: &Path) -> Result<(), CliError> {
        let mut missing = Vec::new();
        let mut cur = Some(dir);
        while let Some(p) = cur {
            if p.as_os_str().is_empty() || p.exists() {
                break;
            }
            missing.push(p.to_path_buf());
            cur = p.parent();
        }
        std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
        self.created.extend(missing.into_iter().rev());
        Ok(())
    }

    /// Writes a file, creating its directory if needed.
    pub fn write(&mut self, path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
        if let Some(parent) = path.parent() {
            self.dir(parent)?;
        }
        let existed = path.exists();
        std::fs::write(path, contents).map_err(|e| io_error(path, e))?;
        if !existed {
            self.created.push(path.to_path_buf());
        }
        Ok(())
    }

    /// Registers a path produced by other code, such as a checkpoint
    /// directory.
    pub fn track(&mut self, path: &Path) {
        self.created.push(path.to_path_buf());
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
        for p in self.created.iter().rev() {
            if p.is_dir() {
                let _ = std::fs::remove_dir_all(p);
            } else {
                let _ = std::fs::remove_file(p);
            }
        }
    }
}
