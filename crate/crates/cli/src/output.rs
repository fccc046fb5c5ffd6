use std::cell::RefCell;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::CliError;

/// Name of the marker left next to the outputs of a failed command.
pub const FAILURE_MARKER: &str = "FAILED";

/// Tracks where a command has started writing, so a failure can be marked.
pub struct Output {
    marker: RefCell<Option<PathBuf>>,
}

impl Output {
    pub fn new() -> Self {
        Self {
            marker: RefCell::new(None),
        }
    }

    /// Creates a run directory with its `logs/`, `checkpoints/` and
    /// `reports/` subdirectories.
    pub fn prepare_run_dir(&self, dir: &Path) -> Result<(), CliError> {
        self.prepare_dir(dir)?;
        for sub in ["logs", "checkpoints", "reports"] {
            fs::create_dir_all(dir.join(sub))?;
        }
        Ok(())
    }

    pub fn prepare_dir(&self, dir: &Path) -> Result<(), CliError> {
        let marker = dir.join(FAILURE_MARKER);
        *self.marker.borrow_mut() = Some(marker.clone());
        fs::create_dir_all(dir)?;
        remove_stale(&marker)
    }

    /// Claims a single output file; its marker is `<file>.FAILED`.
    pub fn prepare_file(&self, file: &Path) -> Result<(), CliError> {
        let mut name = file.as_os_str().to_owned();
        name.push(format!(".{FAILURE_MARKER}"));
        let marker = PathBuf::from(name);
        *self.marker.borrow_mut() = Some(marker.clone());
        if let Some(parent) = file.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        remove_stale(&marker)
    }

    /// Records the failure when anything may have been written.
    pub fn mark_failed(&self, message: &str) {
        if let Some(marker) = self.marker.borrow().as_ref() {
            if let Err(e) = fs::write(marker, format!("{message}\n")) {
                eprintln!("mclab: cannot write failure marker {}: {e}", marker.display());
            }
        }
    }
}

fn remove_stale(marker: &Path) -> Result<(), CliError> {
    match fs::remove_file(marker) {
        Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(e.into()),
        _ => Ok(()),
    }
}
