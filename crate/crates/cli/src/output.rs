//! Staged output directory: files are written to a sibling scratch directory
//! and moved into place only when the whole command succeeds.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::CliError;

pub struct Staging {
    target: PathBuf,
    scratch: PathBuf,
    files: Vec<String>,
    committed: bool,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

impl Staging {
    pub fn new(target: &Path) -> Result<Self, CliError> {
        let name = target
            .file_name()
            .ok_or_else(|| CliError::config(format!("output path {} has no final component", target.display())))?
            .to_string_lossy()
            .into_owned();
        let parent = match target.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&parent).map_err(|e| io_err(&parent, e))?;
        let scratch = parent.join(format!(".{name}.partial-{}", std::process::id()));
        if scratch.exists() {
            fs::remove_dir_all(&scratch).map_err(|e| io_err(&scratch, e))?;
        }
        fs::create_dir(&scratch).map_err(|e| io_err(&scratch, e))?;
        Ok(Staging {
            target: target.to_path_buf(),
            scratch,
            files: Vec::new(),
            committed: false,
        })
    }

    /// Writes one file through `f`.
    pub fn write<F>(&mut self, name: &str, f: F) -> Result<(), CliError>
    where
        F: FnOnce(&mut dyn Write) -> Result<(), CliError>,
    {
        let path = self.scratch.join(name);
        let file = fs::File::create(&path).map_err(|e| io_err(&path, e))?;
        let mut w = BufWriter::new(file);
        f(&mut w)?;
        w.flush().map_err(|e| io_err(&path, e))?;
        self.files.push(name.to_string());
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        self.write(name, |w| {
            serde_json::to_writer_pretty(&mut *w, value).map_err(|e| CliError::Io(e.to_string()))?;
            writeln!(w).map_err(|e| CliError::Io(e.to_string()))
        })
    }

    /// Moves the staged files into the target directory.
    pub fn commit(mut self) -> Result<Vec<String>, CliError> {
        if !self.target.exists() {
            fs::rename(&self.scratch, &self.target).map_err(|e| io_err(&self.target, e))?;
        } else {
            for f in &self.files {
                let to = self.target.join(f);
                fs::rename(self.scratch.join(f), &to).map_err(|e| io_err(&to, e))?;
            }
            fs::remove_dir_all(&self.scratch).map_err(|e| io_err(&self.scratch, e))?;
        }
        self.committed = true;
        Ok(std::mem::take(&mut self.files))
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.scratch);
        }
    }
}
