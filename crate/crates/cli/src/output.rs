//! Output directories are assembled in a sibling staging directory and
//! renamed into place once every file is written.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::CliError;

/// Provenance header embedded in every JSON output.
#[derive(Debug, Clone, Serialize)]
pub struct Provenance {
    pub command: &'static str,
    pub config_digest: String,
    pub master_seed: u64,
}

#[derive(Serialize)]
struct Stamped<'a, T: Serialize> {
    provenance: &'a Provenance,
    #[serde(flatten)]
    body: &'a T,
}

pub struct OutputDir {
    target: PathBuf,
    staging: PathBuf,
    provenance: Provenance,
    committed: bool,
}

impl OutputDir {
    /// Fails with `RefusedOverwrite` when `target` exists and `force` is
    /// off. Nothing is touched until [`OutputDir::commit`].
    pub fn prepare(target: &Path, force: bool, provenance: Provenance) -> Result<OutputDir, CliError> {
        if target.exists() && !force {
            return Err(CliError::RefusedOverwrite(target.to_path_buf()));
        }
        let name = target
            .file_name()
            .ok_or_else(|| CliError::Config(format!("output path {} has no final component", target.display())))?;
        let parent = match target.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&parent).map_err(CliError::io(&parent))?;
        let staging = parent.join(format!(".{}.partial-{}", name.to_string_lossy(), std::process::id()));
        if staging.exists() {
            fs::remove_dir_all(&staging).map_err(CliError::io(&staging))?;
        }
        fs::create_dir(&staging).map_err(CliError::io(&staging))?;
        Ok(OutputDir { target: target.to_path_buf(), staging, provenance, committed: false })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.staging.join(name)
    }

    fn create(&self, name: &str) -> Result<BufWriter<fs::File>, CliError> {
        let path = self.path(name);
        Ok(BufWriter::new(fs::File::create(&path).map_err(CliError::io(&path))?))
    }

    /// Pretty JSON with the provenance header merged into the top level.
    pub fn write_json<T: Serialize>(&self, name: &str, body: &T) -> Result<(), CliError> {
        let path = self.path(name);
        let mut w = self.create(name)?;
        serde_json::to_writer_pretty(&mut w, &Stamped { provenance: &self.provenance, body })
            .map_err(|e| CliError::Io { path: path.clone(), source: e.into() })?;
        writeln!(w).and_then(|_| w.flush()).map_err(CliError::io(path))
    }

    /// One compact JSON value per line.
    pub fn write_jsonl<T: Serialize>(&self, name: &str, rows: impl IntoIterator<Item = T>) -> Result<(), CliError> {
        let path = self.path(name);
        let mut w = self.create(name)?;
        for row in rows {
            serde_json::to_writer(&mut w, &row).map_err(|e| CliError::Io { path: path.clone(), source: e.into() })?;
            writeln!(w).map_err(CliError::io(&path))?;
        }
        w.flush().map_err(CliError::io(path))
    }

    pub fn write_text(&self, name: &str, text: &str) -> Result<(), CliError> {
        let path = self.path(name);
        fs::write(&path, text).map_err(CliError::io(path))
    }

    /// Moves the staged directory into place, replacing an existing one.
    pub fn commit(mut self) -> Result<PathBuf, CliError> {
        if self.target.exists() {
            fs::remove_dir_all(&self.target).map_err(CliError::io(&self.target))?;
        }
        fs::rename(&self.staging, &self.target).map_err(CliError::io(&self.target))?;
        self.committed = true;
        Ok(self.target.clone())
    }
}

impl Drop for OutputDir {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.staging);
        }
    }
}
