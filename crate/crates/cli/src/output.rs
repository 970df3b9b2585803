//! Output directory handling, atomic writes, CSV and the run manifest.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::CliError;

/// Name of the manifest written by every command.
pub const SUMMARY: &str = "summary.json";

pub struct OutputDir {
    dir: PathBuf,
}

impl OutputDir {
    /// Creates `dir` if needed. Without `overwrite`, fails with a collision
    /// error when any of `names` already exists.
    pub fn prepare(dir: &Path, names: &[&str], overwrite: bool) -> Result<Self, CliError> {
        if !overwrite {
            let existing: Vec<String> = names
                .iter()
                .map(|n| dir.join(n))
                .filter(|p| p.exists())
                .map(|p| p.display().to_string())
                .collect();
            if !existing.is_empty() {
                return Err(CliError::collision(format!(
                    "refusing to overwrite {} (pass --overwrite)",
                    existing.join(", ")
                )));
            }
        }
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::io(format!("{}: cannot create output directory: {e}", dir.display())))?;
        Ok(Self { dir: dir.to_path_buf() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Writes to a temporary file in the same directory, then renames it
    /// over `name`.
    pub fn write(&self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let target = self.path(name);
        let fail = |e: std::io::Error| CliError::io(format!("{}: {e}", target.display()));
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir).map_err(fail)?;
        tmp.write_all(bytes).map_err(fail)?;
        tmp.as_file().sync_all().map_err(fail)?;
        tmp.persist(&target).map_err(|e| fail(e.error))?;
        Ok(())
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::io(e.to_string()))?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }
}

/// Comma-separated, header row first, `\n` after every record.
pub fn csv_bytes(header: &[&str], rows: &[Vec<String>]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let fail = |e: csv::Error| CliError::io(e.to_string());
    w.write_record(header).map_err(fail)?;
    for row in rows {
        w.write_record(row).map_err(fail)?;
    }
    w.into_inner().map_err(|e| CliError::io(e.to_string()))
}

/// Shortest round-trip form; switches to exponent notation for very small
/// or very large magnitudes instead of printing hundreds of zeros.
pub fn num(v: f64) -> String {
    format!("{v:?}")
}

pub fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

#[derive(Debug, Serialize)]
pub struct Manifest<C: Serialize> {
    pub command: &'static str,
    pub code_version: String,
    pub seed: u64,
    pub started_at: String,
    pub finished_at: String,
    pub config_path: String,
    pub config: C,
    pub outputs: Vec<String>,
}

pub fn timestamp() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

pub fn code_version() -> String {
    format!("sdg {}", env!("CARGO_PKG_VERSION"))
}
