//! Config files: TOML by default, JSON when the extension is `.json`.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use sdg::{Prop1Config, SyntheticTask, TrainConfig};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Toml,
    Json,
}

/// Raw text of a loaded config, kept to point validation errors at a line.
#[derive(Debug, Clone)]
pub struct Source {
    pub path: PathBuf,
    pub text: String,
    pub format: Format,
}

impl Source {
    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("{}: cannot read config: {e}", path.display())))?;
        let format = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Format::Json,
            _ => Format::Toml,
        };
        Ok(Self {
            path: path.to_path_buf(),
            text,
            format,
        })
    }

    pub fn parse<T: DeserializeOwned>(&self) -> Result<T, CliError> {
        let parsed = match self.format {
            Format::Toml => toml::from_str(&self.text).map_err(|e| e.to_string()),
            Format::Json => serde_json::from_str(&self.text).map_err(|e| e.to_string()),
        };
        parsed.map_err(|msg| CliError::config(format!("{}: {}", self.path.display(), msg.trim_end())))
    }

    /// 1-based line of the first assignment to `key`, searching from the
    /// `[section]` header when one is given (TOML only).
    pub fn line_of(&self, section: Option<&str>, key: &str) -> Option<usize> {
        if key.is_empty() {
            return None;
        }
        let quoted = format!("\"{key}\"");
        let mut in_section = section.is_none() || self.format == Format::Json;
        for (i, raw) in self.text.lines().enumerate() {
            let line = raw.trim_start();
            if self.format == Format::Toml && line.starts_with('[') {
                if let Some(sec) = section {
                    let name = line.trim_start_matches('[').split(']').next().unwrap_or("").trim();
                    in_section = name == sec || name.starts_with(&format!("{sec}."));
                }
                continue;
            }
            let hit = match self.format {
                Format::Toml => line.strip_prefix(key).is_some_and(|rest| rest.trim_start().starts_with('=')),
                Format::Json => line.contains(&quoted),
            };
            if in_section && hit {
                return Some(i + 1);
            }
        }
        None
    }

    /// Prefixes a validation message with `path:line:` when the offending
    /// key can be found in the file.
    pub fn locate(&self, section: Option<&str>, key: &str, message: &str) -> String {
        match self.line_of(section, key) {
            Some(line) => format!("{}:{line}: {message}", self.path.display()),
            None => format!("{}: {message}", self.path.display()),
        }
    }
}

/// `[task]` and `[train]` sections; both optional.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFile {
    #[serde(default)]
    pub task: SyntheticTask,
    #[serde(default)]
    pub train: TrainConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub beta_zeros: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepFile {
    #[serde(default)]
    pub task: SyntheticTask,
    #[serde(default)]
    pub train: TrainConfig,
    pub sweep: SweepSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prop1File {
    pub prop1: Prop1Config,
}

/// Seeded random instance: standard normal candidates and domain
/// gradients, penalties uniform in `[0, 1)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomInstance {
    pub candidates: usize,
    pub domains: usize,
    pub dim: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RdcurveSection {
    pub betas: Vec<f64>,
    pub gamma: f64,
    #[serde(default = "default_rd_iterations")]
    pub iterations: usize,
    pub candidates: Option<Vec<Vec<f64>>>,
    pub penalty: Option<Vec<f64>>,
    pub domain_grads: Option<Vec<Vec<f64>>>,
    pub random: Option<RandomInstance>,
}

fn default_rd_iterations() -> usize {
    200
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RdcurveFile {
    pub rdcurve: RdcurveSection,
}
