//! Config files, JSON artifacts, training logs and run manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use scalenas_core::data::SyntheticSpec;
use scalenas_core::train::LogRow;
use scalenas_core::TrainConfig;

use crate::error::{CliError, Result};

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn parse_toml<T: DeserializeOwned>(path: &Path, text: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| {
        let line = e.span().map(|s| text[..s.start].matches('\n').count() + 1);
        CliError::parse(path, line, e.message().to_string())
    })
}

pub fn parse_json<T: DeserializeOwned>(path: &Path, text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| CliError::parse(path, Some(e.line()), e.to_string()))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    parse_json(path, &read_text(path)?)
}

/// Run configuration from a TOML file; unknown keys are errors.
pub fn read_config(path: &Path) -> Result<TrainConfig> {
    parse_toml(path, &read_text(path)?)
}

/// Generator spec from TOML, or JSON when the extension is `.json`.
pub fn read_spec(path: &Path) -> Result<SyntheticSpec> {
    let text = read_text(path)?;
    if path.extension().is_some_and(|e| e == "json") {
        parse_json(path, &text)
    } else {
        parse_toml(path, &text)
    }
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("artifact types serialize");
    s.push('\n');
    s
}

/// Writes `value` as JSON, reads it back and checks that it parses to the
/// same value.
pub fn write_json_checked<T>(path: &Path, value: &T) -> Result<()>
where
    T: Serialize + DeserializeOwned + PartialEq,
{
    write_bytes(path, to_json(value).as_bytes())?;
    let back: T = read_json(path)?;
    if back != *value {
        return Err(CliError::parse(path, None, "written file does not read back to the same value"));
    }
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Training log as CSV: `iteration,stage,train_loss,valid_loss`, blank
/// where a loss was not measured.
pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from("iteration,stage,train_loss,valid_loss\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{}\n",
            r.iteration,
            r.stage.name(),
            opt(r.train_loss),
            opt(r.valid_loss)
        ));
    }
    s
}

/// Row-major `n x n` matrix as headerless CSV.
pub fn matrix_csv(values: &[f64], n: usize) -> String {
    let mut s = String::new();
    for row in values.chunks(n.max(1)) {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

/// Planted adjacency as written by `gen-synth`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjacencyFile {
    pub n_vars: usize,
    /// `rows[i][j]` is the weight of edge `i -> j`.
    pub rows: Vec<Vec<f64>>,
}

impl AdjacencyFile {
    pub fn from_flat(values: &[f64], n: usize) -> Self {
        Self {
            n_vars: n,
            rows: values.chunks(n.max(1)).map(<[f64]>::to_vec).collect(),
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.rows.concat()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: PathBuf,
    pub sha256: String,
}

impl FileRecord {
    pub fn of(path: &Path) -> Result<Self> {
        Ok(Self {
            path: path.to_path_buf(),
            sha256: file_sha256(path)?,
        })
    }
}

/// Written once per run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub seed: Option<u64>,
    pub config: Option<TrainConfig>,
    /// SHA-256 of the series file, when the command reads one.
    pub dataset_sha256: Option<String>,
    pub inputs: BTreeMap<String, FileRecord>,
    pub outputs: Vec<FileRecord>,
    pub started_at: String,
    pub finished_at: String,
}

pub fn now_rfc3339() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}
