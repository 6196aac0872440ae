//! Output directories, manifests and plain-text number formatting.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Subdirectories a command may own and clear under `--force`.
const OWNED_DIRS: [&str; 2] = ["rounds", "roc"];

/// Creates `dir`, refusing a non-empty one unless `force` is set. With
/// `force`, the subdirectories this tool writes are cleared so no stale
/// round or ROC file survives; other files are overwritten in place.
pub fn prepare_out_dir(dir: &Path, force: bool) -> Result<(), CliError> {
    if dir.exists() {
        if !dir.is_dir() {
            return Err(CliError::Config(format!(
                "{} is not a directory",
                dir.display()
            )));
        }
        let non_empty = fs::read_dir(dir)?.next().is_some();
        if non_empty && !force {
            return Err(CliError::Config(format!(
                "output directory {} is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
        for sub in OWNED_DIRS {
            let p = dir.join(sub);
            if p.is_dir() {
                fs::remove_dir_all(&p)?;
            }
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn file_sha256(path: &Path) -> io::Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// Shortest text that parses back to the same `f64`.
pub fn num(x: f64) -> String {
    if x.is_nan() {
        "NaN".into()
    } else if x.is_infinite() {
        if x > 0.0 { "inf" } else { "-inf" }.into()
    } else {
        format!("{x}")
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| CliError::Other(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r).map_err(|e| CliError::Other(e.to_string()))?);
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

/// One per output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Value,
    pub dataset: Option<PathBuf>,
    pub dataset_sha256: Option<String>,
    pub library_sha256: Option<String>,
    pub seed: Option<u64>,
    pub started_at: String,
    pub finished_at: String,
    pub tool_version: String,
    pub status: String,
}

pub fn timestamp(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Millis, true)
}

impl RunManifest {
    pub fn begin(command: &str, config: Value, seed: Option<u64>) -> Self {
        let now = timestamp(Utc::now());
        Self {
            command: command.into(),
            config,
            dataset: None,
            dataset_sha256: None,
            library_sha256: None,
            seed,
            started_at: now.clone(),
            finished_at: now,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            status: "running".into(),
        }
    }

    pub fn finish(mut self, dir: &Path, status: &str) -> Result<(), CliError> {
        self.finished_at = timestamp(Utc::now());
        self.status = status.into();
        write_json(&dir.join(MANIFEST_FILE), &self)
    }
}
