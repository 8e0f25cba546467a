//! Shared file helpers for the commands.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{CliError, CliResult};

/// Reads a JSON config, or the type's defaults when no file is given.
pub fn load_config<C: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<C> {
    let Some(path) = path else {
        return Ok(C::default());
    };
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::ConfigFile { path: path.into(), message: e.to_string() })?;
    serde_json::from_str(&text).map_err(|e| CliError::ConfigFile { path: path.into(), message: e.to_string() })
}

pub fn require(path: &Option<PathBuf>, what: &str) -> CliResult<PathBuf> {
    path.clone().ok_or_else(|| CliError::Missing(format!("{what} (flag or config)")))
}

pub fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| normgauge::Error::Io { path: dir.into(), source: e }.into())
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| normgauge::Error::Io { path: path.into(), source: e }.into())
}

pub fn write_json<V: Serialize>(path: &Path, value: &V) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| normgauge::Error::Json { path: path.into(), source: e })?;
    write_text(path, &(text + "\n"))
}

/// Writes the fully resolved configuration next to the outputs.
pub fn echo_config<V: Serialize>(out: &Path, config: &V) -> CliResult<()> {
    write_json(&out.join("run_config.json"), config)
}

/// Parses `A=0.01,B=0.5` into pairs.
pub fn parse_fractions(s: &str) -> CliResult<Vec<(String, f64)>> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            let (k, v) = p
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("expected LABEL=FRACTION, got '{p}'")))?;
            let v: f64 = v.trim().parse().map_err(|_| CliError::Usage(format!("'{v}' is not a number in '{p}'")))?;
            Ok((k.trim().to_string(), v))
        })
        .collect()
}

pub fn split_list(s: &str) -> Vec<String> {
    s.split(',').map(str::trim).filter(|v| !v.is_empty()).map(String::from).collect()
}
