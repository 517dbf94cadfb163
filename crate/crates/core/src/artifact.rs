//! Versioned JSON artifacts shared by the offline pipeline stages.

use std::fs;
use std::path::Path;

use nalgebra::Matrix4;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub const TRANSITIONS_VERSION: u32 = 1;
pub const DYNAMICS_VERSION: u32 = 1;
pub const EBM_VERSION: u32 = 1;

pub trait Versioned {
    const VERSION: u32;
    /// CLI invocation that regenerates the artifact.
    const COMMAND: &'static str;
    fn version(&self) -> u32;
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn load_versioned<T: DeserializeOwned + Versioned>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingArtifact {
            path: path.display().to_string(),
            command: T::COMMAND.to_string(),
        });
    }
    let text = fs::read_to_string(path)?;
    let raw: serde_json::Value = serde_json::from_str(&text)?;
    let found = raw.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if found != T::VERSION {
        return Err(Error::SchemaVersion {
            path: path.display().to_string(),
            found,
            expected: T::VERSION,
            command: T::COMMAND.to_string(),
        });
    }
    Ok(serde_json::from_value(raw)?)
}

/// Reads a JSON-lines file into records.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    if !path.exists() {
        return Err(Error::MissingArtifact {
            path: path.display().to_string(),
            command: "airhockey plan-shots".to_string(),
        });
    }
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Serializes a 4x4 matrix as nested row-major arrays.
pub mod row_major {
    use super::*;

    pub fn serialize<S: Serializer>(m: &Matrix4<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
        let rows: Vec<[f64; 4]> = (0..4).map(|i| [m[(i, 0)], m[(i, 1)], m[(i, 2)], m[(i, 3)]]).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Matrix4<f64>, D::Error> {
        let rows: [[f64; 4]; 4] = Deserialize::deserialize(d)?;
        Ok(Matrix4::from_fn(|i, j| rows[i][j]))
    }
}
