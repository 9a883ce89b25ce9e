//! Flat little-endian f64 arrays with JSON sidecars.
//!
//! Every array file `<stem>.bin` holds values in row-major order; the sidecar
//! `<stem>.json` describes how to interpret them. Writes go to a temporary
//! file in the same directory and are renamed into place.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::grid::{GridSpec, VariableStats, WeatherState};

/// Write `bytes` to `path` atomically (temp file + rename).
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.partial"));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

pub fn encode_f64s(values: impl IntoIterator<Item = f64>) -> Vec<u8> {
    values.into_iter().flat_map(f64::to_le_bytes).collect()
}

pub fn decode_f64s(bytes: &[u8]) -> Result<Vec<f64>> {
    if !bytes.len().is_multiple_of(8) {
        return Err(shape_err("multiple of 8 bytes", bytes.len()));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

pub fn write_f64s(path: &Path, values: impl IntoIterator<Item = f64>) -> Result<()> {
    write_atomic(path, &encode_f64s(values))
}

pub fn read_f64s(path: &Path) -> Result<Vec<f64>> {
    decode_f64s(&fs::read(path)?)
}

fn with_ext(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

/// JSON sidecar for a stack of states.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateHeader {
    pub spec: GridSpec,
    pub stats: Option<VariableStats>,
    /// One time index per stored state, in file order.
    pub time_indices: Vec<i64>,
    pub layout: String,
}

const LAYOUT: &str = "f64-le row-major (state, lat, lon, variable)";

/// Store one or more states sharing a grid as `<stem>.bin` + `<stem>.json`.
pub fn write_states(stem: &Path, states: &[WeatherState], stats: Option<&VariableStats>) -> Result<()> {
    let spec = match states.first() {
        Some(s) => (*s.spec).clone(),
        None => return Err(Error::InsufficientData("no states to write".into())),
    };
    for s in states {
        spec.check_shape(&s.values.view())?;
    }
    let header = StateHeader {
        spec,
        stats: stats.cloned(),
        time_indices: states.iter().map(|s| s.time_index).collect(),
        layout: LAYOUT.into(),
    };
    write_f64s(&with_ext(stem, "bin"), states.iter().flat_map(|s| s.values.iter().copied()))?;
    write_json(&with_ext(stem, "json"), &header)
}

pub fn read_states(stem: &Path) -> Result<(StateHeader, Vec<WeatherState>)> {
    let header: StateHeader = read_json(&with_ext(stem, "json"))?;
    let flat = read_f64s(&with_ext(stem, "bin"))?;
    let per = header.spec.n_cells() * header.spec.n_vars();
    if flat.len() != per * header.time_indices.len() {
        return Err(shape_err(per * header.time_indices.len(), flat.len()));
    }
    let spec = std::sync::Arc::new(header.spec.clone());
    let states = flat
        .chunks_exact(per.max(1))
        .zip(&header.time_indices)
        .map(|(chunk, t)| {
            let values = Array3::from_shape_vec(spec.shape(), chunk.to_vec()).map_err(|e| shape_err(per, e))?;
            WeatherState::new(spec.clone(), values, *t)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((header, states))
}
