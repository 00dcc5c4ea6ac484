//! Versioned JSON files.
//!
//! Every file is an object `{"format": ..., "version": ..., "units": ...,
//! "data": ...}`. Loading checks the format tag and version before decoding
//! the payload. Floats are written with round-trip precision, so a save and
//! load reproduces values bit for bit.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const FORMAT_VERSION: u32 = 1;
pub const UNITS: &str = "meters, pixels, degrees";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: String,
        source: serde_json::Error,
    },
    #[error("{path}: expected format `{expected}` version {version}, found `{found}` version {found_version}")]
    Format {
        path: String,
        expected: String,
        version: u32,
        found: String,
        found_version: u32,
    },
}

#[derive(Serialize)]
struct EnvelopeRef<'a, T> {
    format: &'a str,
    version: u32,
    units: &'a str,
    data: &'a T,
}

#[derive(Deserialize)]
struct Header {
    format: String,
    version: u32,
}

#[derive(Deserialize)]
struct Envelope<T> {
    data: T,
}

pub fn to_string<T: Serialize>(format: &str, value: &T) -> Result<String, serde_json::Error> {
    serde_json::to_string_pretty(&EnvelopeRef {
        format,
        version: FORMAT_VERSION,
        units: UNITS,
        data: value,
    })
}

pub fn save_json<T: Serialize>(path: &Path, format: &str, value: &T) -> Result<(), StoreError> {
    let p = path.display().to_string();
    let text = to_string(format, value).map_err(|e| StoreError::Parse {
        path: p.clone(),
        source: e,
    })?;
    fs::write(path, text).map_err(|e| StoreError::Io { path: p, source: e })
}

pub fn load_json<T: DeserializeOwned>(path: &Path, format: &str) -> Result<T, StoreError> {
    let p = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|e| StoreError::Io {
        path: p.clone(),
        source: e,
    })?;
    let parse = |e| StoreError::Parse {
        path: p.clone(),
        source: e,
    };
    let header: Header = serde_json::from_str(&text).map_err(parse)?;
    if header.format != format || header.version != FORMAT_VERSION {
        return Err(StoreError::Format {
            path: p,
            expected: format.to_string(),
            version: FORMAT_VERSION,
            found: header.format,
            found_version: header.version,
        });
    }
    let env: Envelope<T> = serde_json::from_str(&text).map_err(parse)?;
    Ok(env.data)
}
