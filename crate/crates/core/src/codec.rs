//! Canonical serialized form: one compact JSON object per line, stable field
//! names, unknown fields rejected by every type's deserializer.

use std::io::{BufRead, Write};

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("malformed record on line {line}: {source}")]
    Malformed {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn encode<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("domain values always serialize")
}

pub fn decode<T: DeserializeOwned>(line: &str) -> Result<T, CodecError> {
    serde_json::from_str(line.trim_end_matches(['\r', '\n']))
        .map_err(|source| CodecError::Malformed { line: 1, source })
}

pub fn write_line<T: Serialize, W: Write>(mut out: W, value: &T) -> std::io::Result<()> {
    serde_json::to_writer(&mut out, value)?;
    out.write_all(b"\n")
}

/// Reads every non-blank line as one record.
pub fn read_lines<T: DeserializeOwned, R: BufRead>(input: R) -> Result<Vec<T>, CodecError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line)
            .map_err(|source| CodecError::Malformed { line: i + 1, source })?;
        out.push(value);
    }
    Ok(out)
}
