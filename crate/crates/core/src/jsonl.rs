//! Line-delimited JSON helpers shared by every artifact writer.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Deserializer, Serialize};

/// Key of the optional provenance record on the first line of an artifact.
pub const HEADER_KEY: &str = "header";

#[derive(Debug, thiserror::Error)]
pub enum JsonlError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
}

/// Accepts either a JSON string or a JSON integer as an identifier.
pub fn id_string<'de, D: Deserializer<'de>>(de: D) -> Result<String, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Id {
        Str(String),
        Int(i64),
    }
    Ok(match Id::deserialize(de)? {
        Id::Str(s) => s,
        Id::Int(n) => n.to_string(),
    })
}

/// Serializes records one per line, each terminated by `\n`.
pub fn to_lines<T: Serialize>(records: &[T]) -> String {
    let mut out = String::new();
    for record in records {
        out.push_str(&serde_json::to_string(record).expect("record serializes"));
        out.push('\n');
    }
    out
}

/// Writes an artifact: an optional header line followed by the records.
pub fn write_file<T: Serialize>(
    path: &Path,
    header: Option<&serde_json::Value>,
    records: &[T],
) -> Result<(), JsonlError> {
    let io_err = |source| JsonlError::Io {
        path: path.display().to_string(),
        source,
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io_err)?;
    }
    let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
    if let Some(header) = header {
        let line = serde_json::json!({ HEADER_KEY: header });
        writeln!(out, "{line}").map_err(io_err)?;
    }
    out.write_all(to_lines(records).as_bytes()).map_err(io_err)?;
    out.flush().map_err(io_err)
}

/// Artifact contents: the header record, if present, and the typed rows.
#[derive(Debug)]
pub struct Artifact<T> {
    pub header: Option<serde_json::Value>,
    pub records: Vec<T>,
}

pub fn read_file<T: DeserializeOwned>(path: &Path) -> Result<Artifact<T>, JsonlError> {
    let file = File::open(path).map_err(|source| JsonlError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_from(BufReader::new(file), &path.display().to_string())
}

pub fn read_from<T: DeserializeOwned, R: BufRead>(
    reader: R,
    name: &str,
) -> Result<Artifact<T>, JsonlError> {
    let mut header = None;
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| JsonlError::Io {
            path: name.to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        if idx == 0 {
            if let Ok(serde_json::Value::Object(map)) = serde_json::from_str(&line) {
                if map.len() == 1 && map.contains_key(HEADER_KEY) {
                    header = map.get(HEADER_KEY).cloned();
                    continue;
                }
            }
        }
        let record = serde_json::from_str(&line).map_err(|e| JsonlError::Parse {
            path: name.to_string(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        records.push(record);
    }
    Ok(Artifact { header, records })
}
