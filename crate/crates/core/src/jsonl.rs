//! Line-delimited JSON helpers shared by every on-disk format.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum JsonlError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Parses one record per non-blank line. Line numbers are 1-based.
pub fn parse<T: DeserializeOwned, R: BufRead>(reader: R) -> Result<Vec<(usize, T)>, JsonlError> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| JsonlError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let value = serde_json::from_str(trimmed).map_err(|e| JsonlError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        out.push((line_no, value));
    }
    Ok(out)
}

pub fn read_file<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>, JsonlError> {
    let file = File::open(path).map_err(|source| JsonlError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse(BufReader::new(file))
}

pub fn to_string<'a, T: Serialize + 'a>(records: impl IntoIterator<Item = &'a T>) -> String {
    let mut out = String::new();
    for record in records {
        // Serialising plain data structs cannot fail.
        out.push_str(&serde_json::to_string(record).expect("serializable record"));
        out.push('\n');
    }
    out
}

pub fn write_file<'a, T: Serialize + 'a>(
    path: &Path,
    records: impl IntoIterator<Item = &'a T>,
) -> io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(to_string(records).as_bytes())?;
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn skips_blank_lines_and_reports_line_numbers() {
        let input = "{\"a\":1}\n\n{\"a\":2}\n";
        let rows: Vec<(usize, serde_json::Value)> = parse(input.as_bytes()).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].0, 3);

        let err = parse::<serde_json::Value, _>("{\"a\":1}\n{oops\n".as_bytes()).unwrap_err();
        assert!(matches!(err, JsonlError::Parse { line: 2, .. }));
    }
}
