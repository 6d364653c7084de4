//! JSON Lines helpers shared by the corpus, instance and probe files.

use std::io::{self, BufRead, BufWriter, Write};

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum JsonlError {
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn write_all<W: Write, T: Serialize>(out: W, items: &[T]) -> io::Result<()> {
    let mut out = BufWriter::new(out);
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

/// Reads every non-blank line as one `T`.
pub fn read_all<R: BufRead, T: DeserializeOwned>(reader: R) -> Result<Vec<T>, JsonlError> {
    let mut items = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|source| JsonlError::Parse { line: i + 1, source })?;
        items.push(item);
    }
    Ok(items)
}
