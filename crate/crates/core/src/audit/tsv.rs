use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

fn report_err(path: &Path, e: csv::Error) -> Error {
    Error::Report(format!("{}: {e}", path.display()))
}

pub(crate) fn write<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .delimiter(b'\t')
        .from_path(path)
        .map_err(|e| report_err(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| report_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Header and raw string cells, untouched.
pub(crate) fn read(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .from_path(path)
        .map_err(|e| report_err(path, e))?;
    let header = r
        .headers()
        .map_err(|e| report_err(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        rows.push(rec.map_err(|e| report_err(path, e))?.iter().map(str::to_string).collect());
    }
    Ok((header, rows))
}
