use std::path::Path;

use crate::io::{create, open_text};
use crate::{DataError, Result};

/// One row of a `cell_id,cell_type` labels file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelRecord {
    pub cell_id: String,
    pub cell_type: String,
}

pub fn read_labels(path: &Path) -> Result<Vec<LabelRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(open_text(path)?);
    let headers = rdr
        .headers()
        .map_err(|e| DataError::parse(path, 1, e.to_string()))?
        .clone();
    if headers.len() < 2 || &headers[0] != "cell_id" || &headers[1] != "cell_type" {
        return Err(DataError::parse(path, 1, "header must be cell_id,cell_type"));
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            DataError::parse(path, line, e.to_string())
        })?;
        if rec.len() < 2 {
            let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
            return Err(DataError::parse(path, line, "expected cell_id,cell_type"));
        }
        out.push(LabelRecord {
            cell_id: rec[0].to_owned(),
            cell_type: rec[1].to_owned(),
        });
    }
    Ok(out)
}

pub fn write_labels(labels: &[LabelRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let err = |e: csv::Error| DataError::io(path, std::io::Error::other(e));
    w.write_record(["cell_id", "cell_type"]).map_err(err)?;
    for l in labels {
        w.write_record([&l.cell_id, &l.cell_type]).map_err(err)?;
    }
    w.flush().map_err(|e| DataError::io(path, e))
}
