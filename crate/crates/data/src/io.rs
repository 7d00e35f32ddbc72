//! Readers and writers for the on-disk matrix layouts.
//!
//! Two layouts are accepted by [`load_matrix`]:
//! - a directory holding a 10x-style triple `matrix.mtx`, `features.tsv`
//!   (or `genes.tsv`) and `barcodes.tsv`, each optionally gzipped. The
//!   Matrix Market file is features × barcodes.
//! - a dense CSV file whose header row holds the feature names and whose
//!   first column holds cell ids.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;

use crate::{DataError, ExpressionMatrix, Modality, Result};

const MM_BANNER: &str = "%%MatrixMarket matrix coordinate";

pub(crate) fn open_text(path: &Path) -> Result<Box<dyn BufRead>> {
    let f = File::open(path).map_err(|e| DataError::io(path, e))?;
    if path.extension().is_some_and(|e| e == "gz") {
        Ok(Box::new(BufReader::new(GzDecoder::new(f))))
    } else {
        Ok(Box::new(BufReader::new(f)))
    }
}

pub(crate) fn read_lines(path: &Path) -> Result<Vec<String>> {
    open_text(path)?
        .lines()
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| DataError::io(path, e))
}

pub(crate) fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| DataError::io(path, e))
}

/// Load one modality from a 10x directory or a dense CSV.
///
/// For 10x directories whose feature file carries a type column, only
/// `Gene Expression` rows are kept for RNA and `Antibody Capture` rows
/// for ADT.
pub fn load_matrix(path: &Path, modality: Modality) -> Result<ExpressionMatrix> {
    if path.is_dir() {
        load_10x(path, modality)
    } else {
        read_dense_csv(path, modality, false)
    }
}

fn find_file(dir: &Path, stems: &[&str]) -> Result<PathBuf> {
    for stem in stems {
        for candidate in [dir.join(stem), dir.join(format!("{stem}.gz"))] {
            if candidate.is_file() {
                return Ok(candidate);
            }
        }
    }
    Err(DataError::io(
        dir.join(stems[0]),
        std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
    ))
}

fn load_10x(dir: &Path, modality: Modality) -> Result<ExpressionMatrix> {
    let mtx = find_file(dir, &["matrix.mtx"])?;
    let features = find_file(dir, &["features.tsv", "genes.tsv"])?;
    let barcodes = find_file(dir, &["barcodes.tsv"])?;

    let feature_rows: Vec<Vec<String>> = read_lines(&features)?
        .into_iter()
        .filter(|l| !l.is_empty())
        .map(|l| l.split('\t').map(str::to_owned).collect())
        .collect();
    let barcode_ids: Vec<String> = read_lines(&barcodes)?
        .into_iter()
        .filter(|l| !l.is_empty())
        .collect();

    let (n_rows, n_cols, entries) = parse_matrix_market(&mtx)?;
    if n_rows != feature_rows.len() {
        return Err(DataError::parse(
            &mtx,
            0,
            format!(
                "header declares {n_rows} features but {} lists {}",
                features.display(),
                feature_rows.len()
            ),
        ));
    }
    if n_cols != barcode_ids.len() {
        return Err(DataError::parse(
            &mtx,
            0,
            format!(
                "header declares {n_cols} barcodes but {} lists {}",
                barcodes.display(),
                barcode_ids.len()
            ),
        ));
    }

    let wanted = match modality {
        Modality::Rna => "Gene Expression",
        Modality::Adt => "Antibody Capture",
    };
    let typed = feature_rows.iter().any(|r| r.len() >= 3);
    let mut keep = vec![usize::MAX; feature_rows.len()];
    let mut names = Vec::new();
    for (i, r) in feature_rows.iter().enumerate() {
        if typed && r.get(2).map(String::as_str) != Some(wanted) {
            continue;
        }
        keep[i] = names.len();
        names.push(r.get(1).unwrap_or(&r[0]).clone());
    }
    if names.is_empty() {
        return Err(DataError::Invalid(format!(
            "{}: no features of type {wanted:?}",
            features.display()
        )));
    }
    make_unique(&mut names);

    let triplets = entries
        .into_iter()
        .filter(|&(f, _, _)| keep[f] != usize::MAX)
        .map(|(f, c, v)| (c, keep[f], v))
        .collect();
    ExpressionMatrix::from_triplets(modality, barcode_ids, names, triplets)
}

/// Suffix repeated names with `-1`, `-2`, … in order of appearance.
fn make_unique(names: &mut [String]) {
    let mut seen: HashMap<String, usize> = HashMap::new();
    for n in names.iter() {
        *seen.entry(n.clone()).or_default() += 1;
    }
    let mut counter: HashMap<String, usize> = HashMap::new();
    for n in names.iter_mut() {
        if seen[n.as_str()] > 1 {
            let k = counter.entry(n.clone()).or_default();
            if *k > 0 {
                *n = format!("{n}-{k}");
            }
            *k += 1;
        }
    }
}

/// Parse a coordinate Matrix Market file into `(rows, cols, entries)` with
/// 0-based `(row, col, value)` entries.
pub fn parse_matrix_market(path: &Path) -> Result<(usize, usize, Vec<(usize, usize, f64)>)> {
    let reader = open_text(path)?;
    let mut lines = reader.lines().enumerate();
    let banner = match lines.next() {
        Some((_, l)) => l.map_err(|e| DataError::io(path, e))?,
        None => return Err(DataError::parse(path, 1, "empty file")),
    };
    if !banner.starts_with(MM_BANNER) {
        return Err(DataError::parse(
            path,
            1,
            format!("expected banner {MM_BANNER:?}, found {banner:?}"),
        ));
    }
    let fields: Vec<&str> = banner.split_whitespace().collect();
    if fields.get(3) == Some(&"pattern") {
        return Err(DataError::parse(path, 1, "pattern matrices carry no counts"));
    }
    if fields.get(4).is_some_and(|s| *s != "general") {
        return Err(DataError::parse(path, 1, "only general symmetry is supported"));
    }

    let mut header: Option<(usize, usize, usize)> = None;
    let mut entries = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        let line = line.map_err(|e| DataError::io(path, e))?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('%') {
            continue;
        }
        let parts: Vec<&str> = t.split_whitespace().collect();
        match header {
            None => {
                if parts.len() != 3 {
                    return Err(DataError::parse(path, lineno, "size line needs rows cols nnz"));
                }
                let p = |s: &str| {
                    s.parse::<usize>()
                        .map_err(|_| DataError::parse(path, lineno, format!("bad integer {s:?}")))
                };
                let h = (p(parts[0])?, p(parts[1])?, p(parts[2])?);
                entries.reserve(h.2);
                header = Some(h);
            }
            Some((rows, cols, _)) => {
                if parts.len() != 3 {
                    return Err(DataError::parse(path, lineno, "entry needs row col value"));
                }
                let idx = |s: &str, max: usize, what: &str| -> Result<usize> {
                    let v = s
                        .parse::<usize>()
                        .map_err(|_| DataError::parse(path, lineno, format!("bad {what} index {s:?}")))?;
                    if v == 0 || v > max {
                        return Err(DataError::parse(
                            path,
                            lineno,
                            format!("{what} index {v} out of range 1..={max}"),
                        ));
                    }
                    Ok(v - 1)
                };
                let r = idx(parts[0], rows, "row")?;
                let c = idx(parts[1], cols, "column")?;
                let v: f64 = parts[2]
                    .parse()
                    .map_err(|_| DataError::parse(path, lineno, format!("bad value {:?}", parts[2])))?;
                if !v.is_finite() || v < 0.0 {
                    return Err(DataError::parse(path, lineno, format!("negative or non-finite count {v}")));
                }
                entries.push((r, c, v));
            }
        }
    }
    let (rows, cols, nnz) = header.ok_or_else(|| DataError::parse(path, 0, "missing size line"))?;
    if entries.len() != nnz {
        return Err(DataError::parse(
            path,
            0,
            format!("header declares {nnz} entries, found {}", entries.len()),
        ));
    }
    Ok((rows, cols, entries))
}

/// Read a dense CSV. With `normalized`, negative values are accepted and
/// the result is flagged as normalized.
pub fn read_dense_csv(path: &Path, modality: Modality, normalized: bool) -> Result<ExpressionMatrix> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_reader(open_text(path)?);
    let mut records = rdr.records();
    let header = match records.next() {
        Some(r) => r.map_err(|e| DataError::parse(path, 1, e.to_string()))?,
        None => return Err(DataError::parse(path, 1, "missing header row")),
    };
    let features: Vec<String> = header.iter().skip(1).map(str::to_owned).collect();
    let mut cells = Vec::new();
    let mut rows = Vec::new();
    for rec in records {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            DataError::parse(path, line, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        if rec.len() != features.len() + 1 {
            return Err(DataError::parse(
                path,
                line,
                format!("expected {} fields, found {}", features.len() + 1, rec.len()),
            ));
        }
        cells.push(rec[0].to_owned());
        let mut row = Vec::with_capacity(features.len());
        for field in rec.iter().skip(1) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| DataError::parse(path, line, format!("bad value {field:?}")))?;
            if !v.is_finite() || (!normalized && v < 0.0) {
                return Err(DataError::parse(path, line, format!("negative or non-finite count {v}")));
            }
            row.push(v);
        }
        rows.push(row);
    }
    ExpressionMatrix::from_dense(modality, cells, features, &rows, normalized, normalized)
}

/// Write a dense CSV: header `cell_id,<features…>`, one row per cell.
///
/// Values use the shortest representation that parses back to the same
/// `f64`, so a write/read cycle is lossless.
pub fn write_dense_csv(m: &ExpressionMatrix, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let csv_err = |e: csv::Error| DataError::io(path, std::io::Error::other(e));
    let mut header = vec!["cell_id".to_string()];
    header.extend(m.feature_names().iter().cloned());
    w.write_record(&header).map_err(csv_err)?;
    let mut buf: Vec<String> = Vec::with_capacity(m.n_features() + 1);
    for c in 0..m.n_cells() {
        buf.clear();
        buf.push(m.cell_ids()[c].clone());
        buf.extend(m.row_dense(c).iter().map(|v| format!("{v}")));
        w.write_record(&buf).map_err(csv_err)?;
    }
    w.flush().map_err(|e| DataError::io(path, e))
}

/// Write a 10x-style directory (features × barcodes Matrix Market).
pub fn write_matrix_market(m: &ExpressionMatrix, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
    let kind = match m.modality() {
        Modality::Rna => "Gene Expression",
        Modality::Adt => "Antibody Capture",
    };
    let fpath = dir.join("features.tsv");
    let mut f = create(&fpath)?;
    for name in m.feature_names() {
        writeln!(f, "{name}\t{name}\t{kind}").map_err(|e| DataError::io(&fpath, e))?;
    }
    f.flush().map_err(|e| DataError::io(&fpath, e))?;

    let bpath = dir.join("barcodes.tsv");
    let mut b = create(&bpath)?;
    for id in m.cell_ids() {
        writeln!(b, "{id}").map_err(|e| DataError::io(&bpath, e))?;
    }
    b.flush().map_err(|e| DataError::io(&bpath, e))?;

    let mpath = dir.join("matrix.mtx");
    let mut w = create(&mpath)?;
    let io = |e| DataError::io(&mpath, e);
    let integer = (0..m.n_cells()).all(|c| m.row(c).1.iter().all(|v| v.fract() == 0.0));
    let field = if integer { "integer" } else { "real" };
    writeln!(w, "{MM_BANNER} {field} general").map_err(io)?;
    writeln!(w, "{} {} {}", m.n_features(), m.n_cells(), m.nnz()).map_err(io)?;
    // Column-major by barcode, matching the usual 10x ordering.
    for c in 0..m.n_cells() {
        let (idx, vals) = m.row(c);
        for (&j, &v) in idx.iter().zip(vals) {
            writeln!(w, "{} {} {v}", j + 1, c + 1).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}
