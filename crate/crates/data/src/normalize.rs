use std::collections::HashMap;
use std::path::Path;

use crate::io::read_lines;
use crate::{DataError, ExpressionMatrix, Modality, Result};

/// Centered log-ratio per cell on counts shifted by `pseudocount`.
///
/// Output is dense: every protein gets a value, and each row sums to zero.
pub fn clr_normalize(m: &ExpressionMatrix, pseudocount: f64) -> Result<ExpressionMatrix> {
    if m.modality() != Modality::Adt {
        return Err(DataError::contract("clr_normalize", "expects an ADT matrix"));
    }
    if !(pseudocount > 0.0) {
        return Err(DataError::contract("clr_normalize", "pseudocount must be positive"));
    }
    let nf = m.n_features();
    if nf == 0 {
        return Err(DataError::contract("clr_normalize", "matrix has no features"));
    }
    let rows = (0..m.n_cells())
        .map(|c| {
            let logs: Vec<f64> = m.row_dense(c).iter().map(|v| (v + pseudocount).ln()).collect();
            let log_gm = logs.iter().sum::<f64>() / nf as f64;
            logs.into_iter()
                .enumerate()
                .map(|(j, l)| (j, l - log_gm))
                .collect()
        })
        .collect();
    Ok(m.with_rows(rows, true))
}

/// Gene lengths in bases, keyed by symbol.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GeneLengthTable {
    lengths: HashMap<String, f64>,
}

impl GeneLengthTable {
    pub fn from_pairs<I: IntoIterator<Item = (String, f64)>>(pairs: I) -> Result<Self> {
        let mut lengths = HashMap::new();
        for (g, l) in pairs {
            if !(l > 0.0) || !l.is_finite() {
                return Err(DataError::Invalid(format!("gene {g}: length {l} must be positive")));
            }
            if lengths.insert(g.clone(), l).is_some() {
                return Err(DataError::Invalid(format!("gene {g} listed twice")));
            }
        }
        Ok(GeneLengthTable { lengths })
    }

    /// Read a `gene_symbol<TAB>length` file with a header row.
    pub fn load(path: &Path) -> Result<Self> {
        let lines = read_lines(path)?;
        let mut it = lines.iter().enumerate();
        match it.next() {
            Some((_, h)) if h.split('\t').next() == Some("gene_symbol") => {}
            _ => return Err(DataError::parse(path, 1, "header must be gene_symbol<TAB>length")),
        }
        let mut lengths = HashMap::new();
        for (i, line) in it {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() < 2 {
                return Err(DataError::parse(path, i + 1, "expected gene_symbol<TAB>length"));
            }
            let len: f64 = parts[1]
                .trim()
                .parse()
                .map_err(|_| DataError::parse(path, i + 1, format!("bad length {:?}", parts[1])))?;
            if !(len > 0.0) || !len.is_finite() {
                return Err(DataError::parse(path, i + 1, format!("length {len} must be positive")));
            }
            if lengths.insert(parts[0].to_owned(), len).is_some() {
                return Err(DataError::parse(path, i + 1, format!("gene {} listed twice", parts[0])));
            }
        }
        Ok(GeneLengthTable { lengths })
    }

    pub fn get(&self, gene: &str) -> Option<f64> {
        self.lengths.get(gene).copied()
    }

    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }
}

/// Result of [`rna_normalize`] together with what had to be removed.
#[derive(Clone, Debug, PartialEq)]
pub struct RnaNormalization {
    pub matrix: ExpressionMatrix,
    /// Cells with zero total counts, which cannot be scaled.
    pub dropped_cells: Vec<String>,
    /// Genes without a length entry (RPKM only).
    pub dropped_genes: Vec<String>,
}

/// RPKM when `lengths` is given, otherwise CPM, optionally followed by
/// `log1p`.
///
/// Library size is the cell's total count over all input genes.
pub fn rna_normalize(
    m: &ExpressionMatrix,
    lengths: Option<&GeneLengthTable>,
    log1p: bool,
) -> Result<RnaNormalization> {
    if m.modality() != Modality::Rna {
        return Err(DataError::contract("rna_normalize", "expects an RNA matrix"));
    }
    let totals: Vec<f64> = (0..m.n_cells()).map(|c| m.row_sum(c)).collect();
    let kept_cells: Vec<usize> = (0..m.n_cells()).filter(|&c| totals[c] > 0.0).collect();
    let dropped_cells = (0..m.n_cells())
        .filter(|&c| totals[c] <= 0.0)
        .map(|c| m.cell_ids()[c].clone())
        .collect();

    // Per-gene multiplier: 1e9 / length for RPKM, 1e6 for CPM.
    let (scale, kept_genes, dropped_genes): (Vec<f64>, Vec<usize>, Vec<String>) = match lengths {
        Some(table) => {
            let mut scale = Vec::new();
            let mut kept = Vec::new();
            let mut dropped = Vec::new();
            for (j, g) in m.feature_names().iter().enumerate() {
                match table.get(g) {
                    Some(len) => {
                        kept.push(j);
                        scale.push(1e9 / len);
                    }
                    None => dropped.push(g.clone()),
                }
            }
            (scale, kept, dropped)
        }
        None => (vec![1e6; m.n_features()], (0..m.n_features()).collect(), Vec::new()),
    };

    let mut gene_pos = vec![usize::MAX; m.n_features()];
    for (new, &old) in kept_genes.iter().enumerate() {
        gene_pos[old] = new;
    }
    let rows = kept_cells
        .iter()
        .map(|&c| {
            let (idx, vals) = m.row(c);
            idx.iter()
                .zip(vals)
                .filter(|(&j, _)| gene_pos[j] != usize::MAX)
                .map(|(&j, &v)| {
                    let k = gene_pos[j];
                    let x = v * scale[k] / totals[c];
                    (k, if log1p { x.ln_1p() } else { x })
                })
                .collect()
        })
        .collect();
    let cell_ids = kept_cells.iter().map(|&c| m.cell_ids()[c].clone()).collect();
    let names = kept_genes.iter().map(|&j| m.feature_names()[j].clone()).collect();
    let mut matrix = m.rebuild(cell_ids, names, rows).into_normalized();
    matrix = matrix.with_modality(Modality::Rna);
    Ok(RnaNormalization {
        matrix,
        dropped_cells,
        dropped_genes,
    })
}
