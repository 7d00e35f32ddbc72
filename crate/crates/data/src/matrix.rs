use std::collections::{HashMap, HashSet};
use std::fmt;

use crate::{DataError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Rna,
    Adt,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Rna => "RNA",
            Modality::Adt => "ADT",
        })
    }
}

/// Cells × features matrix for one modality, stored compressed by cell.
///
/// Column indices within a row are strictly increasing. Explicit zeros are
/// allowed (normalized protein data is dense).
#[derive(Clone, Debug, PartialEq)]
pub struct ExpressionMatrix {
    modality: Modality,
    cell_ids: Vec<String>,
    feature_names: Vec<String>,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
    normalized: bool,
}

impl ExpressionMatrix {
    /// Build from `(cell, feature, value)` triplets in any order.
    ///
    /// Duplicate coordinates are summed. Raw (unnormalized) values must be
    /// finite and non-negative.
    pub fn from_triplets(
        modality: Modality,
        cell_ids: Vec<String>,
        feature_names: Vec<String>,
        mut triplets: Vec<(usize, usize, f64)>,
    ) -> Result<Self> {
        let (nc, nf) = (cell_ids.len(), feature_names.len());
        for &(c, f, v) in &triplets {
            if c >= nc || f >= nf {
                return Err(DataError::Invalid(format!(
                    "entry ({c}, {f}) outside {nc}×{nf}"
                )));
            }
            if !v.is_finite() || v < 0.0 {
                return Err(DataError::Invalid(format!(
                    "count {v} at ({c}, {f}) must be finite and non-negative"
                )));
            }
        }
        triplets.sort_by_key(|&(c, f, _)| (c, f));
        let mut indptr = vec![0usize; nc + 1];
        let mut indices = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (c, f, v) in triplets {
            if last == Some((c, f)) {
                *values.last_mut().unwrap() += v;
                continue;
            }
            last = Some((c, f));
            indptr[c + 1] += 1;
            indices.push(f);
            values.push(v);
        }
        for i in 0..nc {
            indptr[i + 1] += indptr[i];
        }
        let m = ExpressionMatrix {
            modality,
            cell_ids,
            feature_names,
            indptr,
            indices,
            values,
            normalized: false,
        };
        m.validate()?;
        Ok(m)
    }

    /// Build from dense rows. Zeros are not stored unless `keep_zeros`.
    pub fn from_dense(
        modality: Modality,
        cell_ids: Vec<String>,
        feature_names: Vec<String>,
        rows: &[Vec<f64>],
        normalized: bool,
        keep_zeros: bool,
    ) -> Result<Self> {
        if rows.len() != cell_ids.len() {
            return Err(DataError::Invalid(format!(
                "{} rows for {} cell ids",
                rows.len(),
                cell_ids.len()
            )));
        }
        let nf = feature_names.len();
        let mut indptr = Vec::with_capacity(rows.len() + 1);
        indptr.push(0);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        for (i, row) in rows.iter().enumerate() {
            if row.len() != nf {
                return Err(DataError::Invalid(format!(
                    "row {i} has {} values, expected {nf}",
                    row.len()
                )));
            }
            for (j, &v) in row.iter().enumerate() {
                if keep_zeros || v != 0.0 {
                    indices.push(j);
                    values.push(v);
                }
            }
            indptr.push(indices.len());
        }
        let m = ExpressionMatrix {
            modality,
            cell_ids,
            feature_names,
            indptr,
            indices,
            values,
            normalized,
        };
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        check_unique("feature", &self.feature_names)?;
        check_unique("cell", &self.cell_ids)?;
        for v in &self.values {
            if !v.is_finite() {
                return Err(DataError::Invalid(format!("non-finite value {v}")));
            }
            if !self.normalized && *v < 0.0 {
                return Err(DataError::Invalid(format!("negative count {v}")));
            }
        }
        Ok(())
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn n_cells(&self) -> usize {
        self.cell_ids.len()
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn cell_ids(&self) -> &[String] {
        &self.cell_ids
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Stored `(feature indices, values)` of one cell.
    pub fn row(&self, cell: usize) -> (&[usize], &[f64]) {
        let (a, b) = (self.indptr[cell], self.indptr[cell + 1]);
        (&self.indices[a..b], &self.values[a..b])
    }

    pub fn row_dense(&self, cell: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.n_features()];
        let (idx, vals) = self.row(cell);
        for (&j, &v) in idx.iter().zip(vals) {
            out[j] = v;
        }
        out
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        (0..self.n_cells()).map(|i| self.row_dense(i)).collect()
    }

    pub fn get(&self, cell: usize, feature: usize) -> f64 {
        let (idx, vals) = self.row(cell);
        idx.binary_search(&feature).map(|k| vals[k]).unwrap_or(0.0)
    }

    pub fn row_sum(&self, cell: usize) -> f64 {
        self.row(cell).1.iter().sum()
    }

    /// Column subset in the given order.
    pub fn select_features(&self, keep: &[usize]) -> Result<Self> {
        let mut remap = vec![usize::MAX; self.n_features()];
        for (new, &old) in keep.iter().enumerate() {
            if old >= self.n_features() {
                return Err(DataError::contract(
                    "select_features",
                    format!("feature {old} out of range"),
                ));
            }
            remap[old] = new;
        }
        let names = keep.iter().map(|&j| self.feature_names[j].clone()).collect();
        let rows: Vec<Vec<(usize, f64)>> = (0..self.n_cells())
            .map(|c| {
                let (idx, vals) = self.row(c);
                let mut r: Vec<(usize, f64)> = idx
                    .iter()
                    .zip(vals)
                    .filter(|(&j, _)| remap[j] != usize::MAX)
                    .map(|(&j, &v)| (remap[j], v))
                    .collect();
                r.sort_by_key(|e| e.0);
                r
            })
            .collect();
        Ok(self.rebuild(self.cell_ids.clone(), names, rows))
    }

    /// Row subset in the given order.
    pub fn select_cells(&self, keep: &[usize]) -> Self {
        let ids = keep.iter().map(|&i| self.cell_ids[i].clone()).collect();
        let rows = keep
            .iter()
            .map(|&c| {
                let (idx, vals) = self.row(c);
                idx.iter().copied().zip(vals.iter().copied()).collect()
            })
            .collect();
        self.rebuild(ids, self.feature_names.clone(), rows)
    }

    /// Reindex columns to `names`; features absent here become zero columns.
    /// Returns the matrix and the names that were missing.
    pub fn align_features(&self, names: &[String]) -> Result<(Self, Vec<String>)> {
        let pos: HashMap<&str, usize> = self
            .feature_names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_str(), i))
            .collect();
        let mut missing = Vec::new();
        let mut remap = vec![usize::MAX; self.n_features()];
        for (new, name) in names.iter().enumerate() {
            match pos.get(name.as_str()) {
                Some(&old) => remap[old] = new,
                None => missing.push(name.clone()),
            }
        }
        let rows = (0..self.n_cells())
            .map(|c| {
                let (idx, vals) = self.row(c);
                let mut r: Vec<(usize, f64)> = idx
                    .iter()
                    .zip(vals)
                    .filter(|(&j, _)| remap[j] != usize::MAX)
                    .map(|(&j, &v)| (remap[j], v))
                    .collect();
                r.sort_by_key(|e| e.0);
                r
            })
            .collect();
        let mut out = self.rebuild(self.cell_ids.clone(), names.to_vec(), rows);
        check_unique("feature", &out.feature_names)?;
        out.normalized = self.normalized;
        Ok((out, missing))
    }

    /// Same layout with a different value per stored entry.
    pub(crate) fn with_rows(&self, rows: Vec<Vec<(usize, f64)>>, normalized: bool) -> Self {
        let mut m = self.rebuild(self.cell_ids.clone(), self.feature_names.clone(), rows);
        m.normalized = normalized;
        m
    }

    pub(crate) fn rebuild(
        &self,
        cell_ids: Vec<String>,
        feature_names: Vec<String>,
        rows: Vec<Vec<(usize, f64)>>,
    ) -> Self {
        let mut indptr = Vec::with_capacity(rows.len() + 1);
        indptr.push(0);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        for r in rows {
            for (j, v) in r {
                indices.push(j);
                values.push(v);
            }
            indptr.push(indices.len());
        }
        ExpressionMatrix {
            modality: self.modality,
            cell_ids,
            feature_names,
            indptr,
            indices,
            values,
            normalized: self.normalized,
        }
    }

    pub fn with_modality(mut self, modality: Modality) -> Self {
        self.modality = modality;
        self
    }

    pub fn into_normalized(mut self) -> Self {
        self.normalized = true;
        self
    }
}

fn check_unique(kind: &str, names: &[String]) -> Result<()> {
    let mut seen = HashSet::with_capacity(names.len());
    for n in names {
        if !seen.insert(n.as_str()) {
            return Err(DataError::Invalid(format!("duplicate {kind} name {n:?}")));
        }
    }
    Ok(())
}
