use crate::{DataError, ExpressionMatrix, Result};

/// Keep the `n_top` features with the largest variance across cells.
///
/// Ties go to the lower feature index. Kept columns stay in their input
/// order. Returns the reduced matrix and the kept input indices.
pub fn select_hvg(m: &ExpressionMatrix, n_top: usize) -> Result<(ExpressionMatrix, Vec<usize>)> {
    if n_top == 0 {
        return Err(DataError::contract("select_hvg", "n_top must be positive"));
    }
    let nf = m.n_features();
    if nf <= n_top {
        let all: Vec<usize> = (0..nf).collect();
        return Ok((m.select_features(&all)?, all));
    }
    let var = feature_variance(m);
    let mut order: Vec<usize> = (0..nf).collect();
    order.sort_by(|&a, &b| var[b].total_cmp(&var[a]).then(a.cmp(&b)));
    let mut keep = order[..n_top].to_vec();
    keep.sort_unstable();
    Ok((m.select_features(&keep)?, keep))
}

/// Population variance of each column.
pub(crate) fn feature_variance(m: &ExpressionMatrix) -> Vec<f64> {
    let n = m.n_cells().max(1) as f64;
    let nf = m.n_features();
    let mut mean = vec![0.0; nf];
    for c in 0..m.n_cells() {
        let (idx, vals) = m.row(c);
        for (&j, &v) in idx.iter().zip(vals) {
            mean[j] += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= n);
    // Two-pass over stored entries; implicit zeros contribute mean².
    let mut ss = vec![0.0; nf];
    let mut stored = vec![0usize; nf];
    for c in 0..m.n_cells() {
        let (idx, vals) = m.row(c);
        for (&j, &v) in idx.iter().zip(vals) {
            ss[j] += (v - mean[j]) * (v - mean[j]);
            stored[j] += 1;
        }
    }
    (0..nf)
        .map(|j| {
            let zeros = (m.n_cells() - stored[j]) as f64;
            (ss[j] + zeros * mean[j] * mean[j]) / n
        })
        .collect()
}
