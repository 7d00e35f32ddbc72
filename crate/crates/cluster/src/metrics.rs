use std::fmt::Write;

use crate::knn::sq_dist;
use crate::{ClusterError, Partition, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairMetrics {
    pub ari: f64,
    pub fmi: f64,
    pub ji: f64,
    pub f_measure: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InformationMetrics {
    pub nmi: f64,
    pub ami: f64,
}

/// The full score sheet for one clustering. Geometric scores are `None`
/// when undefined (fewer than two clusters, or coincident centroids).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub ari: f64,
    pub nmi: f64,
    pub fmi: f64,
    pub asw: Option<f64>,
    pub ami: f64,
    pub ji: f64,
    pub sc: Option<f64>,
    pub chi: Option<f64>,
    pub f_measure: f64,
    pub dbi: Option<f64>,
}

impl MetricReport {
    /// One JSON object, fixed key order, six decimals, `null` for undefined.
    pub fn to_json(&self) -> String {
        let fields: [(&str, Option<f64>); 10] = [
            ("ari", Some(self.ari)),
            ("nmi", Some(self.nmi)),
            ("fmi", Some(self.fmi)),
            ("asw", self.asw),
            ("ami", Some(self.ami)),
            ("ji", Some(self.ji)),
            ("sc", self.sc),
            ("chi", self.chi),
            ("f_measure", Some(self.f_measure)),
            ("dbi", self.dbi),
        ];
        let mut out = String::from("{");
        for (i, (k, v)) in fields.iter().enumerate() {
            if i > 0 {
                out.push_str(", ");
            }
            match v {
                Some(x) if x.is_finite() => {
                    let s = format!("{x:.6}");
                    let s = if s.trim_start_matches('-').chars().all(|c| c == '0' || c == '.') {
                        s.trim_start_matches('-').to_owned()
                    } else {
                        s
                    };
                    write!(out, "\"{k}\": {s}").unwrap();
                }
                _ => write!(out, "\"{k}\": null").unwrap(),
            }
        }
        out.push('}');
        out
    }
}

struct Contingency {
    n: usize,
    table: Vec<Vec<usize>>,
    rows: Vec<usize>,
    cols: Vec<usize>,
}

fn contingency(truth: &Partition, pred: &Partition) -> Result<Contingency> {
    if truth.len() != pred.len() {
        return Err(ClusterError::contract(
            "metrics",
            format!("partitions have {} and {} nodes", truth.len(), pred.len()),
        ));
    }
    let mut table = vec![vec![0usize; pred.n_communities()]; truth.n_communities()];
    for (&t, &p) in truth.assignment().iter().zip(pred.assignment()) {
        table[t][p] += 1;
    }
    Ok(Contingency {
        n: truth.len(),
        rows: truth.community_sizes(),
        cols: pred.community_sizes(),
        table,
    })
}

fn comb2(x: usize) -> f64 {
    let x = x as f64;
    x * (x - 1.0) / 2.0
}

/// ARI, Fowlkes-Mallows, Jaccard and pairwise F1 from pair counts.
pub fn pair_counting_metrics(truth: &Partition, pred: &Partition) -> Result<PairMetrics> {
    let ct = contingency(truth, pred)?;
    if ct.n < 2 {
        return Err(ClusterError::contract("pair_counting_metrics", "need at least 2 nodes"));
    }
    let a: f64 = ct.table.iter().flatten().map(|&x| comb2(x)).sum();
    let same_truth: f64 = ct.rows.iter().map(|&x| comb2(x)).sum();
    let same_pred: f64 = ct.cols.iter().map(|&x| comb2(x)).sum();
    let total = comb2(ct.n);
    let (b, c) = (same_truth - a, same_pred - a);

    let expected = same_truth * same_pred / total;
    let max_index = 0.5 * (same_truth + same_pred);
    let ari = if max_index == expected {
        1.0
    } else {
        (a - expected) / (max_index - expected)
    };
    // No co-clustered pair on either side: the partitions agree on every pair.
    let (fmi, ji, f_measure) = if a + b + c == 0.0 {
        (1.0, 1.0, 1.0)
    } else {
        let fmi = if same_truth == 0.0 || same_pred == 0.0 {
            0.0
        } else {
            a / (same_truth * same_pred).sqrt()
        };
        (fmi, a / (a + b + c), 2.0 * a / (2.0 * a + b + c))
    };
    Ok(PairMetrics { ari, fmi, ji, f_measure })
}

fn entropy(sizes: &[usize], n: usize) -> f64 {
    let n = n as f64;
    sizes
        .iter()
        .filter(|&&s| s > 0)
        .map(|&s| {
            let p = s as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// NMI and AMI, both normalized by the arithmetic mean of the two entropies.
pub fn information_metrics(truth: &Partition, pred: &Partition) -> Result<InformationMetrics> {
    let ct = contingency(truth, pred)?;
    if ct.n == 0 {
        return Err(ClusterError::contract("information_metrics", "partitions are empty"));
    }
    let n = ct.n as f64;
    let (hu, hv) = (entropy(&ct.rows, ct.n), entropy(&ct.cols, ct.n));
    if ct.rows.len() == 1 && ct.cols.len() == 1 {
        return Ok(InformationMetrics { nmi: 1.0, ami: 1.0 });
    }
    let mut mi = 0.0;
    for (i, row) in ct.table.iter().enumerate() {
        for (j, &nij) in row.iter().enumerate() {
            if nij > 0 {
                let nij = nij as f64;
                mi += nij / n * (n * nij / (ct.rows[i] as f64 * ct.cols[j] as f64)).ln();
            }
        }
    }
    let mean_h = 0.5 * (hu + hv);
    let nmi = if mean_h > 0.0 { (mi / mean_h).clamp(0.0, 1.0) } else { 0.0 };

    let emi = expected_mutual_information(&ct.rows, &ct.cols, ct.n);
    let denom = mean_h - emi;
    // Zero only when every relabeling gives the same, maximal MI, as for
    // two all-singleton partitions; those agree exactly.
    let ami = if denom.abs() < 1e-12 {
        1.0
    } else {
        ((mi - emi) / denom).min(1.0)
    };
    Ok(InformationMetrics { nmi, ami })
}

/// Expected mutual information under the hypergeometric model of random
/// labelings with fixed cluster sizes.
fn expected_mutual_information(rows: &[usize], cols: &[usize], n: usize) -> f64 {
    let mut log_fact = vec![0.0; n + 1];
    for i in 1..=n {
        log_fact[i] = log_fact[i - 1] + (i as f64).ln();
    }
    let nf = n as f64;
    let mut emi = 0.0;
    for &a in rows {
        for &b in cols {
            let lo = (a + b).saturating_sub(n).max(1);
            let hi = a.min(b);
            for nij in lo..=hi {
                let x = nij as f64;
                let term = x / nf * (nf * x / (a as f64 * b as f64)).ln();
                let log_p = log_fact[a] + log_fact[b] + log_fact[n - a] + log_fact[n - b]
                    - log_fact[n]
                    - log_fact[nij]
                    - log_fact[a - nij]
                    - log_fact[b - nij]
                    - log_fact[n + nij - a - b];
                emi += term * log_p.exp();
            }
        }
    }
    emi
}

fn check_points(op: &'static str, points: &[Vec<f64>], labels: &Partition) -> Result<()> {
    if points.len() != labels.len() {
        return Err(ClusterError::contract(
            op,
            format!("{} points but {} labels", points.len(), labels.len()),
        ));
    }
    if let Some(d) = points.first().map(Vec::len) {
        if points.iter().any(|p| p.len() != d) {
            return Err(ClusterError::contract(op, "points have different widths"));
        }
    }
    Ok(())
}

/// Mean silhouette. Singleton clusters score 0; `None` with fewer than two
/// clusters.
pub fn silhouette(points: &[Vec<f64>], labels: &Partition) -> Result<Option<f64>> {
    check_points("silhouette", points, labels)?;
    let k = labels.n_communities();
    if k < 2 {
        return Ok(None);
    }
    let sizes = labels.community_sizes();
    let a = labels.assignment();
    let n = points.len();
    let mut total = 0.0;
    let mut sums = vec![0.0; k];
    for i in 0..n {
        sums.iter_mut().for_each(|s| *s = 0.0);
        for j in 0..n {
            if j != i {
                sums[a[j]] += sq_dist(&points[i], &points[j]).sqrt();
            }
        }
        let own = a[i];
        if sizes[own] == 1 {
            continue;
        }
        let ai = sums[own] / (sizes[own] - 1) as f64;
        let bi = (0..k)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = ai.max(bi);
        if denom > 0.0 {
            total += (bi - ai) / denom;
        }
    }
    Ok(Some(total / n as f64))
}

fn centroids(points: &[Vec<f64>], labels: &Partition) -> Vec<Vec<f64>> {
    let d = points.first().map_or(0, Vec::len);
    let sizes = labels.community_sizes();
    let mut cents = vec![vec![0.0; d]; labels.n_communities()];
    for (p, &c) in points.iter().zip(labels.assignment()) {
        for (x, v) in cents[c].iter_mut().zip(p) {
            *x += v;
        }
    }
    for (cent, &s) in cents.iter_mut().zip(&sizes) {
        cent.iter_mut().for_each(|x| *x /= s as f64);
    }
    cents
}

/// Calinski-Harabasz variance ratio; `None` unless `2 <= k < n` and the
/// within-cluster dispersion is positive.
pub fn calinski_harabasz(points: &[Vec<f64>], labels: &Partition) -> Result<Option<f64>> {
    check_points("calinski_harabasz", points, labels)?;
    let (n, k) = (points.len(), labels.n_communities());
    if k < 2 || k >= n {
        return Ok(None);
    }
    let d = points[0].len();
    let mut mean = vec![0.0; d];
    for p in points {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v / n as f64;
        }
    }
    let cents = centroids(points, labels);
    let sizes = labels.community_sizes();
    let between: f64 = cents
        .iter()
        .zip(&sizes)
        .map(|(c, &s)| s as f64 * sq_dist(c, &mean))
        .sum();
    let within: f64 = points
        .iter()
        .zip(labels.assignment())
        .map(|(p, &c)| sq_dist(p, &cents[c]))
        .sum();
    if within <= 0.0 {
        return Ok(None);
    }
    Ok(Some(between / (k - 1) as f64 / (within / (n - k) as f64)))
}

/// Davies-Bouldin index; `None` with fewer than two clusters or when two
/// centroids coincide.
pub fn davies_bouldin(points: &[Vec<f64>], labels: &Partition) -> Result<Option<f64>> {
    check_points("davies_bouldin", points, labels)?;
    let k = labels.n_communities();
    if k < 2 {
        return Ok(None);
    }
    let cents = centroids(points, labels);
    let sizes = labels.community_sizes();
    let mut spread = vec![0.0; k];
    for (p, &c) in points.iter().zip(labels.assignment()) {
        spread[c] += sq_dist(p, &cents[c]).sqrt() / sizes[c] as f64;
    }
    let mut total = 0.0;
    for i in 0..k {
        let mut worst: f64 = 0.0;
        for j in 0..k {
            if i == j {
                continue;
            }
            let dist = sq_dist(&cents[i], &cents[j]).sqrt();
            if dist == 0.0 {
                return Ok(None);
            }
            worst = worst.max((spread[i] + spread[j]) / dist);
        }
        total += worst;
    }
    Ok(Some(total / k as f64))
}

/// All ten scores for `pred` against `truth` on the given embedding.
/// SC uses the predicted clusters, ASW the true labels.
pub fn evaluate(points: &[Vec<f64>], truth: &Partition, pred: &Partition) -> Result<MetricReport> {
    let pairs = pair_counting_metrics(truth, pred)?;
    let info = information_metrics(truth, pred)?;
    Ok(MetricReport {
        ari: pairs.ari,
        nmi: info.nmi,
        fmi: pairs.fmi,
        asw: silhouette(points, truth)?,
        ami: info.ami,
        ji: pairs.ji,
        sc: silhouette(points, pred)?,
        chi: calinski_harabasz(points, pred)?,
        f_measure: pairs.f_measure,
        dbi: davies_bouldin(points, pred)?,
    })
}
