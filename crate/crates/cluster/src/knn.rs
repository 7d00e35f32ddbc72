use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::{ClusterError, Result};

/// Directed k-nearest-neighbour graph; every edge has weight 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KnnGraph {
    k: usize,
    neighbors: Vec<Vec<usize>>,
}

impl KnnGraph {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.neighbors.len()
    }

    /// Out-neighbours of `i`, nearest first.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }
}

/// Exact Euclidean kNN by brute force. Ties go to the lower index.
pub fn build_knn(points: &[Vec<f64>], k: usize) -> Result<KnnGraph> {
    let n = points.len();
    if k == 0 || k >= n {
        return Err(ClusterError::contract("build_knn", format!("need 1 <= k < n, got k={k}, n={n}")));
    }
    let d = points[0].len();
    if points.iter().any(|p| p.len() != d) {
        return Err(ClusterError::contract("build_knn", "points have different widths"));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(ClusterError::contract("build_knn", "non-finite coordinate"));
    }
    let neighbors = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut cand: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (sq_dist(&points[i], &points[j]), j))
                .collect();
            cand.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            cand.truncate(k);
            cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            cand.into_iter().map(|(_, j)| j).collect()
        })
        .collect();
    Ok(KnnGraph { k, neighbors })
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Undirected weighted graph with optional self-loops.
///
/// Node degree counts a self-loop twice, so degrees sum to twice the total
/// edge weight.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    adj: Vec<Vec<(usize, f64)>>,
    self_loops: Vec<f64>,
    degree: Vec<f64>,
    total_weight: f64,
}

impl Graph {
    /// Build from undirected edges; repeated edges add their weights.
    pub fn from_edges(n: usize, edges: &[(usize, usize, f64)]) -> Result<Self> {
        let mut maps: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); n];
        let mut self_loops = vec![0.0; n];
        for &(u, v, w) in edges {
            if u >= n || v >= n {
                return Err(ClusterError::contract("Graph::from_edges", format!("edge ({u}, {v}) out of range")));
            }
            if !(w > 0.0) || !w.is_finite() {
                return Err(ClusterError::contract("Graph::from_edges", format!("edge weight {w} must be positive")));
            }
            if u == v {
                self_loops[u] += w;
            } else {
                *maps[u].entry(v).or_default() += w;
                *maps[v].entry(u).or_default() += w;
            }
        }
        let adj: Vec<Vec<(usize, f64)>> = maps.into_iter().map(|m| m.into_iter().collect()).collect();
        Ok(Self::from_parts(adj, self_loops))
    }

    /// Symmetrized view of a kNN graph: an edge exists if either endpoint
    /// lists the other, with weight 1.
    pub fn from_knn(g: &KnnGraph) -> Self {
        let n = g.n();
        let mut maps: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); n];
        for i in 0..n {
            for &j in g.neighbors(i) {
                maps[i].insert(j, 1.0);
                maps[j].insert(i, 1.0);
            }
        }
        let adj = maps.into_iter().map(|m| m.into_iter().collect()).collect();
        Self::from_parts(adj, vec![0.0; n])
    }

    pub(crate) fn from_parts(adj: Vec<Vec<(usize, f64)>>, self_loops: Vec<f64>) -> Self {
        let degree: Vec<f64> = adj
            .iter()
            .zip(&self_loops)
            .map(|(a, s)| a.iter().map(|e| e.1).sum::<f64>() + 2.0 * s)
            .collect();
        let total_weight = degree.iter().sum::<f64>() / 2.0;
        Graph {
            adj,
            self_loops,
            degree,
            total_weight,
        }
    }

    pub fn n(&self) -> usize {
        self.adj.len()
    }

    /// Neighbours other than the node itself.
    pub fn neighbors(&self, i: usize) -> &[(usize, f64)] {
        &self.adj[i]
    }

    pub fn self_loop(&self, i: usize) -> f64 {
        self.self_loops[i]
    }

    pub fn degree(&self, i: usize) -> f64 {
        self.degree[i]
    }

    pub fn total_weight(&self) -> f64 {
        self.total_weight
    }
}
