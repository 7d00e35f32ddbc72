use std::collections::{BTreeMap, VecDeque};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{ClusterError, Graph, Partition, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct LeidenParams {
    pub resolution: f64,
    /// Temperature of the random merge choice during refinement.
    pub randomness: f64,
    pub seed: u64,
    /// Upper bound on full passes; iteration stops earlier once a pass
    /// leaves the partition unchanged.
    pub max_iterations: usize,
}

impl Default for LeidenParams {
    fn default() -> Self {
        LeidenParams {
            resolution: 1.0,
            randomness: 0.01,
            seed: 0,
            max_iterations: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LeidenResult {
    pub partition: Partition,
    /// Modularity of the singleton start, then after every pass.
    pub modularity_trace: Vec<f64>,
}

/// Newman modularity with resolution `gamma`.
pub fn modularity(g: &Graph, p: &Partition, gamma: f64) -> f64 {
    let m = g.total_weight();
    if m <= 0.0 {
        return 0.0;
    }
    let a = p.assignment();
    let mut inner = vec![0.0; p.n_communities()];
    let mut tot = vec![0.0; p.n_communities()];
    for i in 0..g.n() {
        inner[a[i]] += g.self_loop(i);
        tot[a[i]] += g.degree(i);
        for &(j, w) in g.neighbors(i) {
            if j > i && a[j] == a[i] {
                inner[a[i]] += w;
            }
        }
    }
    inner
        .iter()
        .zip(&tot)
        .map(|(e, k)| e / m - gamma * (k / (2.0 * m)).powi(2))
        .sum()
}

/// Leiden community detection: local moving, refinement and aggregation,
/// repeated until a full pass changes nothing.
pub fn leiden_cluster(g: &Graph, params: &LeidenParams) -> Result<LeidenResult> {
    if g.n() == 0 {
        return Err(ClusterError::contract("leiden_cluster", "graph is empty"));
    }
    if !(params.resolution > 0.0) || !params.resolution.is_finite() {
        return Err(ClusterError::contract("leiden_cluster", "resolution must be positive"));
    }
    if !(params.randomness > 0.0) {
        return Err(ClusterError::contract("leiden_cluster", "randomness must be positive"));
    }
    let gamma = params.resolution;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut current = Partition::singletons(g.n());
    let mut trace = vec![modularity(g, &current, gamma)];
    if g.total_weight() <= 0.0 {
        return Ok(LeidenResult {
            partition: current,
            modularity_trace: trace,
        });
    }
    for _ in 0..params.max_iterations {
        let next = one_pass(g, current.assignment(), gamma, params.randomness, &mut rng);
        let next = Partition::from_labels(&next);
        trace.push(modularity(g, &next, gamma));
        let done = next == current;
        current = next;
        if done {
            break;
        }
    }
    Ok(LeidenResult {
        partition: current,
        modularity_trace: trace,
    })
}

fn one_pass(g: &Graph, start: &[usize], gamma: f64, theta: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut graph = g.clone();
    let mut part = start.to_vec();
    // Node of the current (aggregated) graph holding each original node.
    let mut level_of: Vec<usize> = (0..g.n()).collect();
    loop {
        move_nodes_fast(&graph, &mut part, gamma, rng);
        let n_comm = renumber(&mut part);
        if n_comm == graph.n() {
            break;
        }
        let mut refined = refine(&graph, &part, n_comm, gamma, theta, rng);
        let mut n_ref = renumber(&mut refined);
        if n_ref == graph.n() {
            // Refinement merged nothing; aggregate by the moved partition.
            refined.clone_from(&part);
            n_ref = n_comm;
        }
        let mut next_part = vec![0; n_ref];
        for v in 0..graph.n() {
            next_part[refined[v]] = part[v];
        }
        for l in level_of.iter_mut() {
            *l = refined[*l];
        }
        graph = aggregate(&graph, &refined, n_ref);
        part = next_part;
    }
    level_of.iter().map(|&l| part[l]).collect()
}

/// Dense ids in order of first appearance; returns the count.
fn renumber(a: &mut [usize]) -> usize {
    let mut map: Vec<usize> = vec![usize::MAX; a.len().max(a.iter().max().map_or(0, |m| m + 1))];
    let mut next = 0;
    for x in a.iter_mut() {
        if map[*x] == usize::MAX {
            map[*x] = next;
            next += 1;
        }
        *x = map[*x];
    }
    next
}

/// Queue-based local moving: a node moves only when that strictly
/// increases modularity.
fn move_nodes_fast(g: &Graph, part: &mut [usize], gamma: f64, rng: &mut ChaCha8Rng) {
    let n = g.n();
    let m2 = 2.0 * g.total_weight();
    let mut tot = vec![0.0; n];
    let mut size = vec![0usize; n];
    for v in 0..n {
        tot[part[v]] += g.degree(v);
        size[part[v]] += 1;
    }
    let mut empty: Vec<usize> = (0..n).filter(|&c| size[c] == 0).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut queue: VecDeque<usize> = order.into();
    let mut queued = vec![true; n];
    let mut w_to = vec![0.0; n];
    let mut touched: Vec<usize> = Vec::new();

    while let Some(v) = queue.pop_front() {
        queued[v] = false;
        let cur = part[v];
        let kv = g.degree(v);
        for &(u, w) in g.neighbors(v) {
            let c = part[u];
            if w_to[c] == 0.0 {
                touched.push(c);
            }
            w_to[c] += w;
        }
        tot[cur] -= kv;
        size[cur] -= 1;

        let stay = w_to[cur] - gamma * kv * tot[cur] / m2;
        let mut best = cur;
        let mut best_gain = stay;
        for &c in &touched {
            let gain = w_to[c] - gamma * kv * tot[c] / m2;
            if gain > best_gain {
                best = c;
                best_gain = gain;
            }
        }
        if size[cur] > 0 && best_gain < 0.0 {
            if let Some(&e) = empty.last() {
                best = e;
                best_gain = 0.0;
            }
        }
        if best_gain <= stay + 1e-10 {
            best = cur;
        }

        tot[best] += kv;
        size[best] += 1;
        part[v] = best;
        if best != cur {
            if empty.last() == Some(&best) {
                empty.pop();
            }
            if size[cur] == 0 {
                empty.push(cur);
            }
            for &(u, _) in g.neighbors(v) {
                if part[u] != best && !queued[u] {
                    queued[u] = true;
                    queue.push_back(u);
                }
            }
        }
        for c in touched.drain(..) {
            w_to[c] = 0.0;
        }
    }
}

/// Split each community into well-connected subcommunities by randomized
/// merging of singletons.
fn refine(g: &Graph, part: &[usize], n_comm: usize, gamma: f64, theta: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = g.n();
    let m2 = 2.0 * g.total_weight();
    let mut comm_tot = vec![0.0; n_comm];
    for v in 0..n {
        comm_tot[part[v]] += g.degree(v);
    }
    let mut refined: Vec<usize> = (0..n).collect();
    let mut ref_tot: Vec<f64> = (0..n).map(|v| g.degree(v)).collect();
    let mut ref_size = vec![1usize; n];
    // Weight from each node to the rest of its community.
    let own_cut: Vec<f64> = (0..n)
        .map(|v| {
            g.neighbors(v)
                .iter()
                .filter(|&&(u, _)| part[u] == part[v])
                .map(|e| e.1)
                .sum()
        })
        .collect();
    let mut ref_cut = own_cut.clone();

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut w_to = vec![0.0; n];
    let mut touched: Vec<usize> = Vec::new();
    let mut cands: Vec<(usize, f64)> = Vec::new();
    for v in order {
        if ref_size[refined[v]] != 1 {
            continue;
        }
        let c = part[v];
        let kv = g.degree(v);
        if own_cut[v] < gamma * kv * (comm_tot[c] - kv) / m2 {
            continue;
        }
        for &(u, w) in g.neighbors(v) {
            if part[u] == c {
                let r = refined[u];
                if w_to[r] == 0.0 {
                    touched.push(r);
                }
                w_to[r] += w;
            }
        }
        cands.clear();
        cands.push((refined[v], 0.0));
        for &r in &touched {
            if r == refined[v] {
                continue;
            }
            let well_connected = ref_cut[r] >= gamma * ref_tot[r] * (comm_tot[c] - ref_tot[r]) / m2;
            let gain = w_to[r] - gamma * kv * ref_tot[r] / m2;
            if well_connected && gain >= 0.0 {
                cands.push((r, gain));
            }
        }
        if cands.len() > 1 {
            let top = cands.iter().map(|e| e.1).fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = cands.iter().map(|e| ((e.1 - top) / theta).exp()).collect();
            let total: f64 = weights.iter().sum();
            let mut pick = rng.random::<f64>() * total;
            let mut chosen = cands.len() - 1;
            for (i, w) in weights.iter().enumerate() {
                if pick < *w {
                    chosen = i;
                    break;
                }
                pick -= w;
            }
            let r = cands[chosen].0;
            if r != refined[v] {
                let old = refined[v];
                ref_size[old] = 0;
                ref_tot[old] = 0.0;
                ref_cut[r] += own_cut[v] - 2.0 * w_to[r];
                ref_tot[r] += kv;
                ref_size[r] += 1;
                refined[v] = r;
            }
        }
        for r in touched.drain(..) {
            w_to[r] = 0.0;
        }
    }
    refined
}

fn aggregate(g: &Graph, assign: &[usize], n_comm: usize) -> Graph {
    let mut maps: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); n_comm];
    let mut self_loops = vec![0.0; n_comm];
    for i in 0..g.n() {
        let ci = assign[i];
        self_loops[ci] += g.self_loop(i);
        for &(j, w) in g.neighbors(i) {
            if j <= i {
                continue;
            }
            let cj = assign[j];
            if ci == cj {
                self_loops[ci] += w;
            } else {
                *maps[ci].entry(cj).or_default() += w;
                *maps[cj].entry(ci).or_default() += w;
            }
        }
    }
    let adj = maps.into_iter().map(|m| m.into_iter().collect()).collect();
    Graph::from_parts(adj, self_loops)
}
