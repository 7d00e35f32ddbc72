use std::collections::HashMap;
use std::hash::Hash;

/// Assignment of nodes to communities `0..n_communities`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    assignment: Vec<usize>,
    n_communities: usize,
}

impl Partition {
    /// Relabel arbitrary labels densely in order of first appearance.
    pub fn from_labels<T: Hash + Eq + Clone>(labels: &[T]) -> Self {
        let mut ids: HashMap<T, usize> = HashMap::new();
        let assignment = labels
            .iter()
            .map(|l| {
                let next = ids.len();
                *ids.entry(l.clone()).or_insert(next)
            })
            .collect();
        Partition {
            assignment,
            n_communities: ids.len(),
        }
    }

    pub fn singletons(n: usize) -> Self {
        Partition {
            assignment: (0..n).collect(),
            n_communities: n,
        }
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn n_communities(&self) -> usize {
        self.n_communities
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    pub fn community_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_communities];
        for &c in &self.assignment {
            sizes[c] += 1;
        }
        sizes
    }
}
