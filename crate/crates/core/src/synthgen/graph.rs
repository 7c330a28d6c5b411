use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bipartite support of the ground-truth mixing: `adjacency[i][j]` is true
/// when latent `z_i` contributes to observation `x_j`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixingGraph {
    n_latent: usize,
    n_obs: usize,
    adjacency: Vec<Vec<bool>>,
}

impl MixingGraph {
    pub fn new(adjacency: Vec<Vec<bool>>) -> Result<Self> {
        let n_latent = adjacency.len();
        let n_obs = adjacency.first().map_or(0, Vec::len);
        if n_latent == 0 || n_obs == 0 {
            return Err(Error::InvalidArgument("empty mixing graph".into()));
        }
        if adjacency.iter().any(|r| r.len() != n_obs) {
            return Err(Error::InvalidArgument("ragged adjacency matrix".into()));
        }
        let g = MixingGraph {
            n_latent,
            n_obs,
            adjacency,
        };
        if let Some(i) = (0..n_latent).find(|&i| g.children(i).is_empty()) {
            return Err(Error::InvalidArgument(format!("latent z{i} has no children")));
        }
        if let Some(j) = (0..n_obs).find(|&j| g.parents(&[j]).is_empty()) {
            return Err(Error::InvalidArgument(format!("observation x{j} has no parents")));
        }
        Ok(g)
    }

    /// Square graph from an edge list `(latent, observation)`.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut adj = vec![vec![false; n]; n];
        for &(i, j) in edges {
            if i >= n || j >= n {
                return Err(Error::InvalidArgument(format!("edge ({i}, {j}) outside {n}×{n}")));
            }
            adj[i][j] = true;
        }
        MixingGraph::new(adj)
    }

    pub fn identity(n: usize) -> Self {
        let edges: Vec<_> = (0..n).map(|i| (i, i)).collect();
        MixingGraph::from_edges(n, &edges).expect("identity graph is valid")
    }

    pub fn fully_connected(n: usize) -> Self {
        MixingGraph::new(vec![vec![true; n]; n]).expect("dense graph is valid")
    }

    pub fn n_latent(&self) -> usize {
        self.n_latent
    }

    pub fn n_obs(&self) -> usize {
        self.n_obs
    }

    pub fn adjacency(&self) -> &[Vec<bool>] {
        &self.adjacency
    }

    pub fn has_edge(&self, latent: usize, obs: usize) -> bool {
        self.adjacency[latent][obs]
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().flatten().filter(|&&e| e).count()
    }

    pub fn is_fully_connected(&self) -> bool {
        self.adjacency.iter().flatten().all(|&e| e)
    }

    /// `Pa(x_k)`: union of the latent parents of every observation in `k`.
    pub fn parents(&self, k: &[usize]) -> BTreeSet<usize> {
        (0..self.n_latent)
            .filter(|&i| k.iter().any(|&j| self.adjacency[i][j]))
            .collect()
    }

    pub fn children(&self, latent: usize) -> BTreeSet<usize> {
        (0..self.n_obs).filter(|&j| self.adjacency[latent][j]).collect()
    }

    /// Observation index sets whose parent set is a strict subset of all
    /// latents (singletons and pairs are enough for the presets).
    pub fn has_strict_parent_subset(&self) -> bool {
        (0..self.n_obs).any(|j| self.parents(&[j]).len() < self.n_latent)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_orphans() {
        assert!(MixingGraph::new(vec![vec![true, false], vec![false, false]]).is_err());
        assert!(MixingGraph::new(vec![vec![true, false], vec![true, false]]).is_err());
    }

    #[test]
    fn parents_of_subset_is_union() {
        let g = MixingGraph::from_edges(3, &[(0, 0), (1, 1), (0, 1), (2, 2)]).unwrap();
        assert_eq!(g.parents(&[0]), [0].into());
        assert_eq!(g.parents(&[1]), [0, 1].into());
        assert_eq!(g.parents(&[0, 2]), [0, 2].into());
    }
}
