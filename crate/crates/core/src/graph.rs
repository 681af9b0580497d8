//! Client communication graph, per-modality induced subgraphs and
//! Metropolis–Hastings mixing matrices.
//!
//! All neighbour lists are sorted and every reduction iterates clients in
//! ascending index order, so results are bitwise reproducible.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::rng;

/// Undirected communication graph with per-client modality sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientGraph {
    n_clients: usize,
    /// Sorted, deduplicated, with `i < j` for every `(i, j)`.
    edges: Vec<(usize, usize)>,
    /// Sorted ascending per client.
    modality_sets: Vec<Vec<usize>>,
    n_modalities: usize,
    adjacency: Vec<Vec<usize>>,
}

impl ClientGraph {
    /// Builds and normalizes a graph. The number of modalities is one past
    /// the largest modality id in use.
    pub fn new(n_clients: usize, edges: &[(usize, usize)], modality_sets: &[Vec<usize>]) -> Result<Self> {
        let n_modalities = modality_sets.iter().flat_map(|s| s.iter().copied()).max().map_or(0, |m| m + 1);
        Self::with_modalities(n_clients, edges, modality_sets, n_modalities)
    }

    pub fn with_modalities(
        n_clients: usize,
        edges: &[(usize, usize)],
        modality_sets: &[Vec<usize>],
        n_modalities: usize,
    ) -> Result<Self> {
        if modality_sets.len() != n_clients {
            return Err(Error::Config(format!(
                "{} modality sets given for {} clients",
                modality_sets.len(),
                n_clients
            )));
        }
        let mut sets = Vec::with_capacity(n_clients);
        for (client, set) in modality_sets.iter().enumerate() {
            let s: BTreeSet<usize> = set.iter().copied().collect();
            if s.is_empty() {
                return Err(Error::EmptyModalitySet { client });
            }
            if let Some(&modality) = s.iter().find(|&&m| m >= n_modalities) {
                return Err(Error::InvalidModality { client, modality, n_modalities });
            }
            sets.push(s.into_iter().collect::<Vec<_>>());
        }

        let mut normalized = BTreeSet::new();
        for &(a, b) in edges {
            if a == b || a >= n_clients || b >= n_clients {
                return Err(Error::InvalidEdge(a, b));
            }
            normalized.insert((a.min(b), a.max(b)));
        }
        let edges: Vec<(usize, usize)> = normalized.into_iter().collect();

        let mut adjacency = vec![Vec::new(); n_clients];
        for &(i, j) in &edges {
            adjacency[i].push(j);
            adjacency[j].push(i);
        }
        for nb in &mut adjacency {
            nb.sort_unstable();
        }

        Ok(Self { n_clients, edges, modality_sets: sets, n_modalities, adjacency })
    }

    pub fn n_clients(&self) -> usize {
        self.n_clients
    }

    pub fn n_modalities(&self) -> usize {
        self.n_modalities
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.adjacency[i]
    }

    pub fn modalities(&self, i: usize) -> &[usize] {
        &self.modality_sets[i]
    }

    pub fn modality_sets(&self) -> &[Vec<usize>] {
        &self.modality_sets
    }

    pub fn has_modality(&self, i: usize, k: usize) -> bool {
        self.modality_sets[i].binary_search(&k).is_ok()
    }

    /// Index of edge `(i, j)` in [`edges`](Self::edges), in either orientation.
    pub fn edge_index(&self, i: usize, j: usize) -> Option<usize> {
        self.edges.binary_search(&(i.min(j), i.max(j))).ok()
    }

    /// Clients grouped by identical modality set, groups ordered by their
    /// lowest client id and members ascending.
    pub fn modality_groups(&self) -> Vec<ModalityGroup> {
        let mut groups: Vec<ModalityGroup> = Vec::new();
        for i in 0..self.n_clients {
            match groups.iter_mut().find(|g| g.modalities == self.modality_sets[i]) {
                Some(g) => g.members.push(i),
                None => groups.push(ModalityGroup { modalities: self.modality_sets[i].clone(), members: vec![i] }),
            }
        }
        groups
    }

    /// Connected components of the subgraph induced by `members`.
    pub fn components(&self, members: &[usize]) -> Vec<Vec<usize>> {
        let inside: BTreeSet<usize> = members.iter().copied().collect();
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for &start in &inside {
            if seen.contains(&start) {
                continue;
            }
            let mut comp = vec![start];
            seen.insert(start);
            let mut stack = vec![start];
            while let Some(u) = stack.pop() {
                for &v in &self.adjacency[u] {
                    if inside.contains(&v) && seen.insert(v) {
                        comp.push(v);
                        stack.push(v);
                    }
                }
            }
            comp.sort_unstable();
            out.push(comp);
        }
        out
    }

    /// Whether the whole graph is connected. Only logged; per-modality
    /// connectivity is the hard requirement.
    pub fn is_connected(&self) -> bool {
        let all: Vec<usize> = (0..self.n_clients).collect();
        self.components(&all).len() <= 1
    }

    /// Induced subgraph of the clients holding modality `k`.
    pub fn modality_subgraph(&self, k: usize) -> Result<ModalitySubgraph> {
        if k >= self.n_modalities {
            return Err(Error::Config(format!("modality {k} out of range (n_modalities = {})", self.n_modalities)));
        }
        let members: Vec<usize> = (0..self.n_clients).filter(|&i| self.has_modality(i, k)).collect();
        let sub = self.induced(&members);
        let components = self.components(&members);
        if components.len() > 1 {
            return Err(Error::DisconnectedSubgraph { modality: k, components });
        }
        Ok(ModalitySubgraph { modality: k, members: sub.0, edges: sub.1 })
    }

    /// Members and edges of the subgraph induced by `members`.
    pub fn induced(&self, members: &[usize]) -> (Vec<usize>, Vec<(usize, usize)>) {
        let mut m = members.to_vec();
        m.sort_unstable();
        m.dedup();
        let edges = self
            .edges
            .iter()
            .copied()
            .filter(|(i, j)| m.binary_search(i).is_ok() && m.binary_search(j).is_ok())
            .collect();
        (m, edges)
    }
}

/// Clients sharing exactly the same modality set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityGroup {
    pub modalities: Vec<usize>,
    pub members: Vec<usize>,
}

impl ModalityGroup {
    pub fn label(&self) -> String {
        self.modalities.iter().map(|m| format!("m{m}")).collect::<Vec<_>>().join("+")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModalitySubgraph {
    pub modality: usize,
    pub members: Vec<usize>,
    pub edges: Vec<(usize, usize)>,
}

/// Symmetric doubly stochastic gossip weights over a set of clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixingMatrix {
    /// Modality the matrix mixes, or `None` for non-modality groups.
    pub modality: Option<usize>,
    /// Client ids in row order (ascending).
    pub members: Vec<usize>,
    pub weights: Array2<f64>,
}

impl MixingMatrix {
    /// Metropolis–Hastings weights `w_ij = 1 / (1 + max(deg_i, deg_j))` on
    /// edges, `w_ii = 1 − Σ_{j≠i} w_ij`, with degrees inside the subgraph.
    pub fn metropolis(members: &[usize], edges: &[(usize, usize)]) -> Self {
        let n = members.len();
        let idx = |c: usize| members.binary_search(&c).expect("edge endpoint not a member");
        let mut deg = vec![0usize; n];
        for &(i, j) in edges {
            deg[idx(i)] += 1;
            deg[idx(j)] += 1;
        }
        let mut w = Array2::<f64>::zeros((n, n));
        for &(i, j) in edges {
            let (a, b) = (idx(i), idx(j));
            let v = 1.0 / (1.0 + deg[a].max(deg[b]) as f64);
            w[[a, b]] = v;
            w[[b, a]] = v;
        }
        for a in 0..n {
            let off: f64 = (0..n).filter(|&b| b != a).map(|b| w[[a, b]]).sum();
            w[[a, a]] = 1.0 - off;
        }
        Self { modality: None, members: members.to_vec(), weights: w }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn index_of(&self, client: usize) -> Option<usize> {
        self.members.binary_search(&client).ok()
    }

    /// Nonzero entries of row `client` as `(neighbor client, weight)`,
    /// ascending by client id, including the self weight.
    pub fn row(&self, client: usize) -> Vec<(usize, f64)> {
        let a = self.index_of(client).expect("client not in mixing matrix");
        self.members
            .iter()
            .enumerate()
            .filter(|&(b, _)| self.weights[[a, b]] != 0.0)
            .map(|(b, &c)| (c, self.weights[[a, b]]))
            .collect()
    }

    /// Largest deviation of any row or column sum from 1.
    pub fn stochasticity_error(&self) -> f64 {
        let rows = self.weights.rows().into_iter().map(|r| (r.sum() - 1.0).abs());
        let cols = self.weights.columns().into_iter().map(|c| (c.sum() - 1.0).abs());
        rows.chain(cols).fold(0.0, f64::max)
    }

    pub fn is_symmetric(&self) -> bool {
        self.weights == self.weights.t()
    }
}

/// Metropolis–Hastings mixing matrix of a connected modality subgraph.
pub fn metropolis_weights(sub: &ModalitySubgraph) -> MixingMatrix {
    let mut w = MixingMatrix::metropolis(&sub.members, &sub.edges);
    w.modality = Some(sub.modality);
    w
}

/// `1 − |λ₂(W)|` by power iteration on `W − (1/n)𝟙𝟙ᵀ` from a fixed
/// pseudo-random start vector. A single-member matrix has gap 1.
pub fn spectral_gap(w: &MixingMatrix) -> Result<f64> {
    let n = w.len();
    if n <= 1 {
        return Ok(1.0);
    }
    // structured starts can be orthogonal to the slowest mode on symmetric graphs
    let mut g = rng::rng_for(0, &[rng::stream::SPECTRAL, n as u64]);
    let mut start = Array1::from_iter((0..n).map(|_| g.sample::<f64, _>(StandardNormal)));
    let m = start.sum() / n as f64;
    start.mapv_inplace(|x| x - m);
    let deflated = |v: ndarray::ArrayView1<f64>| {
        let mut out = w.weights.dot(&v);
        let m = out.sum() / n as f64;
        out.mapv_inplace(|x| x - m);
        out
    };
    let est = linalg::power_iteration(deflated, start, 10_000, 1e-10)?;
    Ok(1.0 - est.magnitude)
}

/// One mixing matrix per modality, `None` for modalities nobody holds.
pub fn modality_mixing(graph: &ClientGraph) -> Result<Vec<Option<MixingMatrix>>> {
    (0..graph.n_modalities())
        .map(|k| {
            let sub = graph.modality_subgraph(k)?;
            Ok((!sub.members.is_empty()).then(|| metropolis_weights(&sub)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path3(sets: &[Vec<usize>]) -> ClientGraph {
        ClientGraph::new(3, &[(0, 1), (1, 2)], sets).unwrap()
    }

    #[test]
    fn minimal_graph() {
        let g = ClientGraph::new(2, &[(1, 0)], &[vec![0], vec![0]]).unwrap();
        assert_eq!(g.edges(), &[(0, 1)]);
        assert_eq!(g.n_modalities(), 1);
    }

    #[test]
    fn duplicate_edges_collapse() {
        let g = ClientGraph::new(3, &[(0, 1), (1, 0), (2, 1), (1, 2)], &vec![vec![0]; 3]).unwrap();
        assert_eq!(g.edges(), &[(0, 1), (1, 2)]);
        assert_eq!(g.neighbors(1), &[0, 2]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(ClientGraph::new(2, &[(0, 0)], &[vec![0], vec![0]]), Err(Error::InvalidEdge(0, 0))));
        assert!(matches!(ClientGraph::new(2, &[(0, 2)], &[vec![0], vec![0]]), Err(Error::InvalidEdge(0, 2))));
        assert!(matches!(
            ClientGraph::new(2, &[(0, 1)], &[vec![0], vec![]]),
            Err(Error::EmptyModalitySet { client: 1 })
        ));
    }

    #[test]
    fn path_subgraph_is_whole_graph() {
        let g = path3(&[vec![0], vec![0], vec![0]]);
        let sub = g.modality_subgraph(0).unwrap();
        assert_eq!(sub.members, vec![0, 1, 2]);
        assert_eq!(sub.edges, vec![(0, 1), (1, 2)]);
    }

    #[test]
    fn disconnected_subgraph_is_reported() {
        let g = path3(&[vec![0], vec![1], vec![0]]);
        match g.modality_subgraph(0) {
            Err(Error::DisconnectedSubgraph { modality, components }) => {
                assert_eq!(modality, 0);
                assert_eq!(components, vec![vec![0], vec![2]]);
            }
            other => panic!("expected DisconnectedSubgraph, got {other:?}"),
        }
    }

    #[test]
    fn singleton_subgraph() {
        let g = path3(&[vec![0], vec![1], vec![0, 1]]);
        let sub = ClientGraph::new(2, &[(0, 1)], &[vec![0], vec![1]]).unwrap().modality_subgraph(1).unwrap();
        assert_eq!(sub.members, vec![1]);
        let w = metropolis_weights(&sub);
        assert_eq!(w.weights[[0, 0]], 1.0);
        assert_eq!(spectral_gap(&w).unwrap(), 1.0);
        assert!(g.modality_subgraph(1).is_ok());
    }

    #[test]
    fn metropolis_path3() {
        let g = path3(&vec![vec![0]; 3]);
        let w = metropolis_weights(&g.modality_subgraph(0).unwrap());
        let third = 1.0 / 3.0;
        let expect = [[2.0 * third, third, 0.0], [third, third, third], [0.0, third, 2.0 * third]];
        for a in 0..3 {
            for b in 0..3 {
                assert!((w.weights[[a, b]] - expect[a][b]).abs() < 1e-15);
            }
        }
        assert!(w.stochasticity_error() <= 1e-12);
        assert!(w.is_symmetric());
    }

    #[test]
    fn metropolis_k2_has_unit_gap() {
        let g = ClientGraph::new(2, &[(0, 1)], &[vec![0], vec![0]]).unwrap();
        let w = metropolis_weights(&g.modality_subgraph(0).unwrap());
        assert_eq!(w.weights, ndarray::array![[0.5, 0.5], [0.5, 0.5]]);
        assert!((spectral_gap(&w).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn path3_gap_matches_characteristic_polynomial() {
        // W = (1/3)[[2,1,0],[1,1,1],[0,1,2]]: eigenvalues 1, 2/3, 0.
        let g = path3(&vec![vec![0]; 3]);
        let w = metropolis_weights(&g.modality_subgraph(0).unwrap());
        let gap = spectral_gap(&w).unwrap();
        assert!((gap - 1.0 / 3.0).abs() < 1e-9, "gap = {gap}");
    }

    #[test]
    fn groups_follow_first_member() {
        let g = ClientGraph::new(4, &[(0, 1), (1, 2), (2, 3)], &[vec![1], vec![0], vec![1], vec![0, 1]]).unwrap();
        let groups = g.modality_groups();
        assert_eq!(groups.len(), 3);
        assert_eq!(groups[0].members, vec![0, 2]);
        assert_eq!(groups[1].label(), "m0");
        assert_eq!(groups[2].label(), "m0+m1");
    }
}
