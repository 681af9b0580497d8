//! Cellular sheaf over the task-head parameters.
//!
//! Every undirected edge `e = (i, j)` with `i < j` carries an edge stalk of
//! dimension `d_e` and two restriction maps, `P_ij : ℝ^{d_i} → ℝ^{d_e}` and
//! `P_ji : ℝ^{d_j} → ℝ^{d_e}`. The regularizer is
//!
//! ```text
//! Q(ω) = Σ_e ‖P_ij ω_i − P_ji ω_j‖²
//! ```
//!
//! with each undirected edge counted once, so that the head update's
//! neighbour term `λ Σ_j P_ijᵀ(P_ij ω_i − P_ji ω_j)` is exactly the gradient
//! of `(λ/2)·Q` with respect to `ω_i`.

use ndarray::{s, Array1, Array2};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::ClientGraph;
use crate::rng;

/// How restriction maps are initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitScheme {
    /// i.i.d. `N(0, σ²)` entries.
    Random,
    /// Leading rows of the identity, i.e. selection of the first `d_e`
    /// head coordinates.
    Identity,
}

/// Hyper-parameters of the sheaf regularizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SheafParams {
    pub gamma: f64,
    pub lambda: f64,
    pub eta: f64,
    pub init: InitScheme,
    pub sigma2: f64,
    pub seed: u64,
}

impl Default for SheafParams {
    fn default() -> Self {
        Self { gamma: 1.0, lambda: 0.1, eta: 0.01, init: InitScheme::Identity, sigma2: 1.0, seed: 0 }
    }
}

/// Edge stalk dimension `max(1, ⌊γ (d_i + d_j) / 2⌋)`.
pub fn edge_dim(d_i: usize, d_j: usize, gamma: f64) -> Result<usize> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::InvalidGamma(gamma));
    }
    // The 1e-9 guard keeps products such as 0.23·100 = 22.999… on the
    // intended side of the floor.
    let raw = (gamma * (d_i + d_j) as f64 / 2.0 + 1e-9).floor() as usize;
    Ok(raw.max(1))
}

/// One client's view of an incident edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Incidence {
    pub edge: usize,
    pub neighbor: usize,
}

/// Restriction maps and regularizer weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SheafState {
    edges: Vec<(usize, usize)>,
    head_dims: Vec<usize>,
    edge_dims: Vec<usize>,
    /// `maps[e] = (P_ij, P_ji)` for `edges[e] = (i, j)`, `i < j`.
    maps: Vec<(Array2<f64>, Array2<f64>)>,
    incidences: Vec<Vec<Incidence>>,
    pub gamma: f64,
    pub lambda: f64,
    pub eta: f64,
}

impl SheafState {
    /// Allocates and initializes the two maps of every edge of `graph`.
    pub fn init(graph: &ClientGraph, head_dims: &[usize], params: &SheafParams) -> Result<Self> {
        if head_dims.len() != graph.n_clients() {
            return Err(Error::DimensionMismatch(format!(
                "{} head dims for {} clients",
                head_dims.len(),
                graph.n_clients()
            )));
        }
        if head_dims.contains(&0) {
            return Err(Error::DimensionMismatch("head dimension must be at least 1".into()));
        }
        if params.init == InitScheme::Random && !(params.sigma2 > 0.0) {
            return Err(Error::InvalidSigma(params.sigma2));
        }
        let edges = graph.edges().to_vec();
        let mut edge_dims = Vec::with_capacity(edges.len());
        let mut maps = Vec::with_capacity(edges.len());
        for (e, &(i, j)) in edges.iter().enumerate() {
            let de = edge_dim(head_dims[i], head_dims[j], params.gamma)?;
            edge_dims.push(de);
            let make = |from: usize, to: usize| -> Array2<f64> {
                let d = head_dims[from];
                match params.init {
                    InitScheme::Identity => Array2::from_shape_fn((de, d), |(r, c)| if r == c { 1.0 } else { 0.0 }),
                    InitScheme::Random => {
                        let mut g = rng::rng_for(params.seed, &[rng::stream::SHEAF, e as u64, from as u64, to as u64]);
                        let normal = Normal::new(0.0, params.sigma2.sqrt()).expect("sigma checked");
                        Array2::from_shape_simple_fn((de, d), || normal.sample(&mut g))
                    }
                }
            };
            maps.push((make(i, j), make(j, i)));
        }
        let mut incidences = vec![Vec::new(); graph.n_clients()];
        for (e, &(i, j)) in edges.iter().enumerate() {
            incidences[i].push(Incidence { edge: e, neighbor: j });
            incidences[j].push(Incidence { edge: e, neighbor: i });
        }
        for inc in &mut incidences {
            inc.sort_by_key(|x| x.neighbor);
        }
        Ok(Self {
            edges,
            head_dims: head_dims.to_vec(),
            edge_dims,
            maps,
            incidences,
            gamma: params.gamma,
            lambda: params.lambda,
            eta: params.eta,
        })
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn edge_dims(&self) -> &[usize] {
        &self.edge_dims
    }

    pub fn head_dims(&self) -> &[usize] {
        &self.head_dims
    }

    pub fn n_clients(&self) -> usize {
        self.head_dims.len()
    }

    pub fn incidences(&self, i: usize) -> &[Incidence] {
        &self.incidences[i]
    }

    /// `(P_ij, P_ji)` for edge `e = (i, j)`, `i < j`.
    pub fn edge_maps(&self, e: usize) -> (&Array2<f64>, &Array2<f64>) {
        let (a, b) = &self.maps[e];
        (a, b)
    }

    pub fn edge_maps_mut(&mut self, e: usize) -> (&mut Array2<f64>, &mut Array2<f64>) {
        let (a, b) = &mut self.maps[e];
        (a, b)
    }

    /// Map from client `from`'s head space into the stalk of edge `e`.
    pub fn map(&self, from: usize, e: usize) -> &Array2<f64> {
        let (i, j) = self.edges[e];
        if from == i {
            &self.maps[e].0
        } else {
            assert_eq!(from, j, "client {from} is not incident to edge {e}");
            &self.maps[e].1
        }
    }

    /// Total number of restriction-map entries.
    pub fn n_map_params(&self) -> usize {
        self.maps.iter().map(|(a, b)| a.len() + b.len()).sum()
    }

    fn check_heads(&self, omega: &[Array1<f64>]) -> Result<()> {
        if omega.len() != self.head_dims.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} head vectors for {} clients",
                omega.len(),
                self.head_dims.len()
            )));
        }
        for (i, (w, &d)) in omega.iter().zip(&self.head_dims).enumerate() {
            if w.len() != d {
                return Err(Error::DimensionMismatch(format!(
                    "head of client {i} has length {}, expected {d}",
                    w.len()
                )));
            }
        }
        Ok(())
    }

    /// Edge residual `P_ij ω_i − P_ji ω_j` for `edges[e] = (i, j)`.
    pub fn residual(&self, e: usize, omega: &[Array1<f64>]) -> Array1<f64> {
        let (i, j) = self.edges[e];
        let (pi, pj) = &self.maps[e];
        pi.dot(&omega[i]) - pj.dot(&omega[j])
    }

    /// `Σ_e ‖P_ij ω_i − P_ji ω_j‖²`, each undirected edge once.
    pub fn quadratic(&self, omega: &[Array1<f64>]) -> Result<f64> {
        self.check_heads(omega)?;
        Ok((0..self.edges.len())
            .map(|e| {
                let r = self.residual(e, omega);
                r.dot(&r)
            })
            .sum())
    }

    /// `λ Σ_{j ∈ N(i)} P_ijᵀ (P_ij ω_i − P_ji ω_j)`, neighbours ascending.
    pub fn gradient(&self, omega: &[Array1<f64>], i: usize) -> Result<Array1<f64>> {
        self.check_heads(omega)?;
        Ok(self.gradient_unchecked(omega, i))
    }

    fn gradient_unchecked(&self, omega: &[Array1<f64>], i: usize) -> Array1<f64> {
        let mut g = Array1::<f64>::zeros(self.head_dims[i]);
        for inc in &self.incidences[i] {
            let pi = self.map(i, inc.edge);
            let pj = self.map(inc.neighbor, inc.edge);
            let r = pi.dot(&omega[i]) - pj.dot(&omega[inc.neighbor]);
            g += &pi.t().dot(&r);
        }
        g.mapv_inplace(|x| self.lambda * x);
        g
    }

    /// Neighbour terms for every client.
    pub fn gradients(&self, omega: &[Array1<f64>]) -> Result<Vec<Array1<f64>>> {
        self.check_heads(omega)?;
        Ok((0..self.n_clients()).map(|i| self.gradient_unchecked(omega, i)).collect())
    }

    /// Gradient of `(λ/2)·Q` with respect to each map:
    /// `(λ r ω_iᵀ, −λ r ω_jᵀ)` per edge.
    pub fn map_gradients(&self, omega: &[Array1<f64>]) -> Result<Vec<(Array2<f64>, Array2<f64>)>> {
        self.check_heads(omega)?;
        Ok((0..self.edges.len())
            .map(|e| {
                let (i, j) = self.edges[e];
                let r = self.residual(e, omega).mapv(|x| self.lambda * x);
                (outer(&r, &omega[i]), outer(&r, &omega[j]).mapv(|x| -x))
            })
            .collect())
    }

    /// `‖∇_P (λ/2)Q‖²_F`, summed over all maps.
    pub fn map_gradient_sq_norm(&self, omega: &[Array1<f64>]) -> Result<f64> {
        self.check_heads(omega)?;
        Ok((0..self.edges.len())
            .map(|e| {
                let (i, j) = self.edges[e];
                let r = self.residual(e, omega);
                let rr = self.lambda * self.lambda * r.dot(&r);
                rr * (omega[i].dot(&omega[i]) + omega[j].dot(&omega[j]))
            })
            .sum())
    }

    /// One synchronous gradient step on the maps:
    /// `P_ij ← P_ij − ηλ (P_ij ω_i − P_ji ω_j) ω_iᵀ` and the mirrored update
    /// for `P_ji`, both computed from the pre-update maps.
    pub fn update_maps(&mut self, omega_new: &[Array1<f64>]) -> Result<()> {
        self.check_heads(omega_new)?;
        let step = self.eta * self.lambda;
        if step == 0.0 {
            return Ok(());
        }
        for e in 0..self.edges.len() {
            let (i, j) = self.edges[e];
            let r = self.residual(e, omega_new);
            let (pi, pj) = &mut self.maps[e];
            for (mut row, &re) in pi.rows_mut().into_iter().zip(r.iter()) {
                row.scaled_add(-step * re, &omega_new[i]);
            }
            for (mut row, &re) in pj.rows_mut().into_iter().zip(r.iter()) {
                row.scaled_add(step * re, &omega_new[j]);
            }
            if pi.iter().chain(pj.iter()).any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("restriction maps of edge {e} ({i}, {j})")));
            }
        }
        Ok(())
    }

    /// Returns the updated state, leaving `self` untouched.
    pub fn updated(&self, omega_new: &[Array1<f64>]) -> Result<Self> {
        let mut next = self.clone();
        next.update_maps(omega_new)?;
        Ok(next)
    }

    /// All map entries, edge by edge, `P_ij` before `P_ji`, row-major.
    pub fn flatten(&self) -> Vec<f64> {
        self.maps.iter().flat_map(|(a, b)| a.iter().chain(b.iter()).copied()).collect()
    }

    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_map_params() {
            return Err(Error::DimensionMismatch(format!(
                "{} values for {} map entries",
                flat.len(),
                self.n_map_params()
            )));
        }
        let mut it = flat.iter().copied();
        for (a, b) in &mut self.maps {
            for x in a.iter_mut().chain(b.iter_mut()) {
                *x = it.next().expect("length checked");
            }
        }
        Ok(())
    }

    /// Column offset of each client's block in the assembled matrix.
    fn column_offsets(&self) -> Vec<usize> {
        let mut off = vec![0; self.head_dims.len() + 1];
        for (i, &d) in self.head_dims.iter().enumerate() {
            off[i + 1] = off[i] + d;
        }
        off
    }

    /// Dense restriction block matrix: one block row per edge with `+P_ij`
    /// in column block `i` and `−P_ji` in column block `j`. Test oracle only.
    pub fn assemble_block_matrix(&self) -> Array2<f64> {
        let cols = self.column_offsets();
        let n_rows: usize = self.edge_dims.iter().sum();
        let mut out = Array2::<f64>::zeros((n_rows, cols[self.head_dims.len()]));
        let mut row = 0;
        for (e, &(i, j)) in self.edges.iter().enumerate() {
            let de = self.edge_dims[e];
            let (pi, pj) = &self.maps[e];
            out.slice_mut(s![row..row + de, cols[i]..cols[i + 1]]).assign(pi);
            out.slice_mut(s![row..row + de, cols[j]..cols[j + 1]]).assign(&pj.mapv(|x| -x));
            row += de;
        }
        out
    }

    /// Sheaf Laplacian `PᵀP` of the assembled block matrix.
    pub fn laplacian(&self) -> Array2<f64> {
        let p = self.assemble_block_matrix();
        p.t().dot(&p)
    }
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.len(), b.len()), |(r, c)| a[r] * b[c])
}

/// Concatenation of per-client head vectors in client order.
pub fn stack_heads(omega: &[Array1<f64>]) -> Array1<f64> {
    Array1::from_iter(omega.iter().flat_map(|w| w.iter().copied()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn k2() -> ClientGraph {
        ClientGraph::new(2, &[(0, 1)], &[vec![0], vec![0]]).unwrap()
    }

    fn params(gamma: f64, lambda: f64, eta: f64, init: InitScheme) -> SheafParams {
        SheafParams { gamma, lambda, eta, init, sigma2: 1.0, seed: 3 }
    }

    #[test]
    fn edge_dim_examples() {
        assert_eq!(edge_dim(100, 100, 1.0).unwrap(), 100);
        assert_eq!(edge_dim(100, 100, 0.23).unwrap(), 23);
        assert_eq!(edge_dim(10, 30, 0.1).unwrap(), 2);
        assert_eq!(edge_dim(2, 2, 0.1).unwrap(), 1);
        assert!(matches!(edge_dim(4, 4, 0.0), Err(Error::InvalidGamma(_))));
        assert!(matches!(edge_dim(4, 4, 1.5), Err(Error::InvalidGamma(_))));
    }

    #[test]
    fn identity_init_selects_leading_rows() {
        let s = SheafState::init(&k2(), &[4, 4], &params(0.5, 1.0, 0.1, InitScheme::Identity)).unwrap();
        let (p, _) = s.edge_maps(0);
        assert_eq!(p, &array![[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]]);
    }

    #[test]
    fn random_init_is_deterministic() {
        let g = ClientGraph::new(3, &[(0, 1), (1, 2)], &vec![vec![0]; 3]).unwrap();
        let p = params(0.5, 1.0, 0.1, InitScheme::Random);
        let a = SheafState::init(&g, &[4, 6, 4], &p).unwrap();
        let b = SheafState::init(&g, &[4, 6, 4], &p).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.edge_maps(1).1.dim(), (2, 4));
        let mut bad = p;
        bad.sigma2 = 0.0;
        assert!(matches!(SheafState::init(&g, &[4, 6, 4], &bad), Err(Error::InvalidSigma(_))));
    }

    #[test]
    fn quadratic_two_clients() {
        let s = SheafState::init(&k2(), &[2, 2], &params(1.0, 1.0, 0.1, InitScheme::Identity)).unwrap();
        let omega = vec![array![1.0, 0.0], array![0.0, 1.0]];
        assert_eq!(s.quadratic(&omega).unwrap(), 2.0);
        let same = vec![array![1.0, 2.0], array![1.0, 2.0]];
        assert_eq!(s.quadratic(&same).unwrap(), 0.0);
        assert!(s.gradient(&same, 0).unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn quadratic_rejects_bad_dims() {
        let s = SheafState::init(&k2(), &[2, 2], &params(1.0, 1.0, 0.1, InitScheme::Identity)).unwrap();
        assert!(matches!(s.quadratic(&[array![1.0], array![1.0, 2.0]]), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn scalar_gradient_and_update() {
        let s = SheafState::init(&k2(), &[1, 1], &params(1.0, 1.0, 0.1, InitScheme::Identity)).unwrap();
        let g = s.gradient(&[array![1.0], array![0.0]], 0).unwrap();
        assert_eq!(g, array![1.0]);

        let next = s.updated(&[array![2.0], array![1.0]]).unwrap();
        let (pi, pj) = next.edge_maps(0);
        assert!((pi[[0, 0]] - 0.8).abs() < 1e-15);
        // Mirrored: P_ji ← 1 − 0.1·(1 − 2)·1 = 1.1
        assert!((pj[[0, 0]] - 1.1).abs() < 1e-15);
    }

    #[test]
    fn zero_residual_or_zero_step_leaves_maps() {
        let s = SheafState::init(&k2(), &[2, 2], &params(1.0, 1.0, 0.1, InitScheme::Identity)).unwrap();
        let same = vec![array![1.0, -1.0], array![1.0, -1.0]];
        assert_eq!(s.updated(&same).unwrap(), s);
        let mut frozen = s.clone();
        frozen.eta = 0.0;
        assert_eq!(frozen.updated(&[array![3.0, 1.0], array![0.0, 2.0]]).unwrap(), frozen);
    }

    #[test]
    fn non_finite_update_is_reported() {
        let mut s = SheafState::init(&k2(), &[1, 1], &params(1.0, 1.0, 1.0, InitScheme::Identity)).unwrap();
        s.eta = f64::MAX;
        let err = s.update_maps(&[array![1e200], array![0.0]]).unwrap_err();
        assert!(matches!(err, Error::NonFinite(ref m) if m.contains("edge 0")));
    }

    #[test]
    fn single_edge_laplacian() {
        let s = SheafState::init(&k2(), &[2, 2], &params(1.0, 1.0, 0.1, InitScheme::Identity)).unwrap();
        let l = s.laplacian();
        let expect = array![[1.0, 0.0, -1.0, 0.0], [0.0, 1.0, 0.0, -1.0], [-1.0, 0.0, 1.0, 0.0], [0.0, -1.0, 0.0, 1.0]];
        assert_eq!(l, expect);

        let mut zero = s.clone();
        zero.unflatten(&vec![0.0; s.n_map_params()]).unwrap();
        assert!(zero.laplacian().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn identity_maps_give_consensus_penalty() {
        let g = ClientGraph::new(3, &[(0, 1), (1, 2), (0, 2)], &vec![vec![0]; 3]).unwrap();
        let s = SheafState::init(&g, &[3, 3, 3], &params(1.0, 1.0, 0.1, InitScheme::Identity)).unwrap();
        let omega = vec![array![0.5, -1.0, 2.0], array![1.5, 0.25, -3.0], array![0.0, 0.0, 1.0]];
        let direct: f64 = g
            .edges()
            .iter()
            .map(|&(i, j)| {
                let d = &omega[i] - &omega[j];
                d.dot(&d)
            })
            .sum();
        assert_eq!(s.quadratic(&omega).unwrap(), direct);
    }
}
