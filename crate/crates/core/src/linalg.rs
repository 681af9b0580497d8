//! Small dense linear-algebra helpers shared by the graph, data and metrics
//! modules.

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{Error, Result};

/// Outcome of a power iteration on a symmetric operator.
#[derive(Debug, Clone, Copy)]
pub struct PowerEstimate {
    /// Estimate of the largest eigenvalue magnitude.
    pub magnitude: f64,
    pub iterations: usize,
}

/// Power iteration for the largest-magnitude eigenvalue of a symmetric
/// operator given as a closure. The estimate is `‖A v‖` for unit `v`, which
/// converges to `|λ_max|` even when `±λ_max` are both eigenvalues.
///
/// Iteration stops when consecutive estimates differ by less than `tol`;
/// an operator that maps the start vector to zero has magnitude 0.
pub fn power_iteration<F>(mut apply: F, start: Array1<f64>, max_iter: usize, tol: f64) -> Result<PowerEstimate>
where
    F: FnMut(ArrayView1<f64>) -> Array1<f64>,
{
    let mut v = start;
    let n0 = norm(v.view());
    if n0 == 0.0 {
        return Ok(PowerEstimate { magnitude: 0.0, iterations: 0 });
    }
    v /= n0;
    let mut prev = f64::INFINITY;
    let mut delta = f64::INFINITY;
    for it in 1..=max_iter {
        let w = apply(v.view());
        let est = norm(w.view());
        if est <= f64::MIN_POSITIVE {
            return Ok(PowerEstimate { magnitude: 0.0, iterations: it });
        }
        delta = (est - prev).abs();
        if delta < tol {
            return Ok(PowerEstimate { magnitude: est, iterations: it });
        }
        prev = est;
        v = w / est;
    }
    Err(Error::NonConvergent { iterations: max_iter, delta })
}

/// Fixed-count power iteration returning the Rayleigh quotient `vᵀAv`
/// of the final iterate. Used for smoothness estimates, where a bounded
/// budget matters more than convergence.
pub fn rayleigh_power<F>(mut apply: F, start: Array1<f64>, iterations: usize) -> f64
where
    F: FnMut(ArrayView1<f64>) -> Array1<f64>,
{
    let mut v = start;
    let n0 = norm(v.view());
    if n0 == 0.0 {
        return 0.0;
    }
    v /= n0;
    let mut rq = 0.0;
    for _ in 0..iterations {
        let w = apply(v.view());
        rq = v.dot(&w);
        let n = norm(w.view());
        if n <= f64::MIN_POSITIVE {
            return 0.0;
        }
        v = w / n;
    }
    rq
}

pub fn norm(v: ArrayView1<f64>) -> f64 {
    v.dot(&v).sqrt()
}

/// Orthonormalizes the rows of `m` by modified Gram–Schmidt. Returns `None`
/// when a row falls below `tol` after projection (rank deficiency).
pub fn orthonormalize_rows(m: &Array2<f64>, tol: f64) -> Option<Array2<f64>> {
    let mut out = m.clone();
    for r in 0..out.nrows() {
        for p in 0..r {
            let proj = out.row(r).dot(&out.row(p));
            let prow = out.row(p).to_owned();
            out.row_mut(r).scaled_add(-proj, &prow);
        }
        let n = norm(out.row(r));
        if n < tol {
            return None;
        }
        out.row_mut(r).mapv_inplace(|x| x / n);
    }
    Some(out)
}

/// Orthonormalizes the columns of `m` (see [`orthonormalize_rows`]).
pub fn orthonormalize_cols(m: &Array2<f64>, tol: f64) -> Option<Array2<f64>> {
    orthonormalize_rows(&m.t().to_owned(), tol).map(|q| q.t().to_owned())
}

/// Numerical rank via Gram–Schmidt on the rows of `m` (or of `mᵀ` when it
/// has fewer columns than rows).
pub fn rank(m: &Array2<f64>, tol: f64) -> usize {
    let rows = if m.nrows() <= m.ncols() { m.clone() } else { m.t().to_owned() };
    let mut basis: Vec<Array1<f64>> = Vec::new();
    for r in rows.rows() {
        let mut v = r.to_owned();
        for b in &basis {
            let p = v.dot(b);
            v.scaled_add(-p, b);
        }
        let n = norm(v.view());
        if n > tol {
            basis.push(v / n);
        }
    }
    basis.len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn power_iteration_diagonal() {
        let d = array![3.0, -5.0, 1.0];
        let est = power_iteration(|v| &d * &v, array![1.0, 1.0, 1.0], 10_000, 1e-12).unwrap();
        assert!((est.magnitude - 5.0).abs() < 1e-9);
    }

    #[test]
    fn power_iteration_zero_operator() {
        let est = power_iteration(|v| v.mapv(|_| 0.0), array![1.0, 2.0], 10, 1e-12).unwrap();
        assert_eq!(est.magnitude, 0.0);
    }

    #[test]
    fn orthonormal_rows() {
        let m = array![[1.0, 1.0, 0.0], [1.0, 0.0, 1.0]];
        let q = orthonormalize_rows(&m, 1e-12).unwrap();
        let g = q.dot(&q.t());
        for i in 0..2 {
            for j in 0..2 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((g[[i, j]] - want).abs() < 1e-12);
            }
        }
        assert!(orthonormalize_rows(&array![[1.0, 2.0], [2.0, 4.0]], 1e-9).is_none());
    }

    #[test]
    fn rank_counts_independent_rows() {
        assert_eq!(rank(&array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]], 1e-9), 2);
        assert_eq!(rank(&array![[1.0, 2.0, 3.0], [2.0, 4.0, 6.0]], 1e-9), 1);
    }
}
