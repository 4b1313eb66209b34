//! Log-domain Sinkhorn iterations for entropic optimal transport with
//! uniform marginals.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone)]
pub struct SinkhornOutput {
    pub coupling: DMatrix<f64>,
    pub iterations: usize,
    /// L1 violation of the row marginals before rounding.
    pub marginal_error: f64,
    pub converged: bool,
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Runs dual updates `f ← ε log a − ε LSE((g − C)/ε)` and the column analogue
/// until the row marginal L1 error falls below `tol` or `max_iters` is hit.
pub fn solve(costs: &DMatrix<f64>, epsilon: f64, max_iters: usize, tol: f64) -> SinkhornOutput {
    let (n, m) = costs.shape();
    let log_a = -(n as f64).ln();
    let log_b = -(m as f64).ln();
    let mut f = DVector::<f64>::zeros(n);
    let mut g = DVector::<f64>::zeros(m);
    let mut marginal_error = f64::INFINITY;
    let mut iterations = 0;

    while iterations < max_iters {
        iterations += 1;
        for i in 0..n {
            f[i] = epsilon * log_a - epsilon * log_sum_exp((0..m).map(|j| (g[j] - costs[(i, j)]) / epsilon));
        }
        for j in 0..m {
            g[j] = epsilon * log_b - epsilon * log_sum_exp((0..n).map(|i| (f[i] - costs[(i, j)]) / epsilon));
        }
        // Columns are exact after the g update; rows carry the residual.
        marginal_error = (0..n)
            .map(|i| {
                let row: f64 = (0..m).map(|j| ((f[i] + g[j] - costs[(i, j)]) / epsilon).exp()).sum();
                (row - log_a.exp()).abs()
            })
            .sum();
        if marginal_error <= tol {
            break;
        }
    }

    let coupling = DMatrix::from_fn(n, m, |i, j| ((f[i] + g[j] - costs[(i, j)]) / epsilon).exp());
    SinkhornOutput { coupling, iterations, marginal_error, converged: marginal_error <= tol }
}

/// Projects an approximate coupling onto the uniform transport polytope
/// (Altschuler, Weed and Rigollet rounding).
pub fn round_to_marginals(coupling: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, m) = coupling.shape();
    let a = 1.0 / n as f64;
    let b = 1.0 / m as f64;
    let mut x = coupling.clone();
    for i in 0..n {
        let r = x.row(i).sum();
        if r > a {
            x.row_mut(i).scale_mut(a / r);
        }
    }
    for j in 0..m {
        let c = x.column(j).sum();
        if c > b {
            x.column_mut(j).scale_mut(b / c);
        }
    }
    let err_r: Vec<f64> = (0..n).map(|i| a - x.row(i).sum()).collect();
    let err_c: Vec<f64> = (0..m).map(|j| b - x.column(j).sum()).collect();
    let total: f64 = err_r.iter().sum();
    if total > 0.0 {
        for i in 0..n {
            for j in 0..m {
                x[(i, j)] += err_r[i] * err_c[j] / total;
            }
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounding_restores_marginals() {
        let c = DMatrix::from_row_slice(2, 3, &[0.3, 0.1, 0.05, 0.0, 0.2, 0.1]);
        let x = round_to_marginals(&c);
        for i in 0..2 {
            assert!((x.row(i).sum() - 0.5).abs() < 1e-15);
        }
        for j in 0..3 {
            assert!((x.column(j).sum() - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!(x.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn converges_on_small_problem() {
        let c = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let out = solve(&c, 0.05, 1000, 1e-12);
        assert!(out.converged);
        assert!(out.coupling[(0, 0)] > 0.49);
    }
}
