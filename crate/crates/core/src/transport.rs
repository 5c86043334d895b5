//! Entropic optimal transport between samples and prototypes.
//!
//! Balanced Sinkhorn scaling with uniform marginals, carried out on dual
//! potentials in the log domain so that small regularization does not
//! underflow the Gibbs kernel.

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SinkhornParams {
    pub epsilon: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for SinkhornParams {
    fn default() -> Self {
        SinkhornParams {
            epsilon: 0.05,
            max_iters: 20_000,
            tol: 1e-6,
        }
    }
}

/// n×K coupling with row marginals 1/n and column marginals 1/K.
#[derive(Clone, Debug)]
pub struct TransportPlan {
    pub plan: Array2<f64>,
    /// Largest absolute deviation of any row or column sum from its target.
    pub residual: f64,
    pub converged: bool,
    pub iterations: usize,
}

impl TransportPlan {
    /// Per-row argmax; ties go to the smallest column.
    pub fn hard_assignments(&self) -> Vec<usize> {
        self.plan
            .rows()
            .into_iter()
            .map(|row| {
                let mut best = 0;
                for (k, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = k;
                    }
                }
                best
            })
            .collect()
    }

    pub fn marginal_residual(&self) -> f64 {
        marginal_residual(&self.plan)
    }
}

pub(crate) fn marginal_residual(plan: &Array2<f64>) -> f64 {
    let (n, k) = plan.dim();
    let row_target = 1.0 / n as f64;
    let col_target = 1.0 / k as f64;
    let rows = plan
        .rows()
        .into_iter()
        .map(|r| (r.sum() - row_target).abs())
        .fold(0.0, f64::max);
    let cols = plan
        .columns()
        .into_iter()
        .map(|c| (c.sum() - col_target).abs())
        .fold(0.0, f64::max);
    rows.max(cols)
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Solves the entropically regularized transport problem for `cost`.
///
/// Non-convergence is not an error here: the returned plan carries
/// `converged = false` and its residual, and the caller decides.
pub fn sinkhorn(cost: ArrayView2<'_, f64>, params: &SinkhornParams) -> Result<TransportPlan> {
    let (n, k) = cost.dim();
    if n == 0 || k == 0 {
        return Err(Error::Shape(format!("empty cost matrix {n}x{k}")));
    }
    if !(params.epsilon > 0.0) || !params.epsilon.is_finite() {
        return Err(Error::Parameter(format!(
            "epsilon must be positive, got {}",
            params.epsilon
        )));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::NumericalFailure("non-finite transport cost".into()));
    }
    let eps = params.epsilon;
    let log_a = -(n as f64).ln();
    let log_b = -(k as f64).ln();
    let mut f = Array1::<f64>::zeros(n);
    let mut g = Array1::<f64>::zeros(k);
    let mut plan = Array2::<f64>::zeros((n, k));
    let mut residual = f64::INFINITY;
    let mut iterations = 0;

    let fill = |plan: &mut Array2<f64>, f: &Array1<f64>, g: &Array1<f64>| {
        for i in 0..n {
            for j in 0..k {
                plan[[i, j]] = ((f[i] + g[j] - cost[[i, j]]) / eps).exp();
            }
        }
    };

    while iterations < params.max_iters {
        iterations += 1;
        for i in 0..n {
            let row = (0..k).map(|j| (g[j] - cost[[i, j]]) / eps);
            f[i] = eps * (log_a - log_sum_exp(row));
        }
        for j in 0..k {
            let col = (0..n).map(|i| (f[i] - cost[[i, j]]) / eps);
            g[j] = eps * (log_b - log_sum_exp(col));
        }
        fill(&mut plan, &f, &g);
        residual = marginal_residual(&plan);
        if !residual.is_finite() {
            return Err(Error::NumericalFailure(
                "transport plan became non-finite".into(),
            ));
        }
        if residual < params.tol {
            break;
        }
    }

    Ok(TransportPlan {
        plan,
        residual,
        converged: residual < params.tol,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn equal_costs_give_uniform_plan() {
        let cost = Array2::from_elem((5, 3), 0.7);
        let tp = sinkhorn(cost.view(), &SinkhornParams::default()).unwrap();
        assert!(tp.converged);
        for v in tp.plan.iter() {
            assert!((v - 1.0 / 15.0).abs() < 1e-12);
        }
    }

    #[test]
    fn two_by_two_approaches_lp_vertex() {
        // Feasible plans are [[t, 1/2-t], [1/2-t, t]]; cost 1-2t is minimized
        // at the vertex t = 1/2.
        let cost = array![[0.0, 1.0], [1.0, 0.0]];
        let params = SinkhornParams { epsilon: 1e-3, max_iters: 1000, tol: 1e-9 };
        let tp = sinkhorn(cost.view(), &params).unwrap();
        let lp = array![[0.5, 0.0], [0.0, 0.5]];
        for (a, b) in tp.plan.iter().zip(lp.iter()) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn huge_epsilon_is_nearly_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cost = Array2::from_shape_fn((17, 5), |_| rng.random_range(0.0..4.0));
        let params = SinkhornParams { epsilon: 1e3, ..Default::default() };
        let tp = sinkhorn(cost.view(), &params).unwrap();
        let target = 1.0 / 85.0;
        let dev = tp.plan.iter().map(|v| (v - target).abs()).fold(0.0, f64::max);
        assert!(dev < 1e-3, "{dev}");
    }

    #[test]
    fn rejects_bad_epsilon_and_empty() {
        let cost = Array2::<f64>::zeros((2, 2));
        let bad = SinkhornParams { epsilon: 0.0, ..Default::default() };
        assert!(matches!(sinkhorn(cost.view(), &bad), Err(Error::Parameter(_))));
        let empty = Array2::<f64>::zeros((0, 2));
        assert!(sinkhorn(empty.view(), &SinkhornParams::default()).is_err());
    }

    #[test]
    fn non_convergence_is_flagged() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cost = Array2::from_shape_fn((40, 6), |_| rng.random_range(0.0..8.0));
        let params = SinkhornParams { epsilon: 1e-3, max_iters: 1, tol: 1e-12 };
        let tp = sinkhorn(cost.view(), &params).unwrap();
        assert!(!tp.converged);
        assert_eq!(tp.iterations, 1);
        assert!(tp.residual >= 1e-12);
    }

    #[test]
    fn hard_assignment_ties_to_smallest_column() {
        let tp = TransportPlan {
            plan: array![[0.25, 0.25], [0.1, 0.4]],
            residual: 0.0,
            converged: true,
            iterations: 0,
        };
        assert_eq!(tp.hard_assignments(), vec![0, 1]);
    }
}
