//! Entropically regularised optimal transport via log-domain Sinkhorn
//! iteration, recorded on the graph so gradients flow through the unrolled
//! updates into the cost matrix (and, when they are graph values, the
//! marginal weights).

use serde::{Deserialize, Serialize};

use super::{invalid, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinkhornConfig {
    /// Entropic regularisation strength.
    pub epsilon: f64,
    pub max_iters: usize,
    /// Largest tolerated marginal violation. Zero disables early stopping so
    /// the solver always unrolls exactly `max_iters` iterations, which keeps
    /// the forward pass smooth for finite-difference probes.
    pub tolerance: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.01,
            max_iters: 200,
            tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SinkhornResult {
    /// ⟨plan, cost⟩ as a graph scalar.
    pub cost: Var,
    /// The transport plan as a graph node [A x B].
    pub plan: Var,
    pub converged: bool,
    pub iterations: usize,
    /// Largest marginal violation of the returned plan.
    pub marginal_error: f64,
}

/// Transport cost between two fixed weight vectors under a graph-valued cost
/// matrix [A x B]. Weights must be non-negative; sums within 1e-6 of 1 are
/// renormalised, anything further off is rejected.
pub fn sinkhorn_emd(
    g: &mut Graph,
    cost: Var,
    weights_a: &[f64],
    weights_b: &[f64],
    cfg: &SinkhornConfig,
) -> Result<SinkhornResult> {
    let normalise = |w: &[f64], side: &str| -> Result<Vec<f64>> {
        if w.is_empty() {
            return Err(invalid("sinkhorn_emd", format!("empty {side} weights")));
        }
        if w.iter().any(|&v| v < 0.0) {
            return Err(invalid("sinkhorn_emd", format!("negative {side} weight")));
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(invalid(
                "sinkhorn_emd",
                format!("{side} weights sum to {sum}, expected 1"),
            ));
        }
        Ok(w.iter().map(|&v| v / sum).collect())
    };
    let wa = normalise(weights_a, "row")?;
    let wb = normalise(weights_b, "column")?;
    let wa_t = Tensor::new(&[wa.len()], wa.clone()).expect("length matches");
    let wb_t = Tensor::new(&[wb.len()], wb.clone()).expect("length matches");
    let wa_v = g.constant(&wa_t);
    let wb_v = g.constant(&wb_t);
    sinkhorn_core(g, cost, wa_v, wa, wb_v, wb, cfg)
}

/// As [`sinkhorn_emd`] but with graph-valued weights, e.g. marginal weights
/// derived from activation maps. Weights are read off the graph for the
/// convergence bookkeeping and are assumed already normalised.
pub fn sinkhorn_emd_weights(
    g: &mut Graph,
    cost: Var,
    weights_a: Var,
    weights_b: Var,
    cfg: &SinkhornConfig,
) -> Result<SinkhornResult> {
    let wa = g.data(weights_a).to_vec();
    let wb = g.data(weights_b).to_vec();
    for (side, w) in [("row", &wa), ("column", &wb)] {
        let sum: f64 = w.iter().sum();
        if w.iter().any(|&v| v < 0.0) || (sum - 1.0).abs() > 1e-6 {
            return Err(invalid(
                "sinkhorn_emd",
                format!("{side} weights not a distribution (sum {sum})"),
            ));
        }
    }
    sinkhorn_core(g, cost, weights_a, wa, weights_b, wb, cfg)
}

fn sinkhorn_core(
    g: &mut Graph,
    cost: Var,
    weights_a: Var,
    wa: Vec<f64>,
    weights_b: Var,
    wb: Vec<f64>,
    cfg: &SinkhornConfig,
) -> Result<SinkhornResult> {
    let shape = g.shape(cost).to_vec();
    if shape.len() != 2 || shape[0] != wa.len() || shape[1] != wb.len() {
        return Err(invalid(
            "sinkhorn_emd",
            format!(
                "cost {shape:?} does not match {} row and {} column weights",
                wa.len(),
                wb.len()
            ),
        ));
    }
    if !g.data(cost).iter().all(|v| v.is_finite()) {
        return Err(invalid("sinkhorn_emd", "non-finite cost entry"));
    }
    if cfg.epsilon <= 0.0 {
        return Err(invalid("sinkhorn_emd", "epsilon must be positive"));
    }
    let (a, b) = (shape[0], shape[1]);

    // log-domain kernel and potentials
    let m = g.mul_scalar(cost, -1.0 / cfg.epsilon);
    let log_a = g.log(weights_a);
    let log_b = g.log(weights_b);
    let mut alpha = g.constant(&Tensor::zeros(&[a]));
    let mut beta = g.constant(&Tensor::zeros(&[b]));

    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..cfg.max_iters {
        iterations += 1;
        // alpha <- log a - lse_j(M + beta_j)
        let wide_b = g.broadcast_row(beta, a)?;
        let mb = g.add(m, wide_b)?;
        let lse_rows = g.logsumexp_axis(mb, 1)?;
        alpha = g.sub(log_a, lse_rows)?;
        // beta <- log b - lse_i(M + alpha_i)
        let wide_a = g.broadcast_col(alpha, b)?;
        let ma = g.add(m, wide_a)?;
        let lse_cols = g.logsumexp_axis(ma, 0)?;
        beta = g.sub(log_b, lse_cols)?;

        if cfg.tolerance > 0.0 {
            let err = row_marginal_error(g.data(m), g.data(alpha), g.data(beta), &wa, a, b);
            if err < cfg.tolerance {
                converged = true;
                break;
            }
        }
    }

    let wide_a = g.broadcast_col(alpha, b)?;
    let wide_b = g.broadcast_row(beta, a)?;
    let sum_ab = g.add(wide_a, wide_b)?;
    let log_plan = g.add(m, sum_ab)?;
    let plan = g.exp(log_plan);
    let weighted = g.mul(plan, cost)?;
    let total = g.sum_all(weighted);

    let marginal_error = plan_marginal_error(g.data(plan), &wa, &wb, a, b);
    if cfg.tolerance > 0.0 && !converged {
        converged = marginal_error < cfg.tolerance;
    }
    Ok(SinkhornResult {
        cost: total,
        plan,
        converged,
        iterations,
        marginal_error,
    })
}

/// Max row-marginal violation of exp(M + alpha_i + beta_j) against `wa`
/// (after a column update the column marginals are exact by construction).
fn row_marginal_error(
    m: &[f64],
    alpha: &[f64],
    beta: &[f64],
    wa: &[f64],
    a: usize,
    b: usize,
) -> f64 {
    let mut err: f64 = 0.0;
    for i in 0..a {
        let mut row = 0.0;
        for j in 0..b {
            row += (m[i * b + j] + alpha[i] + beta[j]).exp();
        }
        err = err.max((row - wa[i]).abs());
    }
    err
}

fn plan_marginal_error(plan: &[f64], wa: &[f64], wb: &[f64], a: usize, b: usize) -> f64 {
    let mut err: f64 = 0.0;
    for i in 0..a {
        let row: f64 = plan[i * b..(i + 1) * b].iter().sum();
        err = err.max((row - wa[i]).abs());
    }
    for j in 0..b {
        let col: f64 = (0..a).map(|i| plan[i * b + j]).sum();
        err = err.max((col - wb[j]).abs());
    }
    err
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{gradcheck, GradCheck, TensorError};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn one_by_one_problem_equals_the_single_entry() {
        let mut g = Graph::new();
        let c = g.constant(&t(&[1, 1], &[0.37]));
        let r = sinkhorn_emd(&mut g, c, &[1.0], &[1.0], &SinkhornConfig::default()).unwrap();
        assert!((g.item(r.cost) - 0.37).abs() < 1e-12);
        assert!((g.data(r.plan)[0] - 1.0).abs() < 1e-12);
        assert!(r.converged);
    }

    #[test]
    fn mass_stays_on_the_cheap_diagonal() {
        let n = 4;
        let mut cost = Tensor::full(&[n, n], 2.0);
        for i in 0..n {
            cost.data_mut()[i * n + i] = 0.0;
        }
        let w = vec![1.0 / n as f64; n];
        let mut g = Graph::new();
        let c = g.constant(&cost);
        let cfg = SinkhornConfig {
            epsilon: 0.01,
            max_iters: 2000,
            tolerance: 1e-9,
        };
        let r = sinkhorn_emd(&mut g, c, &w, &w, &cfg).unwrap();
        assert!(g.item(r.cost) < 0.05, "cost {}", g.item(r.cost));
        assert!(g.item(r.cost) >= 0.0);
    }

    #[test]
    fn converged_plans_satisfy_marginals() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        for trial in 0..10 {
            let (a, b) = (rng.random_range(1..=5), rng.random_range(1..=5));
            let mut cost = Tensor::zeros(&[a, b]);
            for v in cost.data_mut() {
                *v = rng.random::<f64>();
            }
            let rand_w = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> {
                let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 0.05).collect();
                let s: f64 = raw.iter().sum();
                raw.iter().map(|v| v / s).collect()
            };
            let wa = rand_w(&mut rng, a);
            let wb = rand_w(&mut rng, b);
            let mut g = Graph::new();
            let c = g.constant(&cost);
            let cfg = SinkhornConfig {
                epsilon: 0.05,
                max_iters: 5000,
                tolerance: 1e-8,
            };
            let r = sinkhorn_emd(&mut g, c, &wa, &wb, &cfg).unwrap();
            assert!(r.converged, "trial {trial} did not converge");
            assert!(r.marginal_error < 1e-7, "trial {trial}: {}", r.marginal_error);
            assert!(g.data(r.plan).iter().all(|&p| p >= 0.0));
            assert!(g.item(r.cost) >= -1e-12);
        }
    }

    #[test]
    fn non_convergence_is_flagged_not_fatal() {
        let cost = t(&[2, 2], &[0.0, 1.0, 1.0, 0.0]);
        let mut g = Graph::new();
        let c = g.constant(&cost);
        let cfg = SinkhornConfig {
            epsilon: 0.005,
            max_iters: 1,
            tolerance: 1e-12,
        };
        let r = sinkhorn_emd(&mut g, c, &[0.9, 0.1], &[0.2, 0.8], &cfg).unwrap();
        assert!(!r.converged);
        assert_eq!(r.iterations, 1);
        assert!(g.item(r.cost).is_finite());
    }

    #[test]
    fn weight_validation() {
        let cost = t(&[2, 2], &[0.0, 1.0, 1.0, 0.0]);
        let mut g = Graph::new();
        let c = g.constant(&cost);
        let cfg = SinkhornConfig::default();
        assert!(sinkhorn_emd(&mut g, c, &[0.5, -0.1], &[0.5, 0.5], &cfg).is_err());
        assert!(sinkhorn_emd(&mut g, c, &[0.7, 0.7], &[0.5, 0.5], &cfg).is_err());
        // within 1e-6 of a distribution: accepted and renormalised
        assert!(sinkhorn_emd(&mut g, c, &[0.5000004, 0.5], &[0.5, 0.5], &cfg).is_ok());
    }

    #[test]
    fn gradient_through_unrolled_iterations_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(73);
        let mut cost = Tensor::zeros(&[3, 4]);
        for v in cost.data_mut() {
            *v = rng.random::<f64>();
        }
        let cost = cost.with_grad();
        let wa = [0.25, 0.5, 0.25];
        let wb = [0.1, 0.2, 0.3, 0.4];
        // fixed iteration count (tolerance 0) keeps the map smooth
        let cfg = SinkhornConfig {
            epsilon: 0.05,
            max_iters: 120,
            tolerance: 0.0,
        };
        gradcheck(
            |g, vars| {
                let r = sinkhorn_emd(g, vars[0], &wa, &wb, &cfg).map_err(|e| {
                    TensorError::Invalid {
                        op: "sinkhorn",
                        msg: e.to_string(),
                    }
                })?;
                Ok(r.cost)
            },
            &[cost],
            &GradCheck::default(),
        )
        .unwrap();
    }
}
