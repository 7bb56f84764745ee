//! Newton ascent on the penalized log-likelihood at fixed smoothing
//! parameters, with backtracking line search and support-violation
//! rejection.

use nalgebra::{DMatrix, DVector};

use super::objective::{FitContext, FullEval};
use crate::fit::layout::BlockName;

pub(crate) const XI_FLOOR: f64 = -1.0 + 1e-3;

#[derive(Debug, Clone, Copy)]
pub(crate) struct InnerOptions {
    pub grad_tol: f64,
    pub max_iterations: usize,
}

impl Default for InnerOptions {
    fn default() -> Self {
        InnerOptions { grad_tol: 1e-8, max_iterations: 100 }
    }
}

pub(crate) struct InnerSolution {
    pub theta: DVector<f64>,
    pub eval: FullEval,
    pub iterations: usize,
    pub converged: bool,
    pub grad_norm: f64,
}

/// Clamp the shape block into the regular regime.
fn project_xi(ctx: &FitContext, theta: &mut DVector<f64>) {
    let xi = ctx.layout.block(BlockName::Xi).expect("xi block always present");
    for i in 0..xi.len {
        let v = &mut theta[xi.offset + i];
        if *v < XI_FLOOR {
            *v = XI_FLOOR;
        }
    }
}

/// Widen the scale intercepts until every observation is inside the support.
pub(crate) fn make_feasible(ctx: &FitContext, theta: &mut DVector<f64>, lambdas: &[f64]) -> bool {
    project_xi(ctx, theta);
    if ctx.value(theta, lambdas).is_finite() {
        return true;
    }
    let s0 = ctx.layout.block(BlockName::Sigma0).expect("sigma0 block always present");
    for _ in 0..80 {
        for i in 0..s0.len {
            theta[s0.offset + i] += 0.25;
        }
        if ctx.value(theta, lambdas).is_finite() {
            return true;
        }
    }
    false
}

/// Monotone Newton ascent: every accepted step strictly improves the
/// objective; an escalating ridge handles indefinite curvature away from
/// the optimum.
pub(crate) fn maximize_inner(
    ctx: &FitContext,
    lambdas: &[f64],
    theta0: DVector<f64>,
    opts: InnerOptions,
) -> InnerSolution {
    let mut theta = theta0;
    let feasible = make_feasible(ctx, &mut theta, lambdas);

    let mut iterations = 0;
    let mut eval = match (feasible, ctx.eval(&theta, lambdas)) {
        (true, Some(e)) => e,
        _ => {
            // Infeasible start: report non-convergence with a -inf value.
            let dim = ctx.dim();
            return InnerSolution {
                theta,
                eval: FullEval {
                    pen_value: f64::NEG_INFINITY,
                    unpen_value: f64::NEG_INFINITY,
                    grad: DVector::zeros(dim),
                    precision: DMatrix::zeros(dim, dim),
                },
                iterations: 0,
                converged: false,
                grad_norm: f64::INFINITY,
            };
        }
    };

    loop {
        let grad_norm = eval.grad.amax();
        if grad_norm <= opts.grad_tol * (1.0 + eval.pen_value.abs()) {
            return InnerSolution { theta, eval, iterations, converged: true, grad_norm };
        }
        if iterations >= opts.max_iterations {
            return InnerSolution { theta, eval, iterations, converged: false, grad_norm };
        }
        iterations += 1;

        // Newton direction on the precision, ridged until factorizable.
        let mean_diag =
            eval.precision.diagonal().iter().map(|d| d.abs()).sum::<f64>() / ctx.dim() as f64;
        let mut ridge = 0.0;
        let direction = loop {
            let mut a = eval.precision.clone();
            if ridge > 0.0 {
                for i in 0..ctx.dim() {
                    a[(i, i)] += ridge;
                }
            }
            match a.cholesky() {
                Some(ch) => break ch.solve(&eval.grad),
                None => {
                    ridge = if ridge == 0.0 { 1e-8 * (1.0 + mean_diag) } else { ridge * 100.0 };
                    if ridge > 1e16 {
                        // Give up on curvature; gradient step.
                        break eval.grad.clone() / (1.0 + grad_norm);
                    }
                }
            }
        };

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let mut cand = &theta + &direction * step;
            project_xi(ctx, &mut cand);
            let cand_value = ctx.value(&cand, lambdas);
            if cand_value > eval.pen_value {
                accepted = Some(cand);
                break;
            }
            step *= 0.5;
        }
        match accepted {
            Some(cand) => {
                theta = cand;
                eval = ctx.eval(&theta, lambdas).expect("accepted step is feasible");
            }
            None => {
                // Stalled line search: treat near-stationary points as
                // converged, otherwise report failure.
                let ok = grad_norm <= 1e-5 * (1.0 + eval.pen_value.abs());
                return InnerSolution { theta, eval, iterations, converged: ok, grad_norm };
            }
        }
    }
}
