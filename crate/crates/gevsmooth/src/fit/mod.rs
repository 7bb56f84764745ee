//! Joint penalized-likelihood fitting over all grid boxes.
//!
//! The inner loop maximizes the penalized log-likelihood at fixed smoothing
//! parameters by Newton ascent with backtracking, starting from per-box
//! L-moments estimates smoothed by one penalty-weighted linear solve. The
//! outer loop selects the smoothing parameters by Laplace-approximate
//! marginal likelihood (quasi-Newton on log-lambda with finite-difference
//! gradients, grid-search fallback). Uncertainty comes from the curvature
//! (precision) of the penalized log-likelihood at the optimum, read as a
//! Gaussian posterior approximation.

pub mod layout;

mod independent;
mod inner;
mod objective;
mod outer;

pub use independent::{fit_independent, uncertainty_ratio, IndependentBoxFit, IndependentFit};
pub use layout::{Block, BlockName, Layout};
pub use objective::{penalized_objective, PenalizedObjective};

pub(crate) use objective::FitContext;

use crate::error::Error;
use crate::gev::fit_lmoments;
use crate::grid::{format_float, write_csv_rows, write_text, GriddedDataset, PenaltyMatrix};
use crate::model::{CovariateSeries, ModelSpec, ParameterField};
use crate::rng::{substream, tags};
use crate::Result;
use inner::{maximize_inner, InnerOptions};
use nalgebra::{DMatrix, DVector};
use outer::{laml_value, select_lambdas, OuterOptions, PenaltyConstants};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use std::path::Path;

/// One positive smoothing parameter per penalized coefficient field,
/// stored on the log scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothingParams {
    names: Vec<String>,
    log_lambda: Vec<f64>,
}

impl SmoothingParams {
    /// Selected fits always carry positive lambdas; zero is tolerated so
    /// penalty-off diagnostic fits can be represented (`ln 0 = -inf` round
    /// trips through `exp`).
    pub fn new(names: Vec<String>, lambdas: &[f64]) -> Result<Self> {
        if names.len() != lambdas.len() {
            return Err(Error::Domain("smoothing parameter name/value mismatch".into()));
        }
        if let Some(&bad) = lambdas.iter().find(|&&l| !(l >= 0.0)) {
            return Err(Error::Domain(format!(
                "smoothing parameters must be non-negative, got {bad}"
            )));
        }
        Ok(SmoothingParams { names, log_lambda: lambdas.iter().map(|l| l.ln()).collect() })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn lambdas(&self) -> Vec<f64> {
        self.log_lambda.iter().map(|l| l.exp()).collect()
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|i| self.log_lambda[i].exp())
    }
}

/// How the smoothing parameters are chosen.
#[derive(Debug, Clone, PartialEq)]
pub enum LambdaChoice {
    /// Marginal-likelihood maximization (the default).
    Optimize,
    /// Fixed values, one per penalized field.
    Fixed(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub lambdas: LambdaChoice,
    /// Starting lambda for every penalized field when optimizing (also used
    /// for the initialization smoothing solve).
    pub initial_lambda: f64,
    /// Full warm-start vector; overrides `initial_lambda` when present.
    pub initial_lambdas: Option<Vec<f64>>,
    pub inner_grad_tol: f64,
    pub max_inner: usize,
    pub max_outer: usize,
    pub outer_step_tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            lambdas: LambdaChoice::Optimize,
            initial_lambda: 1.0,
            initial_lambdas: None,
            inner_grad_tol: 1e-8,
            max_inner: 100,
            max_outer: 25,
            outer_step_tol: 1e-3,
        }
    }
}

impl FitOptions {
    pub fn fixed_lambdas(lambdas: Vec<f64>) -> Self {
        FitOptions { lambdas: LambdaChoice::Fixed(lambdas), ..Default::default() }
    }
}

/// A converged penalized fit: the MAP coefficient field, selected smoothing
/// parameters, curvature-based uncertainty and effective degrees of freedom.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub spec: ModelSpec,
    pub field: ParameterField,
    pub lambdas: SmoothingParams,
    pub penalized_ll: f64,
    pub unpenalized_ll: f64,
    /// Laplace-approximate log marginal likelihood at the selected lambdas.
    pub laml: f64,
    /// Negative Hessian of the penalized log-likelihood at the optimum.
    pub precision: DMatrix<f64>,
    pub edf: f64,
    /// Per-coefficient effective degrees of freedom (sums to `edf`).
    pub edf_by_coef: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub outer_iterations: usize,
    pub elev_center: f64,
    /// The elevation column was requested but dropped (all centered
    /// elevations were zero).
    pub beta_dropped: bool,
    pub layout: Layout,
    pub years: Vec<i32>,
}

impl FitResult {
    /// Packed coefficient vector of the fitted field.
    pub fn theta(&self) -> DVector<f64> {
        self.layout.pack(&self.field)
    }

    /// Inverse precision (the Gaussian posterior covariance).
    pub fn covariance(&self) -> Result<DMatrix<f64>> {
        Ok(self.cholesky()?.inverse())
    }

    fn cholesky(&self) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
        self.precision.clone().cholesky().ok_or_else(|| {
            Error::FitFailure(
                "precision is not positive definite: a penalty null-space mode is not \
                 identified by the likelihood; constrain the constant mode per component or \
                 provide more data"
                    .into(),
            )
        })
    }
}

/// Build the starting coefficient vector: per-box L-moments estimates (shape
/// clipped to [-0.5, 0.3]), trends at zero, then one penalty-weighted linear
/// smoothing solve `(I + lambda S)^{-1}` per penalized field.
pub(crate) fn initialize_theta(ctx: &FitContext, lambdas: &[f64]) -> Result<DVector<f64>> {
    let data = ctx.data;
    let n = data.n_boxes();

    // Pooled fallback for boxes with too few or degenerate observations.
    let pooled: Vec<f64> = data.observations().map(|(_, _, y)| y).collect();
    let pooled_sample = crate::gev::Sample::from_values(pooled)?;
    let pooled_est = fit_lmoments(&pooled_sample).unwrap_or(crate::gev::GevParams {
        mu: pooled_sample.values().iter().sum::<f64>() / pooled_sample.len() as f64,
        sigma: 1.0,
        xi: 0.0,
    });

    let mut mu0 = vec![0.0; n];
    let mut sigma0 = vec![0.0; n];
    let mut xi = vec![0.0; n];
    for b in 0..n {
        let est = data
            .box_sample(b)
            .ok()
            .and_then(|s| independent::lmoments_or_none(&s))
            .unwrap_or(pooled_est);
        mu0[b] = est.mu;
        sigma0[b] = est.sigma.ln();
        xi[b] = est.xi.clamp(-0.5, 0.3);
    }

    // One penalty-weighted smoothing pass keeps the first Newton step in the
    // regular regime (and near-constant fields for huge lambda).
    for (k, block) in ctx.layout.penalized_blocks().iter().enumerate() {
        let lam = lambdas.get(k).copied().unwrap_or(0.0).clamp(0.0, 1e8);
        if lam <= 0.0 || ctx.penalty.rank() == 0 {
            continue;
        }
        let target = match block.name {
            BlockName::Mu0 => &mut mu0,
            BlockName::Sigma0 => &mut sigma0,
            BlockName::Xi => &mut xi,
            _ => continue, // trend fields start at zero
        };
        let mut a = DMatrix::identity(n, n);
        ctx.penalty.add_scaled_to_dense(&mut a, 0, lam);
        if let Some(ch) = a.cholesky() {
            let smoothed = ch.solve(&DVector::from_column_slice(target));
            target.copy_from_slice(smoothed.as_slice());
        }
    }

    let mut field = ParameterField::zeros(n, ctx.spec);
    field.mu0 = mu0;
    field.sigma0 = sigma0;
    field.xi = xi;
    Ok(ctx.layout.pack(&field))
}

/// Maximize the penalized log-likelihood, selecting smoothing parameters by
/// marginal likelihood unless fixed values are supplied.
pub fn fit_smooth(
    data: &GriddedDataset,
    spec: &ModelSpec,
    cov: &CovariateSeries,
    penalty: &PenaltyMatrix,
    opts: &FitOptions,
) -> Result<FitResult> {
    let ctx = FitContext::new(data, spec, cov, penalty)?;
    let k = ctx.n_lambdas();
    let inner_opts = InnerOptions { grad_tol: opts.inner_grad_tol, max_iterations: opts.max_inner };
    let outer_opts = OuterOptions {
        max_iterations: opts.max_outer,
        step_tol: opts.outer_step_tol,
        inner: inner_opts,
    };
    let consts =
        PenaltyConstants { rank: penalty.rank(), log_pdet: penalty.log_pseudo_det() };

    let start_lambdas: Vec<f64> = match (&opts.lambdas, &opts.initial_lambdas) {
        (LambdaChoice::Fixed(v), _) => v.clone(),
        (LambdaChoice::Optimize, Some(v)) => v.clone(),
        (LambdaChoice::Optimize, None) => vec![opts.initial_lambda; k],
    };
    if start_lambdas.len() != k {
        return Err(Error::Domain(format!(
            "model {} has {k} penalized fields, got {} smoothing parameters",
            spec.label,
            start_lambdas.len()
        )));
    }

    let theta0 = initialize_theta(&ctx, &start_lambdas)?;
    let init_value = ctx.value(&theta0, &start_lambdas);

    let outcome = match &opts.lambdas {
        LambdaChoice::Fixed(v) => {
            let sol = maximize_inner(&ctx, v, theta0, inner_opts);
            let laml = laml_value(&ctx, &consts, v, &sol);
            let iterations = sol.iterations;
            outer::OuterOutcome {
                lambdas: v.clone(),
                inner: sol,
                laml,
                outer_iterations: 0,
                total_inner_iterations: iterations,
            }
        }
        LambdaChoice::Optimize => {
            select_lambdas(&ctx, consts, start_lambdas, theta0, outer_opts)
        }
    };

    let sol = &outcome.inner;
    if !sol.converged {
        return Err(Error::FitFailure(format!(
            "inner optimizer did not converge for model {} after {} outer / {} inner \
             iterations (gradient norm {:.3e}, objective {:.6e}, initial objective {:.6e})",
            spec.label,
            outcome.outer_iterations,
            outcome.total_inner_iterations,
            sol.grad_norm,
            sol.eval.pen_value,
            init_value
        )));
    }
    debug_assert!(sol.eval.pen_value >= init_value || !init_value.is_finite());

    let theta = &sol.theta;
    let field = ctx.layout.unpack(theta, spec);
    let precision = sol.eval.precision.clone();
    let h_unpen = ctx
        .lik_curvature(theta)
        .ok_or_else(|| Error::FitFailure("optimum left the support".into()))?;
    let inv = precision.clone().cholesky().ok_or_else(|| {
        Error::FitFailure(
            "precision is not positive definite at the optimum: the penalty null space is \
             not identified (all-empty component or lambda = 0 with redundant fixed effects)"
                .into(),
        )
    })?;
    let inv = inv.inverse();
    let dim = ctx.dim();
    let mut edf_by_coef = vec![0.0; dim];
    for i in 0..dim {
        let mut acc = 0.0;
        for j in 0..dim {
            acc += h_unpen[(i, j)] * inv[(j, i)];
        }
        edf_by_coef[i] = acc;
    }
    let edf: f64 = edf_by_coef.iter().sum();

    let lambda_names: Vec<String> =
        ctx.layout.penalized_names().iter().map(|s| s.to_string()).collect();
    Ok(FitResult {
        spec: spec.clone(),
        field,
        lambdas: SmoothingParams::new(lambda_names, &outcome.lambdas)?,
        penalized_ll: sol.eval.pen_value,
        unpenalized_ll: sol.eval.unpen_value,
        laml: outcome.laml,
        precision,
        edf,
        edf_by_coef,
        converged: true,
        iterations: outcome.total_inner_iterations,
        outer_iterations: outcome.outer_iterations,
        elev_center: ctx.elev_center,
        beta_dropped: ctx.beta_dropped,
        layout: ctx.layout.clone(),
        years: data.years().to_vec(),
    })
}

/// Akaike information criterion with effective degrees of freedom:
/// `-2 l(theta_hat) + 2 edf`.
pub fn aic(fit: &FitResult) -> f64 {
    -2.0 * fit.unpenalized_ll + 2.0 * fit.edf
}

/// Draws from the Gaussian posterior approximation `N(theta_hat, H^-1)`,
/// deterministic in `(seed, draw index)` regardless of parallel schedule.
pub fn posterior_sample(fit: &FitResult, count: usize, seed: u64) -> Result<Vec<ParameterField>> {
    let chol = fit.cholesky()?;
    let l = chol.l();
    let theta_hat = fit.theta();
    let dim = theta_hat.len();
    let spec = fit.spec.clone();

    let draws: Vec<ParameterField> = (0..count)
        .into_par_iter()
        .map(|d| {
            let mut rng = substream(seed, tags::POSTERIOR_DRAW, d as u64);
            let z =
                DVector::from_iterator(dim, (0..dim).map(|_| StandardNormal.sample(&mut rng)));
            // Solve L' u = z so that Cov(u) = (L L')^{-1}.
            let u = l
                .transpose()
                .solve_upper_triangular(&z)
                .expect("Cholesky factor is nonsingular");
            fit.layout.unpack(&(&theta_hat + u), &spec)
        })
        .collect();
    Ok(draws)
}

/// Wald test of a whole coefficient block against zero.
#[derive(Debug, Clone, Serialize)]
pub struct WaldTest {
    pub block: String,
    pub statistic: f64,
    pub df: usize,
    pub block_edf: f64,
    pub p_value: f64,
}

/// Test `H0: block = 0` with the statistic `b' Cov(b)^{-1} b` referred to a
/// chi-squared distribution with the block's (rounded) effective degrees of
/// freedom.
pub fn wald_zero_test(fit: &FitResult, block_name: &str) -> Result<WaldTest> {
    let name = BlockName::parse(block_name)?;
    let block = fit.layout.block(name).ok_or_else(|| {
        Error::Domain(format!(
            "model {} has no {block_name:?} block (dimension 0)",
            fit.spec.label
        ))
    })?;
    let inv = fit.covariance()?;
    let idx: Vec<usize> = (block.offset..block.offset + block.len).collect();
    let theta = fit.theta();
    let b = DVector::from_iterator(idx.len(), idx.iter().map(|&i| theta[i]));
    let mut cov_b = DMatrix::zeros(idx.len(), idx.len());
    for (r, &i) in idx.iter().enumerate() {
        for (c, &j) in idx.iter().enumerate() {
            cov_b[(r, c)] = inv[(i, j)];
        }
    }
    let chol = cov_b
        .cholesky()
        .ok_or_else(|| Error::FitFailure("block covariance is not invertible".into()))?;
    let statistic = b.dot(&chol.solve(&b));
    let block_edf: f64 = idx.iter().map(|&i| fit.edf_by_coef[i]).sum();
    let df = (block_edf.round() as i64).max(1) as usize;
    let chi2 = ChiSquared::new(df as f64)
        .map_err(|e| Error::Domain(format!("chi-squared reference failed: {e}")))?;
    let p_value = (1.0 - chi2.cdf(statistic)).clamp(0.0, 1.0);
    Ok(WaldTest { block: block_name.to_string(), statistic, df, block_edf, p_value })
}

/// Serializable fit artifact: coefficients, smoothing parameters,
/// log-likelihoods, effective degrees of freedom and the precision matrix
/// (lower triangle, row-major).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitDocument {
    pub model: ModelSpec,
    pub n_boxes: usize,
    pub years: Vec<i32>,
    pub elev_center: f64,
    pub beta_active: bool,
    pub beta_dropped: bool,
    pub lambda_names: Vec<String>,
    pub lambdas: Vec<f64>,
    pub penalized_ll: f64,
    pub unpenalized_ll: f64,
    pub laml: f64,
    pub edf: f64,
    pub edf_by_coef: Vec<f64>,
    pub aic: f64,
    pub converged: bool,
    pub iterations: usize,
    pub outer_iterations: usize,
    pub field: ParameterField,
    pub precision_lower: Vec<f64>,
}

impl FitDocument {
    pub fn from_result(fit: &FitResult) -> Self {
        let dim = fit.precision.nrows();
        let mut lower = Vec::with_capacity(dim * (dim + 1) / 2);
        for i in 0..dim {
            for j in 0..=i {
                lower.push(fit.precision[(i, j)]);
            }
        }
        FitDocument {
            model: fit.spec.clone(),
            n_boxes: fit.layout.n_boxes,
            years: fit.years.clone(),
            elev_center: fit.elev_center,
            beta_active: fit.layout.beta_active,
            beta_dropped: fit.beta_dropped,
            lambda_names: fit.lambdas.names().to_vec(),
            lambdas: fit.lambdas.lambdas(),
            penalized_ll: fit.penalized_ll,
            unpenalized_ll: fit.unpenalized_ll,
            laml: fit.laml,
            edf: fit.edf,
            edf_by_coef: fit.edf_by_coef.clone(),
            aic: aic(fit),
            converged: fit.converged,
            iterations: fit.iterations,
            outer_iterations: fit.outer_iterations,
            field: fit.field.clone(),
            precision_lower: lower,
        }
    }

    pub fn to_result(&self) -> Result<FitResult> {
        let layout = Layout::new(&self.model, self.n_boxes, self.beta_active);
        let dim = layout.dim();
        if self.precision_lower.len() != dim * (dim + 1) / 2 {
            return Err(Error::Ingest(format!(
                "fit document precision has {} entries, expected {}",
                self.precision_lower.len(),
                dim * (dim + 1) / 2
            )));
        }
        let mut precision = DMatrix::zeros(dim, dim);
        let mut it = self.precision_lower.iter();
        for i in 0..dim {
            for j in 0..=i {
                let v = *it.next().expect("length checked");
                precision[(i, j)] = v;
                precision[(j, i)] = v;
            }
        }
        self.field.validate_against(&self.model, self.n_boxes)?;
        Ok(FitResult {
            spec: self.model.clone(),
            field: self.field.clone(),
            lambdas: SmoothingParams::new(self.lambda_names.clone(), &self.lambdas)?,
            penalized_ll: self.penalized_ll,
            unpenalized_ll: self.unpenalized_ll,
            laml: self.laml,
            precision,
            edf: self.edf,
            edf_by_coef: self.edf_by_coef.clone(),
            converged: self.converged,
            iterations: self.iterations,
            outer_iterations: self.outer_iterations,
            elev_center: self.elev_center,
            beta_dropped: self.beta_dropped,
            layout,
            years: self.years.clone(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        write_text(path, &json)
    }

    pub fn load(path: &Path) -> Result<FitDocument> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Coefficient CSV (`box_id, mu0, mu1, sigma0, sigma1, xi`); absent trend
/// columns are left empty, a homogeneous slope repeats its scalar value.
pub fn write_coefficients_csv(fit: &FitResult, path: &Path) -> Result<()> {
    use crate::model::Mu1;
    let n = fit.layout.n_boxes;
    let mut rows = Vec::with_capacity(n);
    for b in 0..n {
        let mu1 = match &fit.field.mu1 {
            Mu1::Absent => String::new(),
            Mu1::PerBox(v) => format_float(v[b]),
            Mu1::Scalar(s) => format_float(*s),
        };
        let sigma1 = match &fit.field.sigma1 {
            None => String::new(),
            Some(v) => format_float(v[b]),
        };
        rows.push(vec![
            b.to_string(),
            format_float(fit.field.mu0[b]),
            mu1,
            format_float(fit.field.sigma0[b]),
            sigma1,
            format_float(fit.field.xi[b]),
        ]);
    }
    write_csv_rows(path, &["box_id", "mu0", "mu1", "sigma0", "sigma1", "xi"], &rows)
}
