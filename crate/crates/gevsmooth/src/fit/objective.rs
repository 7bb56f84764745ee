//! The penalized log-likelihood, its gradient and Hessian.
//!
//! The objective is `sum_i l_i(theta_i) - sum_k lambda_k v_k' S v_k` where
//! `l_i` is the per-box GEV log-likelihood with covariate-driven location
//! and log-scale, and each penalized field `v_k` carries the GMRF penalty.
//! The likelihood couples coefficients within a box (plus the global fixed
//! effects); the penalty couples neighbouring boxes within a field.

use crate::error::Error;
use crate::gev::log_density_derivs;
use crate::grid::{GriddedDataset, PenaltyMatrix};
use crate::model::{CovariateSeries, ModelSpec, ParameterField, Trend};
use crate::Result;
use nalgebra::{DMatrix, DVector};

use super::layout::{BlockName, Layout};

/// Which GEV parameter axis a coefficient feeds, with its per-year weight.
#[derive(Debug, Clone, Copy)]
struct CoefSens {
    idx: usize,
    /// 0 = mu, 1 = tau (log sigma), 2 = xi.
    axis: usize,
    weight: Weight,
}

#[derive(Debug, Clone, Copy)]
enum Weight {
    One,
    Covariate,
    Elevation,
}

/// Everything a fit needs, prepared once.
pub(crate) struct FitContext<'a> {
    pub data: &'a GriddedDataset,
    pub spec: &'a ModelSpec,
    /// Covariate aligned to `data.years()`.
    pub cov: CovariateSeries,
    pub penalty: &'a PenaltyMatrix,
    pub layout: Layout,
    /// Centered elevations (zero when the elevation column is dropped).
    pub elev: Vec<f64>,
    pub elev_center: f64,
    /// True when the spec asked for an elevation effect but the centered
    /// elevations are identically zero, so the column was dropped.
    pub beta_dropped: bool,
    /// Per-box observation lists (year-index, value).
    obs: Vec<Vec<(usize, f64)>>,
    /// Per-box coefficient sensitivities.
    sens: Vec<Vec<CoefSens>>,
    offsets: Offsets,
}

/// Cached block offsets for the per-observation hot path.
#[derive(Debug, Clone, Copy)]
struct Offsets {
    mu0: usize,
    /// (offset, is_scalar)
    mu1: Option<(usize, bool)>,
    sigma0: usize,
    sigma1: Option<usize>,
    xi: usize,
    beta: Option<usize>,
}

impl<'a> FitContext<'a> {
    pub fn new(
        data: &'a GriddedDataset,
        spec: &'a ModelSpec,
        cov: &CovariateSeries,
        penalty: &'a PenaltyMatrix,
    ) -> Result<Self> {
        if penalty.dim() != data.n_boxes() {
            return Err(Error::Domain(format!(
                "penalty dimension {} does not match {} grid boxes",
                penalty.dim(),
                data.n_boxes()
            )));
        }
        let cov = cov.aligned_to(data.years())?;
        let (elev_raw, elev_center) = data.grid().centered_elevations();
        let beta_requested = spec.elevation_effect;
        let elev_all_zero = elev_raw.iter().all(|&e| e.abs() < 1e-12);
        let beta_active = beta_requested && !elev_all_zero;
        let beta_dropped = beta_requested && elev_all_zero;
        let layout = Layout::new(spec, data.n_boxes(), beta_active);
        let elev = if beta_active { elev_raw } else { vec![0.0; data.n_boxes()] };

        let n = data.n_boxes();
        let mut obs = Vec::with_capacity(n);
        for b in 0..n {
            let rows: Vec<(usize, f64)> =
                (0..data.n_years()).filter_map(|t| data.value(b, t).map(|y| (t, y))).collect();
            obs.push(rows);
        }

        let mut sens = Vec::with_capacity(n);
        for b in 0..n {
            let mut list = Vec::with_capacity(7);
            let mu0 = layout.block(BlockName::Mu0).expect("always present");
            list.push(CoefSens { idx: mu0.offset + b, axis: 0, weight: Weight::One });
            if let Some(mu1) = layout.block(BlockName::Mu1) {
                let idx = if spec.mu_trend == Trend::Varying { mu1.offset + b } else { mu1.offset };
                list.push(CoefSens { idx, axis: 0, weight: Weight::Covariate });
            }
            if let Some(beta) = layout.block(BlockName::Beta) {
                list.push(CoefSens { idx: beta.offset, axis: 0, weight: Weight::Elevation });
            }
            let s0 = layout.block(BlockName::Sigma0).expect("always present");
            list.push(CoefSens { idx: s0.offset + b, axis: 1, weight: Weight::One });
            if let Some(s1) = layout.block(BlockName::Sigma1) {
                list.push(CoefSens { idx: s1.offset + b, axis: 1, weight: Weight::Covariate });
            }
            let xi = layout.block(BlockName::Xi).expect("always present");
            list.push(CoefSens { idx: xi.offset + b, axis: 2, weight: Weight::One });
            sens.push(list);
        }

        let offsets = Offsets {
            mu0: layout.block(BlockName::Mu0).unwrap().offset,
            mu1: layout.block(BlockName::Mu1).map(|b| (b.offset, b.len == 1)),
            sigma0: layout.block(BlockName::Sigma0).unwrap().offset,
            sigma1: layout.block(BlockName::Sigma1).map(|b| b.offset),
            xi: layout.block(BlockName::Xi).unwrap().offset,
            beta: layout.block(BlockName::Beta).map(|b| b.offset),
        };

        Ok(FitContext {
            data,
            spec,
            cov,
            penalty,
            layout,
            elev,
            elev_center,
            beta_dropped,
            obs,
            sens,
            offsets,
        })
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    pub fn n_lambdas(&self) -> usize {
        self.layout.n_penalized()
    }

    fn box_params(&self, theta: &DVector<f64>, b: usize, t: usize) -> (f64, f64, f64) {
        let o = &self.offsets;
        let x = self.cov.x_at(t);
        let mut mu = theta[o.mu0 + b];
        if let Some((off, scalar)) = o.mu1 {
            mu += theta[if scalar { off } else { off + b }] * x;
        }
        if let Some(off) = o.beta {
            mu += theta[off] * self.elev[b];
        }
        let mut tau = theta[o.sigma0 + b];
        if let Some(off) = o.sigma1 {
            tau += theta[off + b] * x;
        }
        let xi = theta[o.xi + b];
        (mu, tau, xi)
    }

    fn weight_value(&self, w: Weight, b: usize, t: usize) -> f64 {
        match w {
            Weight::One => 1.0,
            Weight::Covariate => self.cov.x_at(t),
            Weight::Elevation => self.elev[b],
        }
    }

    /// Penalty term `sum_k lambda_k v_k' S v_k` at `theta`.
    pub fn penalty_value(&self, theta: &DVector<f64>, lambdas: &[f64]) -> f64 {
        let mut total = 0.0;
        for (k, block) in self.layout.penalized_blocks().iter().enumerate() {
            let v = &theta.as_slice()[block.offset..block.offset + block.len];
            total += lambdas[k] * self.penalty.quadratic_form(v);
        }
        total
    }

    /// Unpenalized log-likelihood only; `-inf` outside the support.
    pub fn loglik_value(&self, theta: &DVector<f64>) -> f64 {
        let mut total = 0.0;
        for b in 0..self.data.n_boxes() {
            for &(t, y) in &self.obs[b] {
                let (mu, tau, xi) = self.box_params(theta, b, t);
                match log_density_derivs(y, mu, tau, xi) {
                    Some(d) => total += d.value,
                    None => return f64::NEG_INFINITY,
                }
            }
        }
        total
    }

    /// Penalized objective value; `-inf` outside the support.
    pub fn value(&self, theta: &DVector<f64>, lambdas: &[f64]) -> f64 {
        let ll = self.loglik_value(theta);
        if ll.is_finite() {
            ll - self.penalty_value(theta, lambdas)
        } else {
            ll
        }
    }

    /// Full evaluation: penalized value, gradient and the precision matrix
    /// `-(d2/dtheta2) penalized log-likelihood`. `None` outside the support.
    pub fn eval(&self, theta: &DVector<f64>, lambdas: &[f64]) -> Option<FullEval> {
        let dim = self.dim();
        let mut unpen = 0.0;
        let mut grad = DVector::zeros(dim);
        let mut precision = DMatrix::zeros(dim, dim);

        for b in 0..self.data.n_boxes() {
            let sens = &self.sens[b];
            for &(t, y) in &self.obs[b] {
                let (mu, tau, xi) = self.box_params(theta, b, t);
                let d = log_density_derivs(y, mu, tau, xi)?;
                unpen += d.value;
                // At most 7 active coefficients per box.
                let mut weights = [0.0f64; 8];
                for (a, c) in sens.iter().enumerate() {
                    weights[a] = self.weight_value(c.weight, b, t);
                }
                for (a, ca) in sens.iter().enumerate() {
                    grad[ca.idx] += d.grad[ca.axis] * weights[a];
                    for (bb, cb) in sens.iter().enumerate() {
                        precision[(ca.idx, cb.idx)] -=
                            d.hess[ca.axis][cb.axis] * weights[a] * weights[bb];
                    }
                }
            }
        }

        // Penalty: gradient -2 lambda S v per field, curvature +2 lambda S.
        let mut pen_value = 0.0;
        for (k, block) in self.layout.penalized_blocks().iter().enumerate() {
            let v = &theta.as_slice()[block.offset..block.offset + block.len];
            pen_value += lambdas[k] * self.penalty.quadratic_form(v);
            let mut sv = vec![0.0; block.len];
            self.penalty.accumulate_matvec(v, 1.0, &mut sv);
            for (i, s) in sv.iter().enumerate() {
                grad[block.offset + i] -= 2.0 * lambdas[k] * s;
            }
            self.penalty.add_scaled_to_dense(&mut precision, block.offset, 2.0 * lambdas[k]);
        }

        Some(FullEval { pen_value: unpen - pen_value, unpen_value: unpen, grad, precision })
    }

    /// Negative Hessian of the unpenalized log-likelihood at `theta`
    /// (needed for effective degrees of freedom).
    pub fn lik_curvature(&self, theta: &DVector<f64>) -> Option<DMatrix<f64>> {
        let ev = self.eval(theta, &vec![0.0; self.n_lambdas()])?;
        Some(ev.precision)
    }
}

pub(crate) struct FullEval {
    pub pen_value: f64,
    pub unpen_value: f64,
    pub grad: DVector<f64>,
    pub precision: DMatrix<f64>,
}

/// Public, spec-shaped view of the objective at a given coefficient field:
/// value, gradient and Hessian of the penalized log-likelihood. The
/// derivatives are absent when the value is `-inf` (support violation).
pub struct PenalizedObjective {
    pub value: f64,
    pub gradient: Option<DVector<f64>>,
    /// Hessian of the objective (the negated precision).
    pub hessian: Option<DMatrix<f64>>,
}

pub fn penalized_objective(
    field: &ParameterField,
    spec: &ModelSpec,
    data: &GriddedDataset,
    cov: &CovariateSeries,
    lambdas: &[f64],
    penalty: &PenaltyMatrix,
) -> Result<PenalizedObjective> {
    field.validate_against(spec, data.n_boxes())?;
    let ctx = FitContext::new(data, spec, cov, penalty)?;
    if lambdas.len() != ctx.n_lambdas() {
        return Err(Error::Domain(format!(
            "expected {} smoothing parameters for model {}, got {}",
            ctx.n_lambdas(),
            spec.label,
            lambdas.len()
        )));
    }
    let theta = ctx.layout.pack(field);
    match ctx.eval(&theta, lambdas) {
        Some(ev) => Ok(PenalizedObjective {
            value: ev.pen_value,
            gradient: Some(ev.grad),
            hessian: Some(-ev.precision),
        }),
        None => Ok(PenalizedObjective {
            value: f64::NEG_INFINITY,
            gradient: None,
            hessian: None,
        }),
    }
}
