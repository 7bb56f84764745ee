//! Per-box maximum likelihood: every grid box fitted separately, with
//! standard errors from the inverse observed information. The baseline the
//! smooth fit is compared against.

use nalgebra::DMatrix;

use super::inner::{maximize_inner, InnerOptions};
use super::layout::BlockName;
use super::objective::FitContext;
use super::FitResult;
use crate::error::Error;
use crate::gev::fit_lmoments;
use crate::grid::{build_neighborhood, build_penalty, Grid, GriddedDataset};
use crate::model::{CovariateSeries, ModelSpec, Trend};
use crate::Result;

/// One converged per-box fit.
#[derive(Debug, Clone)]
pub struct IndependentBoxFit {
    /// Coefficients in `coef_names` order.
    pub coefficients: Vec<f64>,
    /// Inverse observed information, same ordering (log-scale coordinates
    /// for the sigma entries).
    pub covariance: DMatrix<f64>,
    pub loglik: f64,
    pub iterations: usize,
}

/// Per-box fits; boxes that failed to converge are `None` and counted.
#[derive(Debug, Clone)]
pub struct IndependentFit {
    /// The per-box model: homogeneous trends become per-box, the elevation
    /// fixed effect is absorbed into each intercept.
    pub spec: ModelSpec,
    pub coef_names: Vec<&'static str>,
    pub boxes: Vec<Option<IndependentBoxFit>>,
}

impl IndependentFit {
    pub fn n_failed(&self) -> usize {
        self.boxes.iter().filter(|b| b.is_none()).count()
    }

    pub fn coef_index(&self, name: &str) -> Option<usize> {
        self.coef_names.iter().position(|&n| n == name)
    }

    /// Standard error of a coefficient at one box.
    pub fn std_error(&self, box_id: usize, name: &str) -> Option<f64> {
        let idx = self.coef_index(name)?;
        self.boxes[box_id].as_ref().map(|f| f.covariance[(idx, idx)].sqrt())
    }
}

/// The per-box reading of a model: a shared scalar slope cannot be
/// estimated box-by-box, so it becomes spatially varying; the elevation
/// effect is unidentifiable within a box and is absorbed by the intercept.
fn independent_spec(spec: &ModelSpec) -> ModelSpec {
    let mut s = spec.clone();
    if s.mu_trend == Trend::Homogeneous {
        s.mu_trend = Trend::Varying;
    }
    s.elevation_effect = false;
    s.label = format!("{}-indep", spec.label);
    s
}

/// Maximize the per-box likelihood separately for every grid box.
pub fn fit_independent(
    data: &GriddedDataset,
    spec: &ModelSpec,
    cov: &CovariateSeries,
) -> Result<IndependentFit> {
    let ispec = independent_spec(spec);
    let cov = cov.aligned_to(data.years())?;

    let mut boxes = Vec::with_capacity(data.n_boxes());
    let mut coef_names: Vec<&'static str> = Vec::new();
    for b in 0..data.n_boxes() {
        let sub = single_box_dataset(data, b)?;
        let penalty = build_penalty(&build_neighborhood(sub.grid()));
        let ctx = FitContext::new(&sub, &ispec, &cov, &penalty)?;
        if coef_names.is_empty() {
            coef_names = ctx.layout.blocks.iter().map(|blk| blk.name.as_str()).collect();
        }

        let theta0 = match super::initialize_theta(&ctx, &vec![0.0; ctx.n_lambdas()]) {
            Ok(t) => t,
            Err(_) => {
                boxes.push(None);
                continue;
            }
        };
        let lambdas = vec![0.0; ctx.n_lambdas()];
        let sol = maximize_inner(&ctx, &lambdas, theta0, InnerOptions::default());
        if !sol.converged {
            boxes.push(None);
            continue;
        }
        let cov_matrix = match sol.eval.precision.clone().cholesky() {
            Some(ch) => ch.inverse(),
            None => {
                boxes.push(None);
                continue;
            }
        };
        boxes.push(Some(IndependentBoxFit {
            coefficients: sol.theta.as_slice().to_vec(),
            covariance: cov_matrix,
            loglik: sol.eval.unpen_value,
            iterations: sol.iterations,
        }));
    }

    Ok(IndependentFit { spec: ispec, coef_names, boxes })
}

fn single_box_dataset(data: &GriddedDataset, b: usize) -> Result<GriddedDataset> {
    let mut gb = data.grid().boxes()[b].clone();
    gb.id = 0;
    let grid = Grid::from_boxes(vec![gb], data.grid().spacing())?;
    let txx: Vec<Option<f64>> = (0..data.n_years()).map(|t| data.value(b, t)).collect();
    GriddedDataset::new(grid, data.years().to_vec(), txx)
}

/// Quick L-moments sanity check used to decide whether a box is fittable.
pub(crate) fn lmoments_or_none(sample: &crate::gev::Sample) -> Option<crate::gev::GevParams> {
    if sample.len() < 3 {
        return None;
    }
    fit_lmoments(sample).ok()
}

/// Per-box ratio of independent to smooth standard errors for the shape:
/// `SE_indep(xi_i) / SE_smooth(xi_i)`. Boxes without a converged
/// independent fit are omitted (`None`).
pub fn uncertainty_ratio(indep: &IndependentFit, smooth: &FitResult) -> Result<Vec<Option<f64>>> {
    let n = smooth.layout.n_boxes;
    if indep.boxes.len() != n {
        return Err(Error::Domain(format!(
            "independent fit covers {} boxes, smooth fit {}",
            indep.boxes.len(),
            n
        )));
    }
    let xi_block = smooth
        .layout
        .block(BlockName::Xi)
        .ok_or_else(|| Error::Domain("smooth fit has no shape block".into()))?;
    let inv = smooth
        .precision
        .clone()
        .cholesky()
        .ok_or_else(|| Error::FitFailure("smooth precision is not positive definite".into()))?
        .inverse();
    let mut out = Vec::with_capacity(n);
    for b in 0..n {
        let se_smooth = inv[(xi_block.offset + b, xi_block.offset + b)].sqrt();
        out.push(indep.std_error(b, "xi").map(|se_indep| se_indep / se_smooth));
    }
    Ok(out)
}
