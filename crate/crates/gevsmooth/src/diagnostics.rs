//! Model checks: probability integral transform values, the standard-Gumbel
//! residual transform with probability/quantile plot coordinates, and
//! Pearson residuals. Emits plot-ready tables, no rendering.

use crate::error::Error;
use crate::fit::FitResult;
use crate::gev::{gev_cdf, gev_mean_var, XI_EPS};
use crate::grid::{format_float, write_csv_rows, GriddedDataset};
use crate::model::{params_at_unchecked, CovariateSeries};
use crate::Result;
use serde::Serialize;
use std::path::Path;

/// Standard Gumbel CDF `exp(-exp(-z))`.
pub fn standard_gumbel_cdf(z: f64) -> f64 {
    (-(-z).exp()).exp()
}

/// Reference annotation: upper-tail standard-Gumbel values with their
/// theoretical quantiles (5 -> 0.9933, 6 -> 0.9975, 7 -> 0.9991,
/// 8 -> 0.9997).
pub fn gumbel_reference_quantiles() -> Vec<(f64, f64)> {
    [5.0, 6.0, 7.0, 8.0].iter().map(|&z| (z, standard_gumbel_cdf(z))).collect()
}

/// One observation's Gumbel-transformed residual; `None` marks a support
/// violation (a model-misfit indicator, not an error).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GumbelResidual {
    pub box_id: usize,
    pub year_index: usize,
    pub z: Option<f64>,
}

/// PIT values `F_it(y_it)` for every non-missing observation, in dataset
/// iteration order (box-major, year ascending).
pub fn pit_values(
    fit: &FitResult,
    cov: &CovariateSeries,
    data: &GriddedDataset,
) -> Result<Vec<f64>> {
    let cov = cov.aligned_to(data.years())?;
    let (elev, _) = data.grid().centered_elevations();
    let mut out = Vec::with_capacity(data.n_observations());
    for (b, t, y) in data.observations() {
        let params = params_at_unchecked(&fit.field, b, t, &cov, elev[b]);
        out.push(gev_cdf(&params, y)?);
    }
    Ok(out)
}

/// Residuals `Z_it = (1/xi) log{1 + xi (y - mu)/sigma}` (Gumbel-limit branch
/// `(y - mu)/sigma`), standard Gumbel under a correct model.
pub fn gumbel_residuals(
    fit: &FitResult,
    cov: &CovariateSeries,
    data: &GriddedDataset,
) -> Result<Vec<GumbelResidual>> {
    let cov = cov.aligned_to(data.years())?;
    let (elev, _) = data.grid().centered_elevations();
    let mut out = Vec::with_capacity(data.n_observations());
    for (b, t, y) in data.observations() {
        let p = params_at_unchecked(&fit.field, b, t, &cov, elev[b]);
        let w = (y - p.mu) / p.sigma;
        let z = if p.xi.abs() <= XI_EPS {
            Some(w)
        } else {
            let u = 1.0 + p.xi * w;
            if u > 0.0 {
                Some((p.xi * w).ln_1p() / p.xi)
            } else {
                None
            }
        };
        out.push(GumbelResidual { box_id: b, year_index: t, z });
    }
    Ok(out)
}

/// Probability- and quantile-plot coordinates from residuals:
/// pp point k is `(k/(m+1), exp(-exp(-z_(k))))`, qq point k is
/// `(z_(k), -log{-log(k/(m+1))})`, with `z_(k)` the ascending order
/// statistics.
pub fn pp_qq_points(z: &[f64]) -> Result<(Vec<(f64, f64)>, Vec<(f64, f64)>)> {
    let m = z.len();
    if m < 2 {
        return Err(Error::Domain(format!("pp/qq plots need at least 2 residuals, got {m}")));
    }
    let mut sorted = z.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut pp = Vec::with_capacity(m);
    let mut qq = Vec::with_capacity(m);
    for (k, &zk) in sorted.iter().enumerate() {
        let plotting_position = (k + 1) as f64 / (m + 1) as f64;
        pp.push((plotting_position, standard_gumbel_cdf(zk)));
        qq.push((zk, -(-plotting_position.ln()).ln()));
    }
    Ok((pp, qq))
}

/// Per-box Pearson residual summary.
#[derive(Debug, Clone, Serialize)]
pub struct PearsonBox {
    pub box_id: usize,
    pub residuals: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    /// (box, year) cells skipped because the fitted variance diverges
    /// (`xi >= 1/2`).
    pub excluded: usize,
}

/// Pearson residuals `(y - E)/sqrt(Var)` from the fitted moments, with
/// per-box mean and standard deviation. Infinite-variance cells are flagged
/// and excluded from the summaries.
pub fn pearson_residuals(
    fit: &FitResult,
    cov: &CovariateSeries,
    data: &GriddedDataset,
) -> Result<Vec<PearsonBox>> {
    let cov = cov.aligned_to(data.years())?;
    let (elev, _) = data.grid().centered_elevations();
    let mut out = Vec::with_capacity(data.n_boxes());
    for b in 0..data.n_boxes() {
        let mut residuals = Vec::new();
        let mut excluded = 0;
        for t in 0..data.n_years() {
            let Some(y) = data.value(b, t) else { continue };
            let p = params_at_unchecked(&fit.field, b, t, &cov, elev[b]);
            let (mean, var) = gev_mean_var(&p)?;
            if !var.is_finite() || !mean.is_finite() {
                excluded += 1;
                continue;
            }
            residuals.push((y - mean) / var.sqrt());
        }
        let n = residuals.len() as f64;
        let mean = if n > 0.0 { residuals.iter().sum::<f64>() / n } else { f64::NAN };
        let std = if n > 1.0 {
            (residuals.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            f64::NAN
        };
        out.push(PearsonBox { box_id: b, residuals, mean, std, excluded });
    }
    Ok(out)
}

/// Everything the diagnose step emits.
#[derive(Debug, Clone, Serialize)]
pub struct DiagnosticReport {
    pub pit: Vec<f64>,
    pub pp_points: Vec<(f64, f64)>,
    pub qq_points: Vec<(f64, f64)>,
    pub pearson: Vec<PearsonBox>,
    /// Observations whose residual transform left the support.
    pub flagged_residuals: usize,
    pub reference_quantiles: Vec<(f64, f64)>,
}

pub fn diagnose(
    fit: &FitResult,
    cov: &CovariateSeries,
    data: &GriddedDataset,
) -> Result<DiagnosticReport> {
    let pit = pit_values(fit, cov, data)?;
    let residuals = gumbel_residuals(fit, cov, data)?;
    let z: Vec<f64> = residuals.iter().filter_map(|r| r.z).collect();
    let flagged_residuals = residuals.len() - z.len();
    let (pp_points, qq_points) = pp_qq_points(&z)?;
    let pearson = pearson_residuals(fit, cov, data)?;
    Ok(DiagnosticReport {
        pit,
        pp_points,
        qq_points,
        pearson,
        flagged_residuals,
        reference_quantiles: gumbel_reference_quantiles(),
    })
}

/// Histogram of PIT values on `bins` equal-width bins over [0, 1].
pub fn pit_histogram(pit: &[f64], bins: usize) -> Vec<(f64, f64, usize)> {
    let mut counts = vec![0usize; bins];
    for &u in pit {
        let idx = ((u * bins as f64) as usize).min(bins - 1);
        counts[idx] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, c)| (i as f64 / bins as f64, (i + 1) as f64 / bins as f64, c))
        .collect()
}

pub fn write_pit_histogram_csv(pit: &[f64], bins: usize, path: &Path) -> Result<()> {
    let rows: Vec<Vec<String>> = pit_histogram(pit, bins)
        .into_iter()
        .map(|(lo, hi, c)| vec![format_float(lo), format_float(hi), c.to_string()])
        .collect();
    write_csv_rows(path, &["bin_lower", "bin_upper", "count"], &rows)
}

pub fn write_points_csv(points: &[(f64, f64)], names: (&str, &str), path: &Path) -> Result<()> {
    let rows: Vec<Vec<String>> =
        points.iter().map(|(a, b)| vec![format_float(*a), format_float(*b)]).collect();
    write_csv_rows(path, &[names.0, names.1], &rows)
}

pub fn write_pearson_csv(pearson: &[PearsonBox], path: &Path) -> Result<()> {
    let rows: Vec<Vec<String>> = pearson
        .iter()
        .map(|p| {
            vec![
                p.box_id.to_string(),
                p.residuals.len().to_string(),
                format_float(p.mean),
                format_float(p.std),
                p.excluded.to_string(),
            ]
        })
        .collect();
    write_csv_rows(path, &["box_id", "n", "mean", "std", "excluded"], &rows)
}
