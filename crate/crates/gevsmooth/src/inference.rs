//! Non-stationary return levels, return-level differences, risk ratios and
//! parameter changes, with Monte Carlo credible intervals from the Gaussian
//! posterior approximation (box-level, and regional averages with a
//! Bonferroni adjustment).

use crate::error::Error;
use crate::fit::{posterior_sample, FitResult};
use crate::gev::{gev_cdf, gev_pdf, gev_quantile, GevParams, XI_EPS};
use crate::grid::{format_float, write_csv_rows, Grid};
use crate::model::{params_at_unchecked, CovariateSeries, ModelSpec, ParameterField};
use crate::Result;
use rayon::prelude::*;
use serde::Serialize;
use std::path::Path;

/// What to compute per box from a coefficient field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Functional {
    /// `y_(t_to)(p) - y_(t_from)(p)`.
    RlDiff,
    /// `P{Y_(t_to) > y_(t_from)(p)} / p`.
    RiskRatio,
    /// Location change `mu_(t_to) - mu_(t_from)`.
    LocChange,
    /// Natural-scale change `sigma_(t_to) - sigma_(t_from)`.
    ScaleChange,
}

impl Functional {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "rl_diff" => Ok(Functional::RlDiff),
            "risk_ratio" => Ok(Functional::RiskRatio),
            "loc_change" => Ok(Functional::LocChange),
            "scale_change" => Ok(Functional::ScaleChange),
            other => Err(Error::Config(format!(
                "unknown functional {other:?} (expected rl_diff, risk_ratio, loc_change, scale_change)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Functional::RlDiff => "rl_diff",
            Functional::RiskRatio => "risk_ratio",
            Functional::LocChange => "loc_change",
            Functional::ScaleChange => "scale_change",
        }
    }
}

fn check_p(p: f64) -> Result<()> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!("exceedance probability must lie in (0,1), got {p}")));
    }
    Ok(())
}

/// Return level with annual exceedance probability `p` for one box in year
/// index `t`: the `1-p` quantile of the fitted GEV in that year's state.
pub fn return_level(
    field: &ParameterField,
    spec: &ModelSpec,
    cov: &CovariateSeries,
    elev: &[f64],
    box_id: usize,
    t: usize,
    p: f64,
) -> Result<f64> {
    check_p(p)?;
    field.validate_against(spec, field.n_boxes())?;
    let params = params_at_unchecked(field, box_id, t, cov, elev[box_id]);
    gev_quantile(&params, 1.0 - p)
}

/// The standardized return-level factor `k` with `y(p) = mu + sigma k`.
fn standard_rl_factor(xi: f64, p: f64) -> f64 {
    let w = -(1.0 - p).ln();
    if xi.abs() <= XI_EPS {
        -w.ln()
    } else {
        (-xi * w.ln()).exp_m1() / xi
    }
}

/// Per-box return-level difference between two year states, written as
/// `(mu_to - mu_from) + (sigma_to k_to - sigma_from k_from)` so that models
/// with time-constant scale and shape reproduce the location change exactly.
pub fn return_level_difference(
    field: &ParameterField,
    spec: &ModelSpec,
    cov: &CovariateSeries,
    elev: &[f64],
    p: f64,
    t_from: usize,
    t_to: usize,
) -> Result<Vec<f64>> {
    check_p(p)?;
    field.validate_against(spec, field.n_boxes())?;
    let mut out = Vec::with_capacity(field.n_boxes());
    for b in 0..field.n_boxes() {
        let a = params_at_unchecked(field, b, t_from, cov, elev[b]);
        let z = params_at_unchecked(field, b, t_to, cov, elev[b]);
        let tail = z.sigma * standard_rl_factor(z.xi, p) - a.sigma * standard_rl_factor(a.xi, p);
        out.push(z.mu - a.mu + tail);
    }
    Ok(out)
}

/// Per-box risk ratio: how many times more likely the year-`t_from` return
/// level is exceeded under the year-`t_to` parameters.
pub fn risk_ratio(
    field: &ParameterField,
    spec: &ModelSpec,
    cov: &CovariateSeries,
    elev: &[f64],
    p: f64,
    t_from: usize,
    t_to: usize,
) -> Result<Vec<f64>> {
    check_p(p)?;
    field.validate_against(spec, field.n_boxes())?;
    let mut out = Vec::with_capacity(field.n_boxes());
    for b in 0..field.n_boxes() {
        let from = params_at_unchecked(field, b, t_from, cov, elev[b]);
        let to = params_at_unchecked(field, b, t_to, cov, elev[b]);
        if from == to {
            // Identical states: the ratio is exactly one (avoids
            // quantile/cdf round-trip noise).
            out.push(1.0);
            continue;
        }
        let threshold = gev_quantile(&from, 1.0 - p)?;
        out.push((1.0 - gev_cdf(&to, threshold)?) / p);
    }
    Ok(out)
}

/// Per-box (location change, natural-scale change) between two year states.
pub fn parameter_change(
    field: &ParameterField,
    spec: &ModelSpec,
    cov: &CovariateSeries,
    elev: &[f64],
    t_from: usize,
    t_to: usize,
) -> Result<Vec<(f64, f64)>> {
    field.validate_against(spec, field.n_boxes())?;
    let mut out = Vec::with_capacity(field.n_boxes());
    for b in 0..field.n_boxes() {
        let a = params_at_unchecked(field, b, t_from, cov, elev[b]);
        let z = params_at_unchecked(field, b, t_to, cov, elev[b]);
        out.push((z.mu - a.mu, z.sigma - a.sigma));
    }
    Ok(out)
}

fn functional_values(
    functional: Functional,
    field: &ParameterField,
    spec: &ModelSpec,
    cov: &CovariateSeries,
    elev: &[f64],
    p: f64,
    t_from: usize,
    t_to: usize,
) -> Result<Vec<f64>> {
    match functional {
        Functional::RlDiff => return_level_difference(field, spec, cov, elev, p, t_from, t_to),
        Functional::RiskRatio => risk_ratio(field, spec, cov, elev, p, t_from, t_to),
        Functional::LocChange => Ok(parameter_change(field, spec, cov, elev, t_from, t_to)?
            .into_iter()
            .map(|(l, _)| l)
            .collect()),
        Functional::ScaleChange => Ok(parameter_change(field, spec, cov, elev, t_from, t_to)?
            .into_iter()
            .map(|(_, s)| s)
            .collect()),
    }
}

/// Per-box plug-in estimate with empirical posterior quantile bounds.
/// `lower <= upper` always holds; the plug-in estimate is not forced inside.
#[derive(Debug, Clone, Serialize)]
pub struct IntervalField {
    pub functional: Functional,
    pub level: f64,
    pub draws: usize,
    pub estimate: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// Linear-interpolation empirical quantile of a sorted slice.
fn empirical_quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let h = (n as f64 - 1.0) * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let frac = h - lo as f64;
        sorted[lo] * (1.0 - frac) + sorted[hi] * frac
    }
}

fn draw_matrix(
    fit: &FitResult,
    cov: &CovariateSeries,
    elev: &[f64],
    functional: Functional,
    p: f64,
    t_from: usize,
    t_to: usize,
    draws: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let fields = posterior_sample(fit, draws, seed)?;
    // Per-draw RNG substreams make the draws order-independent; a draw whose
    // shape leaves the regular range still evaluates (the functionals are
    // defined for any sigma > 0).
    fields
        .par_iter()
        .map(|f| functional_values(functional, f, &fit.spec, cov, elev, p, t_from, t_to))
        .collect()
}

/// Per-box credible intervals from `draws` posterior simulations: for each
/// draw the functional is recomputed per box (thresholds included), and the
/// interval is the empirical `(a/2, 1-a/2)` quantile pair.
#[allow(clippy::too_many_arguments)]
pub fn mc_intervals(
    fit: &FitResult,
    cov: &CovariateSeries,
    elev: &[f64],
    functional: Functional,
    p: f64,
    t_from: usize,
    t_to: usize,
    draws: usize,
    level: f64,
    seed: u64,
) -> Result<IntervalField> {
    if draws < 100 {
        return Err(Error::Domain(format!(
            "credible intervals need at least 100 posterior draws, got {draws}"
        )));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Domain(format!("interval level must lie in (0,1), got {level}")));
    }
    let cov = cov.aligned_to(&fit.years)?;
    let estimate =
        functional_values(functional, &fit.field, &fit.spec, &cov, elev, p, t_from, t_to)?;
    let per_draw = draw_matrix(fit, &cov, elev, functional, p, t_from, t_to, draws, seed)?;

    let n = estimate.len();
    let alpha = 1.0 - level;
    let mut lower = Vec::with_capacity(n);
    let mut upper = Vec::with_capacity(n);
    for b in 0..n {
        let mut column: Vec<f64> = per_draw.iter().map(|row| row[b]).collect();
        column.sort_by(|a, b| a.partial_cmp(b).unwrap());
        lower.push(empirical_quantile(&column, alpha / 2.0));
        upper.push(empirical_quantile(&column, 1.0 - alpha / 2.0));
    }
    Ok(IntervalField { functional, level, draws, estimate, lower, upper })
}

/// One region's interval for the spatial mean of a functional.
#[derive(Debug, Clone, Serialize)]
pub struct RegionalInterval {
    pub region: String,
    pub n_boxes: usize,
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Bonferroni quantile levels for `m` simultaneous intervals at familywise
/// level `1 - alpha`: `(alpha/(2m), 1 - alpha/(2m))`.
pub fn bonferroni_levels(alpha: f64, m: usize) -> (f64, f64) {
    let a = alpha / (2.0 * m as f64);
    (a, 1.0 - a)
}

/// Credible intervals for region-mean functionals, Bonferroni-adjusted for
/// `m` simultaneous regions: per draw the functional's spatial mean is taken
/// over each region, then the empirical `alpha/(2m)` quantiles bound it.
#[allow(clippy::too_many_arguments)]
pub fn regional_mc_intervals(
    fit: &FitResult,
    cov: &CovariateSeries,
    grid: &Grid,
    functional: Functional,
    p: f64,
    t_from: usize,
    t_to: usize,
    m_bonferroni: usize,
    draws: usize,
    level: f64,
    seed: u64,
) -> Result<Vec<RegionalInterval>> {
    if draws < 100 {
        return Err(Error::Domain(format!(
            "credible intervals need at least 100 posterior draws, got {draws}"
        )));
    }
    if m_bonferroni == 0 {
        return Err(Error::Domain("Bonferroni region count must be positive".into()));
    }
    let regions = grid.regions();
    for r in &regions {
        if grid.region_boxes(r).is_empty() {
            return Err(Error::Domain(format!("region {r:?} has no boxes")));
        }
    }
    let (elev, _) = grid.centered_elevations();
    let cov = cov.aligned_to(&fit.years)?;
    let estimate =
        functional_values(functional, &fit.field, &fit.spec, &cov, &elev, p, t_from, t_to)?;
    let per_draw = draw_matrix(fit, &cov, &elev, functional, p, t_from, t_to, draws, seed)?;

    let alpha = 1.0 - level;
    let (q_lo, q_hi) = bonferroni_levels(alpha, m_bonferroni);
    let mut out = Vec::with_capacity(regions.len());
    for r in regions {
        let boxes = grid.region_boxes(&r);
        let mean_of = |values: &[f64]| -> f64 {
            boxes.iter().map(|&b| values[b]).sum::<f64>() / boxes.len() as f64
        };
        let mut means: Vec<f64> = per_draw.iter().map(|row| mean_of(row)).collect();
        means.sort_by(|a, b| a.partial_cmp(b).unwrap());
        out.push(RegionalInterval {
            region: r,
            n_boxes: boxes.len(),
            estimate: mean_of(&estimate),
            lower: empirical_quantile(&means, q_lo),
            upper: empirical_quantile(&means, q_hi),
        });
    }
    Ok(out)
}

/// Density of the GEV built from region-averaged parameters (mu, natural
/// sigma, xi averaged over the region's boxes at year `t`), evaluated on
/// `y_grid`.
pub fn averaged_density(
    field: &ParameterField,
    spec: &ModelSpec,
    cov: &CovariateSeries,
    elev: &[f64],
    region_boxes: &[usize],
    t: usize,
    y_grid: &[f64],
) -> Result<Vec<(f64, f64)>> {
    if region_boxes.is_empty() {
        return Err(Error::Domain("averaged density needs a non-empty region".into()));
    }
    field.validate_against(spec, field.n_boxes())?;
    let mut mu = 0.0;
    let mut sigma = 0.0;
    let mut xi = 0.0;
    for &b in region_boxes {
        let p = params_at_unchecked(field, b, t, cov, elev[b]);
        mu += p.mu;
        sigma += p.sigma;
        xi += p.xi;
    }
    let k = region_boxes.len() as f64;
    let params = GevParams::new(mu / k, sigma / k, xi / k)?;
    y_grid.iter().map(|&y| Ok((y, gev_pdf(&params, y)?))).collect()
}

/// CSV emitter: `box_id, estimate, lower, upper`.
pub fn write_interval_csv(intervals: &IntervalField, path: &Path) -> Result<()> {
    let rows: Vec<Vec<String>> = (0..intervals.estimate.len())
        .map(|b| {
            vec![
                b.to_string(),
                format_float(intervals.estimate[b]),
                format_float(intervals.lower[b]),
                format_float(intervals.upper[b]),
            ]
        })
        .collect();
    write_csv_rows(path, &["box_id", "estimate", "lower", "upper"], &rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_covariate, Mu1};

    fn no_trend_setup() -> (ParameterField, ModelSpec, CovariateSeries, Vec<f64>) {
        let mut spec = ModelSpec::mod1();
        spec.elevation_effect = false;
        let mut field = ParameterField::zeros(4, &spec);
        field.mu0 = vec![10.0, 11.0, 12.0, 13.0];
        field.sigma0 = vec![0.0, 0.1, 0.2, 0.3];
        field.xi = vec![-0.1, 0.0, 0.1, -0.2];
        let cov = build_covariate(vec![1950, 2018], vec![310.0, 406.0]).unwrap();
        (field, spec, cov, vec![0.0; 4])
    }

    #[test]
    fn gumbel_return_level_golden() {
        let mut spec = ModelSpec::mod1();
        spec.elevation_effect = false;
        let mut field = ParameterField::zeros(1, &spec);
        field.sigma0 = vec![0.0];
        let cov = build_covariate(vec![1950], vec![310.0]).unwrap();
        // p = 1 - exp(-1) makes the Gumbel return level exactly 0.
        let p = 1.0 - (-1.0f64).exp();
        let rl = return_level(&field, &spec, &cov, &[0.0], 0, 0, p).unwrap();
        assert!(rl.abs() < 1e-12);
        let rl001 = return_level(&field, &spec, &cov, &[0.0], 0, 0, 0.01).unwrap();
        assert!((rl001 - 4.60015).abs() < 1e-5);
    }

    #[test]
    fn return_level_matches_quantile_exactly() {
        let (field, spec, cov, elev) = no_trend_setup();
        for b in 0..4 {
            let params = params_at_unchecked(&field, b, 1, &cov, 0.0);
            let direct = gev_quantile(&params, 1.0 - 0.01).unwrap();
            let rl = return_level(&field, &spec, &cov, &elev, b, 1, 0.01).unwrap();
            assert_eq!(rl, direct);
        }
    }

    #[test]
    fn no_trend_gives_zero_diff_and_unit_ratio() {
        let (field, spec, cov, elev) = no_trend_setup();
        let diff = return_level_difference(&field, &spec, &cov, &elev, 0.01, 0, 1).unwrap();
        assert!(diff.iter().all(|&d| d == 0.0));
        let rr = risk_ratio(&field, &spec, &cov, &elev, 0.01, 0, 1).unwrap();
        assert!(rr.iter().all(|&r| (r - 1.0).abs() < 1e-12));
    }

    #[test]
    fn gumbel_shift_risk_ratio_golden() {
        // mu shift +2, sigma = 1, p = 0.01: ratio = [1 - exp(-exp(-2.60015))]/0.01.
        let mut spec = ModelSpec::mod2();
        spec.elevation_effect = false;
        let mut field = ParameterField::zeros(1, &spec);
        field.sigma0 = vec![0.0];
        // Covariate 0 -> 1 with slope 2 shifts mu by exactly 2.
        let cov = build_covariate(
            vec![1950, 2018],
            vec![crate::model::PREINDUSTRIAL_CO2_PPM, crate::model::PREINDUSTRIAL_CO2_PPM * 1f64.exp()],
        )
        .unwrap();
        field.mu1 = Mu1::PerBox(vec![2.0]);
        let rr = risk_ratio(&field, &spec, &cov, &[0.0], 0.01, 0, 1).unwrap();
        assert!((rr[0] - 7.1566).abs() < 0.01, "risk ratio {}", rr[0]);
    }

    #[test]
    fn mod2_rl_diff_equals_location_change_exactly() {
        let mut spec = ModelSpec::mod2();
        spec.elevation_effect = false;
        let mut field = ParameterField::zeros(3, &spec);
        field.mu0 = vec![30.0, 31.0, 29.5];
        field.mu1 = Mu1::PerBox(vec![3.7, -0.4, 1.1]);
        field.sigma0 = vec![0.3, 0.2, 0.4];
        field.xi = vec![-0.21, 0.07, 0.0];
        let cov = build_covariate(vec![1950, 2018], vec![311.3, 407.9]).unwrap();
        let elev = vec![0.0; 3];
        for p in [0.01, 0.1, 0.37] {
            let diff = return_level_difference(&field, &spec, &cov, &elev, p, 0, 1).unwrap();
            let loc: Vec<f64> = parameter_change(&field, &spec, &cov, &elev, 0, 1)
                .unwrap()
                .into_iter()
                .map(|(l, _)| l)
                .collect();
            assert_eq!(diff, loc, "p = {p}");
        }
    }

    #[test]
    fn bonferroni_quantile_levels_match_table_caption() {
        let (lo, hi) = bonferroni_levels(0.05, 8);
        assert!((lo - 0.003125).abs() < 1e-12);
        assert!((hi - 0.996875).abs() < 1e-12);
    }

    #[test]
    fn averaged_density_single_box_and_normalization() {
        let (field, spec, cov, elev) = no_trend_setup();
        let y: Vec<f64> = (0..4001).map(|i| 10.0 + (i as f64 - 2000.0) * 0.01).collect();
        let curve = averaged_density(&field, &spec, &cov, &elev, &[1], 0, &y).unwrap();
        let direct = params_at_unchecked(&field, 1, 0, &cov, 0.0);
        for (yy, d) in &curve {
            assert_eq!(*d, gev_pdf(&direct, *yy).unwrap());
        }
        // Trapezoid over the wide grid integrates to ~1.
        let mut total = 0.0;
        for w in curve.windows(2) {
            total += 0.5 * (w[0].1 + w[1].1) * (w[1].0 - w[0].0);
        }
        assert!((total - 1.0).abs() < 1e-6, "density integral {total}");
        assert!(averaged_density(&field, &spec, &cov, &elev, &[], 0, &y).is_err());
    }

    #[test]
    fn empirical_quantile_interpolates() {
        let v = vec![1.0, 2.0, 3.0, 4.0];
        assert_eq!(empirical_quantile(&v, 0.0), 1.0);
        assert_eq!(empirical_quantile(&v, 1.0), 4.0);
        assert!((empirical_quantile(&v, 0.5) - 2.5).abs() < 1e-12);
    }
}
