//! Declarative model structure: which GEV parameters carry the CO2-derived
//! covariate, whether trends vary over space or are homogeneous, and the
//! elevation fixed effect. Mirrors the five standard model variants.

use crate::error::Error;
use crate::gev::GevParams;
use crate::Result;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Pre-industrial CO2 concentration in ppm; the covariate is
/// `x_t = log(co2_t / 280)`.
pub const PREINDUSTRIAL_CO2_PPM: f64 = 280.0;

/// How a trend enters a GEV parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Trend {
    None,
    /// Per-box slope, penalized like the other spatial fields.
    Varying,
    /// One scalar slope shared by every box (location trend only).
    Homogeneous,
}

/// Model structure: trends carried by the location and log-scale parameters
/// plus the elevation fixed effect. The shape never carries a covariate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub label: String,
    pub mu_trend: Trend,
    pub logsigma_trend: Trend,
    pub elevation_effect: bool,
}

impl ModelSpec {
    /// No trends.
    pub fn mod1() -> Self {
        ModelSpec {
            label: "mod1".into(),
            mu_trend: Trend::None,
            logsigma_trend: Trend::None,
            elevation_effect: true,
        }
    }

    /// Spatially varying location trend.
    pub fn mod2() -> Self {
        ModelSpec {
            label: "mod2".into(),
            mu_trend: Trend::Varying,
            logsigma_trend: Trend::None,
            elevation_effect: true,
        }
    }

    /// Spatially varying log-scale trend.
    pub fn mod3() -> Self {
        ModelSpec {
            label: "mod3".into(),
            mu_trend: Trend::None,
            logsigma_trend: Trend::Varying,
            elevation_effect: true,
        }
    }

    /// Spatially varying trends in both location and log-scale.
    pub fn mod4() -> Self {
        ModelSpec {
            label: "mod4".into(),
            mu_trend: Trend::Varying,
            logsigma_trend: Trend::Varying,
            elevation_effect: true,
        }
    }

    /// Spatially homogeneous location trend (one scalar slope).
    pub fn mod5() -> Self {
        ModelSpec {
            label: "mod5".into(),
            mu_trend: Trend::Homogeneous,
            logsigma_trend: Trend::None,
            elevation_effect: true,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "mod1" => Ok(Self::mod1()),
            "mod2" => Ok(Self::mod2()),
            "mod3" => Ok(Self::mod3()),
            "mod4" => Ok(Self::mod4()),
            "mod5" => Ok(Self::mod5()),
            other => Err(Error::Config(format!(
                "unknown model {other:?} (expected mod1..mod5)"
            ))),
        }
    }

    /// A custom structure; the log-scale trend cannot be homogeneous.
    pub fn custom(mu_trend: Trend, logsigma_trend: Trend, elevation_effect: bool) -> Result<Self> {
        if logsigma_trend == Trend::Homogeneous {
            return Err(Error::Config("homogeneous log-scale trend is not supported".into()));
        }
        Ok(ModelSpec { label: "custom".into(), mu_trend, logsigma_trend, elevation_effect })
    }
}

/// The per-year covariate `x_t = log(co2_t/280)` with its source series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateSeries {
    years: Vec<i32>,
    co2_ppm: Vec<f64>,
    x: Vec<f64>,
}

/// Build the covariate from calendar years and CO2 concentrations (ppm).
pub fn build_covariate(years: Vec<i32>, co2_ppm: Vec<f64>) -> Result<CovariateSeries> {
    if years.len() != co2_ppm.len() || years.is_empty() {
        return Err(Error::Domain(format!(
            "covariate needs matching non-empty years/ppm, got {}/{}",
            years.len(),
            co2_ppm.len()
        )));
    }
    if !years.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::Domain("covariate years must be strictly increasing".into()));
    }
    if let Some(&bad) = co2_ppm.iter().find(|&&p| !(p > 0.0) || !p.is_finite()) {
        return Err(Error::Domain(format!("CO2 concentrations must be positive, got {bad}")));
    }
    let x = co2_ppm.iter().map(|&p| (p / PREINDUSTRIAL_CO2_PPM).ln()).collect();
    Ok(CovariateSeries { years, co2_ppm, x })
}

impl CovariateSeries {
    pub fn years(&self) -> &[i32] {
        &self.years
    }

    pub fn co2_ppm(&self) -> &[f64] {
        &self.co2_ppm
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    /// Covariate value at year-index `t` (0-based into this series).
    pub fn x_at(&self, t: usize) -> f64 {
        self.x[t]
    }

    /// Restrict and align to the given calendar years; every requested year
    /// must be present in the series.
    pub fn aligned_to(&self, years: &[i32]) -> Result<CovariateSeries> {
        let mut co2 = Vec::with_capacity(years.len());
        for &y in years {
            match self.years.binary_search(&y) {
                Ok(i) => co2.push(self.co2_ppm[i]),
                Err(_) => {
                    return Err(Error::Domain(format!(
                        "no CO2 value for modelled year {y}; supply scenario data for it"
                    )))
                }
            }
        }
        build_covariate(years.to_vec(), co2)
    }
}

#[derive(Debug, Deserialize)]
struct Co2Row {
    year: i32,
    co2_ppm: f64,
}

/// Read the CO2 CSV (`year, co2_ppm`).
pub fn read_co2_csv(path: &Path) -> Result<CovariateSeries> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut rows: Vec<Co2Row> = Vec::new();
    for row in reader.deserialize() {
        rows.push(row?);
    }
    rows.sort_by_key(|r| r.year);
    build_covariate(rows.iter().map(|r| r.year).collect(), rows.iter().map(|r| r.co2_ppm).collect())
}

pub fn write_co2_csv(cov: &CovariateSeries, path: &Path) -> Result<()> {
    let rows: Vec<Vec<String>> = cov
        .years
        .iter()
        .zip(&cov.co2_ppm)
        .map(|(&y, &p)| vec![y.to_string(), crate::grid::format_float(p)])
        .collect();
    crate::grid::write_csv_rows(path, &["year", "co2_ppm"], &rows)
}

/// The location trend block: absent, one slope per box, or one shared slope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mu1 {
    Absent,
    PerBox(Vec<f64>),
    Scalar(f64),
}

/// Per-grid-box GEV coefficient vectors plus fixed effects.
///
/// `sigma0`/`sigma1` live on the log scale; the natural scale is
/// `exp(sigma0 + sigma1 x_t)`, positive by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterField {
    pub mu0: Vec<f64>,
    pub mu1: Mu1,
    pub sigma0: Vec<f64>,
    pub sigma1: Option<Vec<f64>>,
    pub xi: Vec<f64>,
    /// Elevation fixed effect (degrees C per km); zero when disabled.
    pub beta: f64,
}

impl ParameterField {
    /// Zero-initialized field with the shape demanded by `spec`.
    pub fn zeros(n_boxes: usize, spec: &ModelSpec) -> Self {
        ParameterField {
            mu0: vec![0.0; n_boxes],
            mu1: match spec.mu_trend {
                Trend::None => Mu1::Absent,
                Trend::Varying => Mu1::PerBox(vec![0.0; n_boxes]),
                Trend::Homogeneous => Mu1::Scalar(0.0),
            },
            sigma0: vec![0.0; n_boxes],
            sigma1: match spec.logsigma_trend {
                Trend::None => None,
                _ => Some(vec![0.0; n_boxes]),
            },
            xi: vec![0.0; n_boxes],
            beta: 0.0,
        }
    }

    pub fn n_boxes(&self) -> usize {
        self.mu0.len()
    }

    /// Check the field's shape against a model spec.
    pub fn validate_against(&self, spec: &ModelSpec, n_boxes: usize) -> Result<()> {
        let shape_err = |what: &str| {
            Err(Error::Domain(format!(
                "parameter field does not match model {}: {what}",
                spec.label
            )))
        };
        if self.mu0.len() != n_boxes || self.sigma0.len() != n_boxes || self.xi.len() != n_boxes {
            return shape_err("per-box vector length mismatch");
        }
        match (spec.mu_trend, &self.mu1) {
            (Trend::None, Mu1::Absent) => {}
            (Trend::Varying, Mu1::PerBox(v)) if v.len() == n_boxes => {}
            (Trend::Homogeneous, Mu1::Scalar(_)) => {}
            _ => return shape_err("location trend block"),
        }
        match (spec.logsigma_trend, &self.sigma1) {
            (Trend::None, None) => {}
            (Trend::Varying, Some(v)) if v.len() == n_boxes => {}
            _ => return shape_err("log-scale trend block"),
        }
        Ok(())
    }
}

/// Evaluate the GEV parameters for one box in one year:
/// `mu = mu0 + [trend] + beta * centered elevation`,
/// `sigma = exp(sigma0 + sigma1 x_t)`, `xi` time-constant.
pub fn gev_params_at(
    field: &ParameterField,
    spec: &ModelSpec,
    box_id: usize,
    t: usize,
    cov: &CovariateSeries,
    elev_centered: f64,
) -> Result<GevParams> {
    field.validate_against(spec, field.n_boxes())?;
    if box_id >= field.n_boxes() {
        return Err(Error::Domain(format!("box {box_id} out of range")));
    }
    if t >= cov.x.len() {
        return Err(Error::Domain(format!("year index {t} outside covariate series")));
    }
    Ok(params_at_unchecked(field, box_id, t, cov, elev_centered))
}

/// Shape-checked callers (the fitter, inference loops) skip re-validation.
pub(crate) fn params_at_unchecked(
    field: &ParameterField,
    box_id: usize,
    t: usize,
    cov: &CovariateSeries,
    elev_centered: f64,
) -> GevParams {
    let x = cov.x[t];
    let trend = match &field.mu1 {
        Mu1::Absent => 0.0,
        Mu1::PerBox(v) => v[box_id] * x,
        Mu1::Scalar(s) => s * x,
    };
    let mu = field.mu0[box_id] + trend + field.beta * elev_centered;
    let s1 = field.sigma1.as_ref().map_or(0.0, |v| v[box_id]);
    let log_sigma = field.sigma0[box_id] + s1 * x;
    GevParams { mu, sigma: log_sigma.exp(), xi: field.xi[box_id] }
}
