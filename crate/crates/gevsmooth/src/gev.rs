//! Single-distribution GEV mathematics: density, CDF, quantile,
//! log-likelihood with analytic derivatives, moments, L-moments estimation
//! and per-sample maximum likelihood.
//!
//! The distribution function is `G(y) = exp[-{1 + xi (y-mu)/sigma}_+^(-1/xi)]`
//! with the Gumbel limit `exp[-exp{-(y-mu)/sigma}]` as `xi -> 0`. All
//! routines switch to the analytic Gumbel form when `|xi| <= XI_EPS` to avoid
//! cancellation in the `(.)^(-1/xi)` composition.

use crate::error::Error;
use crate::Result;
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;

/// Shape threshold below which all formulas use the Gumbel limit.
pub const XI_EPS: f64 = 1e-6;

/// Euler-Mascheroni constant.
pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// GEV parameter triple (location, scale, shape).
///
/// `sigma > 0` is required. Any finite `xi` is representable; `xi <= -1`
/// is flagged as irregular for likelihood inference (see [`GevParams::regular_for_mle`]).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GevParams {
    pub mu: f64,
    pub sigma: f64,
    pub xi: f64,
}

impl GevParams {
    pub fn new(mu: f64, sigma: f64, xi: f64) -> Result<Self> {
        if !mu.is_finite() || !sigma.is_finite() || !xi.is_finite() {
            return Err(Error::Domain(format!(
                "GEV parameters must be finite, got ({mu}, {sigma}, {xi})"
            )));
        }
        if sigma <= 0.0 {
            return Err(Error::Domain(format!("GEV scale must be positive, got {sigma}")));
        }
        Ok(GevParams { mu, sigma, xi })
    }

    fn validate(&self) -> Result<()> {
        if !self.mu.is_finite() || !self.sigma.is_finite() || !self.xi.is_finite() || self.sigma <= 0.0
        {
            return Err(Error::Domain(format!(
                "invalid GEV parameters ({}, {}, {})",
                self.mu, self.sigma, self.xi
            )));
        }
        Ok(())
    }

    /// Maximum likelihood theory is regular only for `xi > -1/2`; estimates
    /// with `xi <= -1` have an unbounded likelihood and are rejected by the
    /// optimizer.
    pub fn regular_for_mle(&self) -> bool {
        self.xi > -1.0
    }
}

/// One grid box's annual maxima paired with strictly increasing year indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    values: Vec<f64>,
    years: Vec<u32>,
}

impl Sample {
    pub fn new(values: Vec<f64>, years: Vec<u32>) -> Result<Self> {
        if values.is_empty() || values.len() != years.len() {
            return Err(Error::Domain(format!(
                "sample needs matching non-empty values/years, got {}/{}",
                values.len(),
                years.len()
            )));
        }
        if !years.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Domain("sample years must be strictly increasing".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("sample values must be finite".into()));
        }
        Ok(Sample { values, years })
    }

    /// Sample with years `1..=n`.
    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        let years = (1..=values.len() as u32).collect();
        Sample::new(values, years)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn years(&self) -> &[u32] {
        &self.years
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Log-density value and its first two derivative blocks with respect to
/// `(mu, tau, xi)` where `tau = log sigma`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct LogDensityDerivs {
    pub value: f64,
    /// d/d(mu, tau, xi)
    pub grad: [f64; 3],
    /// Symmetric Hessian, same ordering.
    pub hess: [[f64; 3]; 3],
}

/// Analytic log-density derivatives at one observation, or `None` when the
/// observation violates the support constraint `1 + xi (y-mu)/sigma > 0`.
///
/// Writing `z = (y-mu)/sigma`, `A = log(1 + xi z)/xi` and `E = exp(-A)`, the
/// log-density is `-tau - (1+xi) A - E`, which passes continuously to the
/// Gumbel form `-tau - z - exp(-z)` as `xi -> 0`.
pub(crate) fn log_density_derivs(y: f64, mu: f64, tau: f64, xi: f64) -> Option<LogDensityDerivs> {
    let sigma = tau.exp();
    let z = (y - mu) / sigma;

    let (value, h_z, h_zz, g_xi, h_zxi, h_xixi) = if xi.abs() <= XI_EPS {
        let e = (-z).exp();
        let d = 1.0 - e;
        let value = -tau - z - e;
        let h_z = -d;
        let h_zz = -e;
        let g_xi = -z + 0.5 * z * z * d;
        let h_zxi = -1.0 + 0.5 * e * z * z + d * z;
        let h_xixi = z * z - (2.0 / 3.0) * d * z * z * z - 0.25 * e * z.powi(4);
        (value, h_z, h_zz, g_xi, h_zxi, h_xixi)
    } else {
        let u = 1.0 + xi * z;
        if u <= 0.0 {
            return None;
        }
        let a = (xi * z).ln_1p() / xi;
        let e = (-a).exp();
        let d = (1.0 + xi) - e;
        let a_xi = (z / u - a) / xi;
        let a_xixi = (-z * z / (u * u) - 2.0 * a_xi) / xi;
        let value = -tau - (1.0 + xi) * a - e;
        let h_z = -d / u;
        let h_zz = (xi * d - e) / (u * u);
        let h_zxi = -((1.0 + e * a_xi) * u - d * z) / (u * u);
        let g_xi = -a - a_xi * d;
        let h_xixi = -2.0 * a_xi - a_xixi * d - e * a_xi * a_xi;
        (value, h_z, h_zz, g_xi, h_zxi, h_xixi)
    };

    // Chain rule from z to (mu, tau): z_mu = -1/sigma, z_tau = -z.
    let g_mu = -h_z / sigma;
    let g_tau = -1.0 - z * h_z;
    let h_mumu = h_zz / (sigma * sigma);
    let h_mutau = (z * h_zz + h_z) / sigma;
    let h_tautau = z * z * h_zz + z * h_z;
    let h_muxi = -h_zxi / sigma;
    let h_tauxi = -z * h_zxi;

    Some(LogDensityDerivs {
        value,
        grad: [g_mu, g_tau, g_xi],
        hess: [
            [h_mumu, h_mutau, h_muxi],
            [h_mutau, h_tautau, h_tauxi],
            [h_muxi, h_tauxi, h_xixi],
        ],
    })
}

/// Distribution function `G(y)`; 0 or 1 outside the support when `xi != 0`.
pub fn gev_cdf(p: &GevParams, y: f64) -> Result<f64> {
    p.validate()?;
    if !y.is_finite() {
        return Err(Error::Domain(format!("gev_cdf needs finite y, got {y}")));
    }
    let z = (y - p.mu) / p.sigma;
    if p.xi.abs() <= XI_EPS {
        return Ok((-(-z).exp()).exp());
    }
    let u = 1.0 + p.xi * z;
    if u <= 0.0 {
        return Ok(if p.xi > 0.0 { 0.0 } else { 1.0 });
    }
    let a = (p.xi * z).ln_1p() / p.xi;
    Ok((-(-a).exp()).exp())
}

/// Density `g(y) = dG/dy`; zero outside the support.
pub fn gev_pdf(p: &GevParams, y: f64) -> Result<f64> {
    p.validate()?;
    if !y.is_finite() {
        return Err(Error::Domain(format!("gev_pdf needs finite y, got {y}")));
    }
    let tau = p.sigma.ln();
    match log_density_derivs(y, p.mu, tau, p.xi) {
        Some(d) => Ok(d.value.exp()),
        None => Ok(0.0),
    }
}

/// Quantile function: the `prob`-quantile of `G`.
pub fn gev_quantile(p: &GevParams, prob: f64) -> Result<f64> {
    p.validate()?;
    if !(prob > 0.0 && prob < 1.0) {
        return Err(Error::Domain(format!("quantile probability must lie in (0,1), got {prob}")));
    }
    let w = -prob.ln(); // -log(prob) > 0
    if p.xi.abs() <= XI_EPS {
        Ok(p.mu - p.sigma * w.ln())
    } else {
        // mu + sigma [w^(-xi) - 1]/xi, computed via expm1 for stability.
        Ok(p.mu + p.sigma * (-p.xi * w.ln()).exp_m1() / p.xi)
    }
}

/// Log-likelihood of an i.i.d. sample: the sum of log-densities, carrying
/// the `-n log sigma` term. Returns `-inf` when any observation falls
/// outside the support; never errors.
pub fn gev_loglik(p: &GevParams, s: &Sample) -> f64 {
    if p.sigma <= 0.0 || !p.sigma.is_finite() || !p.mu.is_finite() || !p.xi.is_finite() {
        return f64::NEG_INFINITY;
    }
    let tau = p.sigma.ln();
    let mut total = 0.0;
    for &y in s.values() {
        match log_density_derivs(y, p.mu, tau, p.xi) {
            Some(d) => total += d.value,
            None => return f64::NEG_INFINITY,
        }
    }
    total
}

/// Mean and variance; `+inf` sentinels for the divergent cases
/// (`xi >= 1` for the mean, `xi >= 1/2` for the variance).
pub fn gev_mean_var(p: &GevParams) -> Result<(f64, f64)> {
    p.validate()?;
    let xi = p.xi;
    if xi >= 1.0 {
        return Ok((f64::INFINITY, f64::INFINITY));
    }
    let mean = if xi.abs() <= XI_EPS {
        p.mu + p.sigma * EULER_GAMMA
    } else {
        p.mu + p.sigma * (gamma(1.0 - xi) - 1.0) / xi
    };
    let var = if xi >= 0.5 {
        f64::INFINITY
    } else if xi.abs() <= XI_EPS {
        std::f64::consts::PI.powi(2) * p.sigma * p.sigma / 6.0
    } else {
        let g1 = gamma(1.0 - xi);
        let g2 = gamma(1.0 - 2.0 * xi);
        p.sigma * p.sigma * (g2 - g1 * g1) / (xi * xi)
    };
    Ok((mean, var))
}

/// GEV point estimates from sample L-moments (probability-weighted moments),
/// using the rational approximation `k = 7.8590 c + 2.9554 c^2` with
/// `c = 2/(3 + tau3) - log 2 / log 3` for the shape.
pub fn fit_lmoments(s: &Sample) -> Result<GevParams> {
    let n = s.len();
    if n < 3 {
        return Err(Error::Estimation(format!("L-moments need at least 3 observations, got {n}")));
    }
    let mut x: Vec<f64> = s.values().to_vec();
    x.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if x[n - 1] - x[0] <= 0.0 {
        return Err(Error::Estimation("degenerate sample: zero spread".into()));
    }

    let nf = n as f64;
    let mut b0 = 0.0;
    let mut b1 = 0.0;
    let mut b2 = 0.0;
    for (j, &v) in x.iter().enumerate() {
        let jf = (j + 1) as f64; // 1-based rank
        b0 += v;
        b1 += (jf - 1.0) / (nf - 1.0) * v;
        b2 += (jf - 1.0) * (jf - 2.0) / ((nf - 1.0) * (nf - 2.0)) * v;
    }
    b0 /= nf;
    b1 /= nf;
    b2 /= nf;

    let l1 = b0;
    let l2 = 2.0 * b1 - b0;
    let l3 = 6.0 * b2 - 6.0 * b1 + b0;
    if l2 <= 0.0 {
        return Err(Error::Estimation("degenerate sample: nonpositive L-scale".into()));
    }
    let tau3 = l3 / l2;

    let c = 2.0 / (3.0 + tau3) - std::f64::consts::LN_2 / 3f64.ln();
    let k = 7.8590 * c + 2.9554 * c * c; // Hosking's k = -xi

    if k.abs() < 1e-8 {
        let sigma = l2 / std::f64::consts::LN_2;
        return GevParams::new(l1 - EULER_GAMMA * sigma, sigma, 0.0);
    }
    if k <= -1.0 + 1e-9 {
        return Err(Error::Estimation(format!(
            "L-moment shape estimate out of range (k = {k:.4})"
        )));
    }
    let g = gamma(1.0 + k);
    let sigma = l2 * k / ((1.0 - 2f64.powf(-k)) * g);
    let mu = l1 - sigma * (1.0 - g) / k;
    let out = GevParams::new(mu, sigma, -k)?;
    if !out.mu.is_finite() || !out.sigma.is_finite() || out.sigma <= 0.0 {
        return Err(Error::Estimation("L-moment inversion produced invalid parameters".into()));
    }
    Ok(out)
}

/// Options for [`fit_mle`].
#[derive(Debug, Clone, Copy)]
pub struct MleOptions {
    pub max_iterations: usize,
    pub grad_tol: f64,
}

impl Default for MleOptions {
    fn default() -> Self {
        MleOptions { max_iterations: 200, grad_tol: 1e-8 }
    }
}

/// Sample log-likelihood with gradient and Hessian in `(mu, tau, xi)`.
fn sample_derivs(s: &Sample, mu: f64, tau: f64, xi: f64) -> Option<(f64, Vector3<f64>, Matrix3<f64>)> {
    let mut value = 0.0;
    let mut grad = Vector3::zeros();
    let mut hess = Matrix3::zeros();
    for &y in s.values() {
        let d = log_density_derivs(y, mu, tau, xi)?;
        value += d.value;
        for i in 0..3 {
            grad[i] += d.grad[i];
            for j in 0..3 {
                hess[(i, j)] += d.hess[i][j];
            }
        }
    }
    Some((value, grad, hess))
}

fn sample_loglik(s: &Sample, mu: f64, tau: f64, xi: f64) -> f64 {
    let mut total = 0.0;
    for &y in s.values() {
        match log_density_derivs(y, mu, tau, xi) {
            Some(d) => total += d.value,
            None => return f64::NEG_INFINITY,
        }
    }
    total
}

const XI_FLOOR: f64 = -1.0 + 1e-3;

/// Maximum likelihood fit by safeguarded Newton ascent in `(mu, log sigma, xi)`
/// starting from `init` (callers usually pass the L-moments estimate).
///
/// Returns the estimate and the inverse observed-information covariance in
/// `(mu, sigma, xi)` coordinates. Steps that leave the support are rejected
/// by backtracking; `xi` is floored at `-1 + 1e-3`.
pub fn fit_mle(s: &Sample, init: &GevParams) -> Result<(GevParams, Matrix3<f64>)> {
    fit_mle_with(s, init, MleOptions::default())
}

pub fn fit_mle_with(
    s: &Sample,
    init: &GevParams,
    opts: MleOptions,
) -> Result<(GevParams, Matrix3<f64>)> {
    init.validate()?;
    let mut mu = init.mu;
    let mut tau = init.sigma.ln();
    let mut xi = init.xi.clamp(XI_FLOOR, 5.0);

    // If the initial point is infeasible, widen the scale until every
    // observation is inside the support.
    let mut guard = 0;
    while sample_loglik(s, mu, tau, xi).is_infinite() && guard < 60 {
        tau += 0.5;
        guard += 1;
    }
    if sample_loglik(s, mu, tau, xi).is_infinite() {
        return Err(Error::Estimation("could not find a feasible starting point".into()));
    }

    let mut value = f64::NEG_INFINITY;
    let mut grad_norm = f64::INFINITY;
    for iter in 0..opts.max_iterations {
        let (f, g, h) = match sample_derivs(s, mu, tau, xi) {
            Some(t) => t,
            None => {
                return Err(Error::Estimation("iterate left the support unexpectedly".into()))
            }
        };
        value = f;
        grad_norm = g.amax();
        if grad_norm <= opts.grad_tol * (1.0 + f.abs()) {
            let params = GevParams::new(mu, tau.exp(), xi)?;
            let cov = observed_information_covariance(&h, &g, tau)?;
            return Ok((params, cov));
        }

        // Newton direction on the negated Hessian, with an escalating ridge
        // when the curvature is not negative definite.
        let mut ridge = 0.0;
        let dir = loop {
            let mut a = -h;
            for i in 0..3 {
                a[(i, i)] += ridge;
            }
            match a.cholesky() {
                Some(ch) => break ch.solve(&g),
                None => {
                    ridge = if ridge == 0.0 { 1e-6 * (1.0 + h.amax()) } else { ridge * 10.0 };
                    if ridge > 1e12 {
                        break g.normalize();
                    }
                }
            }
        };

        let mut step = 1.0;
        let mut advanced = false;
        for _ in 0..60 {
            let cand_mu = mu + step * dir[0];
            let cand_tau = tau + step * dir[1];
            let cand_xi = (xi + step * dir[2]).max(XI_FLOOR);
            let cand = sample_loglik(s, cand_mu, cand_tau, cand_xi);
            if cand > f {
                mu = cand_mu;
                tau = cand_tau;
                xi = cand_xi;
                advanced = true;
                break;
            }
            step *= 0.5;
        }
        if !advanced {
            // Line search stalled: accept convergence only near stationarity.
            if grad_norm <= 1e-5 * (1.0 + f.abs()) {
                let params = GevParams::new(mu, tau.exp(), xi)?;
                let cov = observed_information_covariance(&h, &g, tau)?;
                return Ok((params, cov));
            }
            return Err(Error::MleNonConvergence {
                iterations: iter,
                grad_norm,
                last: GevParams { mu, sigma: tau.exp(), xi },
            });
        }
    }
    let _ = value;
    Err(Error::MleNonConvergence {
        iterations: opts.max_iterations,
        grad_norm,
        last: GevParams { mu, sigma: tau.exp(), xi },
    })
}

/// Convert the `(mu, tau, xi)` Hessian to `(mu, sigma, xi)` coordinates and
/// invert the observed information.
fn observed_information_covariance(
    h_tau: &Matrix3<f64>,
    g_tau: &Vector3<f64>,
    tau: f64,
) -> Result<Matrix3<f64>> {
    let sigma = tau.exp();
    let mut h = *h_tau;
    // d tau/d sigma = 1/sigma, d2 tau/d sigma2 = -1/sigma^2.
    h[(0, 1)] /= sigma;
    h[(1, 0)] = h[(0, 1)];
    h[(1, 2)] /= sigma;
    h[(2, 1)] = h[(1, 2)];
    h[(1, 1)] = (h_tau[(1, 1)] - g_tau[1]) / (sigma * sigma);
    (-h)
        .try_inverse()
        .ok_or_else(|| Error::Estimation("observed information is singular".into()))
}
