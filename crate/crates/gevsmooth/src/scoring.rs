//! Proper scoring rules for GEV predictive distributions, k-fold
//! cross-validation and the sign-flip randomization test for pairwise score
//! exchangeability. All rules are negatively oriented (smaller is better).

use crate::error::Error;
use crate::fit::{fit_smooth, FitOptions, LambdaChoice};
use crate::gev::{gev_mean_var, gev_quantile, GevParams, EULER_GAMMA, XI_EPS};
use crate::grid::{format_float, write_csv_rows, GriddedDataset, PenaltyMatrix};
use crate::model::{params_at_unchecked, CovariateSeries, ModelSpec};
use crate::rng::{substream, tags};
use crate::Result;
use rand::seq::SliceRandom;
use rand_chacha::rand_core::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{gamma, gamma_ur};
use std::path::Path;

/// Squared error score `(y - mean_F)^2`; needs a finite mean (`xi < 1`).
pub fn score_se(f: &GevParams, y: f64) -> Result<f64> {
    let (mean, _) = gev_mean_var(f)?;
    if !mean.is_finite() {
        return Err(Error::Score(format!(
            "squared error undefined: predictive mean diverges (xi = {} >= 1)",
            f.xi
        )));
    }
    Ok((y - mean) * (y - mean))
}

/// Dawid-Sebastiani score `((y - mean)/sd)^2 + log var`; needs a finite
/// variance (`xi < 1/2`).
pub fn score_ds(f: &GevParams, y: f64) -> Result<f64> {
    let (mean, var) = gev_mean_var(f)?;
    if !var.is_finite() {
        return Err(Error::Score(format!(
            "Dawid-Sebastiani undefined: predictive variance diverges (xi = {} >= 1/2)",
            f.xi
        )));
    }
    Ok((y - mean) * (y - mean) / var + var.ln())
}

/// Exponential integral `E1(x) = int_x^inf e^-u / u du`, `x > 0`:
/// power series below 1, continued fraction above.
fn exp_integral_e1(x: f64) -> f64 {
    debug_assert!(x > 0.0);
    if x <= 1.0 {
        let mut sum = 0.0;
        let mut term = 1.0;
        for k in 1..=40 {
            term *= -x / k as f64;
            let add = -term / k as f64;
            sum += add;
            if add.abs() < 1e-18 {
                break;
            }
        }
        -EULER_GAMMA - x.ln() + sum
    } else {
        // Modified Lentz on E1(x) = e^-x / (x + 1 - 1/(x + 3 - 4/(x + 5 - ...))).
        let tiny = 1e-300;
        let mut c = 1.0 / tiny;
        let mut b = x + 1.0;
        let mut a;
        let mut d = 1.0 / b;
        let mut h = d;
        for k in 1..200 {
            a = -(k as f64) * (k as f64);
            b += 2.0;
            d = 1.0 / (a * d + b);
            c = b + a / c;
            let delta = c * d;
            h *= delta;
            if (delta - 1.0).abs() < 1e-16 {
                break;
            }
        }
        (-x).exp() * h
    }
}

/// Closed-form continuous ranked probability score for a GEV predictive
/// distribution, finite when `xi < 1`.
///
/// Writing `t = {1 + xi (y-mu)/sigma}^(-1/xi)` and `F = exp(-t)`:
/// `CRPS = (mu - y)(1 - 2F) + (sigma/xi) [2F - 1 + (2 - 2^xi) G(1-xi)
///         - 2 Gu(1-xi, t)]` with `Gu` the upper incomplete gamma function;
/// in the Gumbel limit the incomplete gamma becomes an exponential
/// integral: `CRPS = (mu - y)(1 - 2F) + sigma [gamma_E - log 2
///         + 2 (e^-t log t + E1(t))]`.
pub fn score_crp(f: &GevParams, y: f64) -> Result<f64> {
    if f.xi >= 1.0 {
        return Err(Error::Score(format!(
            "CRPS undefined: predictive mean diverges (xi = {} >= 1)",
            f.xi
        )));
    }
    if !y.is_finite() {
        return Err(Error::Score(format!("CRPS needs a finite observation, got {y}")));
    }
    let (mu, sigma, xi) = (f.mu, f.sigma, f.xi);
    let z = (y - mu) / sigma;

    if xi.abs() <= XI_EPS {
        // t overflows for deep-left observations; both tails have exact
        // limiting forms.
        if z > 700.0 {
            return Ok((y - mu) - sigma * (EULER_GAMMA + std::f64::consts::LN_2));
        }
        if z < -700.0 {
            return Ok((mu - y) + sigma * (EULER_GAMMA - std::f64::consts::LN_2));
        }
        let t = (-z).exp();
        let cdf = (-t).exp();
        let tail = if t < 1e-280 {
            -EULER_GAMMA + t * (1.0 - t.ln())
        } else {
            (-t).exp() * t.ln() + exp_integral_e1(t)
        };
        return Ok((mu - y) * (1.0 - 2.0 * cdf)
            + sigma * (EULER_GAMMA - std::f64::consts::LN_2 + 2.0 * tail));
    }

    let g1 = gamma(1.0 - xi);
    let u = 1.0 + xi * z;
    let (cdf, upper_inc) = if u <= 0.0 {
        if xi > 0.0 {
            (0.0, 0.0) // below the lower endpoint: t = +inf
        } else {
            (1.0, g1) // above the upper endpoint: t = 0
        }
    } else {
        let a = (xi * z).ln_1p() / xi;
        if a > 700.0 {
            // t underflows to 0: effectively at the upper tail.
            (1.0, g1)
        } else if a < -700.0 {
            (0.0, 0.0)
        } else {
            let t = (-a).exp();
            ((-t).exp(), gamma_ur(1.0 - xi, t) * g1)
        }
    };
    Ok((mu - y) * (1.0 - 2.0 * cdf)
        + (sigma / xi) * (2.0 * cdf - 1.0 + (2.0 - 2f64.powf(xi)) * g1 - 2.0 * upper_inc))
}

/// Default quantile-sum resolution for the weighted CRPS.
pub const WCRP_DEFAULT_N: usize = 1000;

/// Default tail-emphasizing weight `w(p) = p^2`.
pub fn wcrp_weight_p2(p: f64) -> f64 {
    p * p
}

/// Weighted CRPS by the quantile-decomposition sum
/// `(2/N) sum_{i=1}^{N-1} (1[y <= q_i] - p_i)(q_i - y) w(p_i)` with
/// `p_i = i/N`. The default weight is `p^2`.
pub fn score_wcrp(f: &GevParams, y: f64) -> Result<f64> {
    score_wcrp_with(f, y, wcrp_weight_p2, WCRP_DEFAULT_N)
}

pub fn score_wcrp_with<W: Fn(f64) -> f64>(
    f: &GevParams,
    y: f64,
    weight: W,
    n: usize,
) -> Result<f64> {
    if f.xi >= 1.0 {
        return Err(Error::Score(format!(
            "weighted CRPS undefined: predictive mean diverges (xi = {} >= 1)",
            f.xi
        )));
    }
    if n < 2 {
        return Err(Error::Score(format!("weighted CRPS needs N >= 2 quantiles, got {n}")));
    }
    let mut total = 0.0;
    for i in 1..n {
        let p = i as f64 / n as f64;
        let q = gev_quantile(f, p)?;
        let indicator = if y <= q { 1.0 } else { 0.0 };
        total += (indicator - p) * (q - y) * weight(p);
    }
    Ok(2.0 * total / n as f64)
}

/// Observation-level fold assignment, identical across models for a given
/// seed; fold sizes differ by at most one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub seed: u64,
    /// (box, year-index) in dataset iteration order.
    obs: Vec<(usize, usize)>,
    fold_of: Vec<usize>,
}

impl FoldAssignment {
    pub fn n_observations(&self) -> usize {
        self.obs.len()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in &self.fold_of {
            sizes[f] += 1;
        }
        sizes
    }

    /// Held-out (box, year-index) pairs of fold `fold` (0-based).
    pub fn held_out(&self, fold: usize) -> Vec<(usize, usize)> {
        self.obs
            .iter()
            .zip(&self.fold_of)
            .filter(|(_, &f)| f == fold)
            .map(|(&o, _)| o)
            .collect()
    }
}

/// Randomly assign every observation to one of `k` folds.
pub fn make_folds(data: &GriddedDataset, k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::Domain(format!("cross-validation needs k >= 2 folds, got {k}")));
    }
    let obs: Vec<(usize, usize)> = data.observations().map(|(b, t, _)| (b, t)).collect();
    if obs.len() < k {
        return Err(Error::Domain(format!(
            "cross-validation needs at least {k} observations, got {}",
            obs.len()
        )));
    }
    let mut order: Vec<usize> = (0..obs.len()).collect();
    let mut rng = substream(seed, tags::FOLDS, 0);
    order.shuffle(&mut rng);
    let mut fold_of = vec![0usize; obs.len()];
    for (pos, &idx) in order.iter().enumerate() {
        fold_of[idx] = pos % k;
    }
    Ok(FoldAssignment { k, seed, obs, fold_of })
}

/// One held-out observation's scores under one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub model: String,
    pub fold: usize,
    pub box_id: usize,
    pub year: i32,
    pub se: f64,
    pub ds: f64,
    pub crp: f64,
    pub wcrp: f64,
}

/// Per-observation scores and mean-score summary for one model.
#[derive(Debug, Clone, Serialize)]
pub struct ScoreReport {
    pub model: String,
    pub records: Vec<ScoreRecord>,
    pub fold_sizes: Vec<usize>,
}

/// Mean scores in Table-3 shape.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanScores {
    pub n: usize,
    pub se: f64,
    pub ds: f64,
    pub crp: f64,
    pub wcrp: f64,
}

pub fn mean_scores(records: &[ScoreRecord]) -> MeanScores {
    let n = records.len();
    let nf = n as f64;
    MeanScores {
        n,
        se: records.iter().map(|r| r.se).sum::<f64>() / nf,
        ds: records.iter().map(|r| r.ds).sum::<f64>() / nf,
        crp: records.iter().map(|r| r.crp).sum::<f64>() / nf,
        wcrp: records.iter().map(|r| r.wcrp).sum::<f64>() / nf,
    }
}

impl ScoreReport {
    pub fn mean(&self) -> MeanScores {
        mean_scores(&self.records)
    }
}

/// 5-fold style cross-validation: for each fold, refit on the complement
/// (smoothing parameters re-selected, warm-started on the previous fold) and
/// score every held-out observation against its fitted predictive GEV.
pub fn cross_validate(
    data: &GriddedDataset,
    spec: &ModelSpec,
    cov: &CovariateSeries,
    penalty: &PenaltyMatrix,
    folds: &FoldAssignment,
    opts: &FitOptions,
) -> Result<ScoreReport> {
    let cov = cov.aligned_to(data.years())?;
    let mut records = Vec::with_capacity(folds.n_observations());
    let mut warm_lambdas: Option<Vec<f64>> = None;
    for fold in 0..folds.k {
        let held = folds.held_out(fold);
        let train = data.with_held_out(&held);
        let mut fold_opts = opts.clone();
        if matches!(fold_opts.lambdas, LambdaChoice::Optimize) {
            if let Some(w) = &warm_lambdas {
                fold_opts.initial_lambdas = Some(w.clone());
            }
        }
        let fit = fit_smooth(&train, spec, &cov, penalty, &fold_opts).map_err(|e| {
            Error::FitFailure(format!("cross-validation fold {} failed: {e}", fold + 1))
        })?;
        warm_lambdas = Some(fit.lambdas.lambdas());
        let (elev, _) = data.grid().centered_elevations();

        let fold_records: Vec<ScoreRecord> = held
            .par_iter()
            .map(|&(b, t)| {
                let y = data.value(b, t).expect("held-out observation exists");
                let params = params_at_unchecked(&fit.field, b, t, &cov, elev[b]);
                let se = score_se(&params, y)?;
                let ds = score_ds(&params, y)?;
                let crp = score_crp(&params, y)?;
                let wcrp = score_wcrp(&params, y)?;
                Ok(ScoreRecord {
                    model: spec.label.clone(),
                    fold: fold + 1,
                    box_id: b,
                    year: data.years()[t],
                    se,
                    ds,
                    crp,
                    wcrp,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        records.extend(fold_records);
    }
    Ok(ScoreReport { model: spec.label.clone(), records, fold_sizes: folds.fold_sizes() })
}

/// Outcome of the sign-flip exchangeability test.
#[derive(Debug, Clone, Serialize)]
pub struct ExchangeabilityOutcome {
    pub p_value: f64,
    pub t_obs: f64,
    /// The inputs were swapped so that the second model has the lower mean.
    pub swapped: bool,
    /// All score differences were zero (p = 1 by construction).
    pub degenerate: bool,
    pub replicates: usize,
}

/// Randomization test of pairwise score exchangeability: `T_obs` is the
/// mean score difference (model A minus model B, swapped if negative so the
/// better model is B), and `p` is the fraction of `J` random sign-flip
/// replicates with `T_j >= T_obs`.
pub fn exchangeability_test(
    scores_a: &[f64],
    scores_b: &[f64],
    replicates: usize,
    seed: u64,
) -> Result<ExchangeabilityOutcome> {
    if scores_a.len() != scores_b.len() || scores_a.is_empty() {
        return Err(Error::Domain(format!(
            "exchangeability test needs equal-length non-empty score lists, got {}/{}",
            scores_a.len(),
            scores_b.len()
        )));
    }
    if replicates == 0 {
        return Err(Error::Domain("exchangeability test needs at least one replicate".into()));
    }
    let mut diffs: Vec<f64> = scores_a.iter().zip(scores_b).map(|(a, b)| a - b).collect();
    let n = diffs.len() as f64;
    let mut t_obs = diffs.iter().sum::<f64>() / n;
    let swapped = t_obs < 0.0;
    if swapped {
        for d in diffs.iter_mut() {
            *d = -*d;
        }
        t_obs = -t_obs;
    }
    let degenerate = t_obs == 0.0 && diffs.iter().all(|&d| d == 0.0);

    let hits: u64 = (0..replicates)
        .into_par_iter()
        .map(|j| {
            let mut rng = substream(seed, tags::SIGN_FLIP, j as u64);
            let mut sum = 0.0;
            let mut bits = 0u64;
            let mut left = 0u32;
            for &d in &diffs {
                if left == 0 {
                    bits = rng.next_u64();
                    left = 64;
                }
                sum += if bits & 1 == 1 { -d } else { d };
                bits >>= 1;
                left -= 1;
            }
            u64::from(sum / n >= t_obs)
        })
        .sum();
    Ok(ExchangeabilityOutcome {
        p_value: hits as f64 / replicates as f64,
        t_obs,
        swapped,
        degenerate,
        replicates,
    })
}

/// CSV emitter: `model, fold, box_id, year, se, ds, crp, wcrp`.
pub fn write_score_csv(report: &ScoreReport, path: &Path) -> Result<()> {
    let rows: Vec<Vec<String>> = report
        .records
        .iter()
        .map(|r| {
            vec![
                r.model.clone(),
                r.fold.to_string(),
                r.box_id.to_string(),
                r.year.to_string(),
                format_float(r.se),
                format_float(r.ds),
                format_float(r.crp),
                format_float(r.wcrp),
            ]
        })
        .collect();
    write_csv_rows(path, &["model", "fold", "box_id", "year", "se", "ds", "crp", "wcrp"], &rows)
}

/// Read a score CSV back into records.
pub fn read_score_csv(path: &Path) -> Result<Vec<ScoreRecord>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in reader.deserialize() {
        out.push(row?);
    }
    Ok(out)
}
