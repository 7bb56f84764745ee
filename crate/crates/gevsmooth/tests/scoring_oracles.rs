//! Scoring-rule oracles: the closed-form CRPS against direct numerical
//! integration, the weighted CRPS sum against the closed form, propriety
//! spot checks, and the randomization test against exact enumeration.

mod common;

use gevsmooth::gev::{gev_cdf, gev_quantile, GevParams};
use gevsmooth::scoring::{
    exchangeability_test, score_crp, score_ds, score_se, score_wcrp, score_wcrp_with,
};
use gevsmooth::synthetic::gev_sample_stream;

/// CRPS by adaptive quadrature of the defining integral, split at the
/// observation to respect the indicator kink.
fn crps_quadrature(f: &GevParams, y: f64) -> f64 {
    let lo = gev_quantile(f, 1e-9).unwrap();
    let hi = gev_quantile(f, 1.0 - 1e-7).unwrap();
    let a = lo.min(y - 1.0);
    let b = hi.max(y + 1.0);
    let sq_cdf = |x: f64| {
        let c = gev_cdf(f, x).unwrap();
        c * c
    };
    let sq_surv = |x: f64| {
        let s = 1.0 - gev_cdf(f, x).unwrap();
        s * s
    };
    common::adaptive_simpson(&sq_cdf, a, y, 1e-10) + common::adaptive_simpson(&sq_surv, y, b, 1e-10)
}

#[test]
fn crp_closed_form_matches_quadrature_on_case_grid() {
    let (mu, sigma) = (1.3, 2.1);
    let mut checked = 0;
    for xi in [-0.4, -0.1, 0.0, 0.1, 0.4] {
        let f = GevParams { mu, sigma, xi };
        for y_rel in [-2.0, -0.5, 0.0, 0.7, 2.0, 5.0] {
            let y = mu + sigma * y_rel;
            let closed = score_crp(&f, y).unwrap();
            let quad = crps_quadrature(&f, y);
            assert!(
                (closed - quad).abs() < 1e-6,
                "xi={xi}, y_rel={y_rel}: closed {closed} vs quadrature {quad}"
            );
            checked += 1;
        }
    }
    assert_eq!(checked, 30);
}

#[test]
fn wcrp_with_unit_weight_approximates_crp() {
    let f = GevParams { mu: 0.0, sigma: 1.0, xi: 0.0 };
    for y in [-1.0, 0.0, 2.0] {
        let crp = score_crp(&f, y).unwrap();
        let wcrp = score_wcrp_with(&f, y, |_| 1.0, 1000).unwrap();
        assert!(
            (wcrp - crp).abs() < 5e-3,
            "y={y}: unit-weight WCRP {wcrp} vs closed CRPS {crp}"
        );
    }
}

#[test]
fn wcrp_quadrature_is_converged_at_default_resolution() {
    let f = GevParams { mu: 0.0, sigma: 1.0, xi: 0.0 };
    for y in [-1.0, 0.0, 2.0] {
        let n1000 = score_wcrp_with(&f, y, |p| p * p, 1000).unwrap();
        let n2000 = score_wcrp_with(&f, y, |p| p * p, 2000).unwrap();
        assert!(
            (n1000 - n2000).abs() < 2e-3,
            "y={y}: N=1000 gives {n1000}, N=2000 gives {n2000}"
        );
        assert_eq!(score_wcrp(&f, y).unwrap(), n1000);
    }
}

#[test]
fn wcrp_location_equivariance() {
    let f = GevParams { mu: 0.4, sigma: 1.3, xi: -0.15 };
    let y = 1.9;
    let base = score_wcrp(&f, y).unwrap();
    let c = 11.0;
    let shifted = GevParams { mu: f.mu + c, ..f };
    assert!((score_wcrp(&shifted, y + c).unwrap() - base).abs() < 1e-9);
}

/// Negatively oriented propriety: the generating distribution beats a
/// 5-sigma-shifted competitor in mean score under every rule.
#[test]
fn propriety_spot_check_all_rules() {
    let truth = GevParams { mu: 10.0, sigma: 2.0, xi: -0.1 };
    let shifted = GevParams { mu: 10.0 + 5.0 * 2.0, ..truth };
    let draws = gev_sample_stream(truth, 2024, 10_000);

    let mean_of = |f: &GevParams, rule: &dyn Fn(&GevParams, f64) -> f64| -> f64 {
        draws.iter().map(|&y| rule(f, y)).sum::<f64>() / draws.len() as f64
    };
    let rules: [(&str, Box<dyn Fn(&GevParams, f64) -> f64>); 4] = [
        ("se", Box::new(|f: &GevParams, y: f64| score_se(f, y).unwrap())),
        ("ds", Box::new(|f: &GevParams, y: f64| score_ds(f, y).unwrap())),
        ("crp", Box::new(|f: &GevParams, y: f64| score_crp(f, y).unwrap())),
        ("wcrp", Box::new(|f: &GevParams, y: f64| score_wcrp(f, y).unwrap())),
    ];
    for (name, rule) in &rules {
        let good = mean_of(&truth, rule);
        let bad = mean_of(&shifted, rule);
        assert!(good < bad, "{name}: truth {good} should beat shifted {bad}");
    }
}

#[test]
fn exchangeability_exact_small_cases() {
    // N = 1, difference (1): T_j in {1, -1}, so p = 1/2.
    let out = exchangeability_test(&[2.0], &[1.0], 1_000_000, 5).unwrap();
    assert!((out.p_value - 0.5).abs() < 0.002, "N=1 p {}", out.p_value);

    // N = 2, differences (1, 1): T_j in {1, 0, 0, -1}, so p = 1/4.
    let out = exchangeability_test(&[2.0, 3.0], &[1.0, 2.0], 1_000_000, 6).unwrap();
    assert!((out.p_value - 0.25).abs() < 0.002, "N=2 p {}", out.p_value);
}

#[test]
fn exchangeability_matches_enumeration_up_to_n12() {
    let reps = 200_000;
    for n in [3usize, 5, 8, 12] {
        // Deterministic, slightly irregular differences.
        let diffs: Vec<f64> =
            (0..n).map(|i| ((i * 7 + 3) % 5) as f64 * 0.3 - 0.4 + 0.05 * i as f64).collect();
        let a: Vec<f64> = diffs.iter().map(|d| d.max(0.0) + 1.0 + d).collect();
        let b: Vec<f64> = a.iter().zip(&diffs).map(|(x, d)| x - d).collect();
        let exact_diffs: Vec<f64> = if common::mean(&diffs) < 0.0 {
            diffs.iter().map(|d| -d).collect()
        } else {
            diffs.clone()
        };
        let exact = common::exact_sign_flip_p(&exact_diffs);
        let mc = exchangeability_test(&a, &b, reps, 99).unwrap();
        let se = (exact * (1.0 - exact) / reps as f64).sqrt();
        assert!(
            (mc.p_value - exact).abs() <= 3.0 * se + 1e-12,
            "n={n}: MC {} vs exact {exact} (3se = {})",
            mc.p_value,
            3.0 * se
        );
    }
}

#[test]
fn crp_out_of_support_observations() {
    // Bounded tail: an observation above the upper endpoint.
    let f = GevParams { mu: 0.0, sigma: 1.0, xi: -0.5 };
    let endpoint = 2.0;
    let closed = score_crp(&f, endpoint + 3.0).unwrap();
    let quad = crps_quadrature(&f, endpoint + 3.0);
    assert!((closed - quad).abs() < 1e-6, "above endpoint: {closed} vs {quad}");

    // Heavy tail: an observation below the lower endpoint.
    let g = GevParams { mu: 0.0, sigma: 1.0, xi: 0.4 };
    let low = -2.5 - 3.0;
    let closed = score_crp(&g, low).unwrap();
    let quad = crps_quadrature(&g, low);
    assert!((closed - quad).abs() < 1e-6, "below endpoint: {closed} vs {quad}");
}
