//! Oracle checks for the penalized fitter: finite-difference gradients,
//! penalty-limit behaviour, single-box agreement with the plain MLE, and
//! posterior-sampler calibration.

mod common;

use gevsmooth::fit::{
    aic, fit_independent, fit_smooth, penalized_objective, posterior_sample, uncertainty_ratio,
    BlockName, FitOptions, LambdaChoice,
};
use gevsmooth::gev::{fit_lmoments, fit_mle, gev_pdf};
use gevsmooth::grid::{build_neighborhood, build_penalty};
use gevsmooth::model::{gev_params_at, ModelSpec, Mu1, ParameterField, Trend};
use gevsmooth::synthetic::{simulate, FieldGen, TruthScenario};

fn trended_scenario(nx: usize, ny: usize, n_years: usize, seed: u64) -> TruthScenario {
    let mut sc = TruthScenario::new(nx, ny, n_years, ModelSpec::mod2(), seed);
    sc.mu0 = FieldGen { constant: 20.0, plane_u: 2.0, plane_v: -1.0, sin_amp: 1.0, sin2_amp: 0.0 };
    sc.mu1 = FieldGen { constant: 4.0, plane_u: 1.5, plane_v: 0.0, sin_amp: -1.0, sin2_amp: 0.0 };
    sc.sigma0 = FieldGen { constant: 0.2, plane_u: 0.3, plane_v: 0.0, sin_amp: 0.0, sin2_amp: 0.0 };
    sc.xi = FieldGen { constant: -0.15, plane_u: 0.1, plane_v: 0.05, sin_amp: 0.0, sin2_amp: 0.0 };
    sc.spec.elevation_effect = false;
    sc
}

#[test]
fn objective_gradient_matches_finite_differences() {
    let mut sc = trended_scenario(3, 3, 12, 31);
    sc.spec = ModelSpec::mod4();
    sc.spec.elevation_effect = true;
    sc.sigma1 = FieldGen::constant(0.05);
    sc.elevation = FieldGen { constant: 0.3, plane_u: 0.4, plane_v: -0.2, sin_amp: 0.0, sin2_amp: 0.0 };
    sc.beta = -2.0;
    let sim = simulate(&sc).unwrap();
    let data = &sim.dataset;
    let penalty = build_penalty(&build_neighborhood(data.grid()));
    let lambdas = vec![0.7, 1.3, 0.4, 2.0, 5.0];

    // Evaluate away from the truth so the gradient is far from zero.
    let mut field = sim.field.clone();
    for v in field.mu0.iter_mut() {
        *v += 0.3;
    }
    field.beta = -1.0;

    let spec = sc.spec.clone();
    let cov = sim.covariate.clone();
    let obj = penalized_objective(&field, &spec, data, &cov, &lambdas, &penalty).unwrap();
    let grad = obj.gradient.expect("in support");

    // Pack/unpack through a layout-compatible closure over the raw field.
    let f = |theta: &[f64]| {
        let n = data.n_boxes();
        let mut g = ParameterField::zeros(n, &spec);
        g.mu0.copy_from_slice(&theta[0..n]);
        g.mu1 = Mu1::PerBox(theta[n..2 * n].to_vec());
        g.sigma0.copy_from_slice(&theta[2 * n..3 * n]);
        g.sigma1 = Some(theta[3 * n..4 * n].to_vec());
        g.xi.copy_from_slice(&theta[4 * n..5 * n]);
        g.beta = theta[5 * n];
        penalized_objective(&g, &spec, data, &cov, &lambdas, &penalty).unwrap().value
    };
    let n = data.n_boxes();
    let mut theta = Vec::new();
    theta.extend_from_slice(&field.mu0);
    if let Mu1::PerBox(v) = &field.mu1 {
        theta.extend_from_slice(v);
    }
    theta.extend_from_slice(&field.sigma0);
    theta.extend_from_slice(field.sigma1.as_ref().unwrap());
    theta.extend_from_slice(&field.xi);
    theta.push(field.beta);
    assert_eq!(theta.len(), 5 * n + 1);

    let fd = common::fd_gradient(&f, &theta, 1e-5);
    for i in 0..theta.len() {
        let denom = 1.0 + fd[i].abs();
        assert!(
            (grad[i] - fd[i]).abs() / denom < 1e-5,
            "gradient component {i}: analytic {} vs finite-difference {}",
            grad[i],
            fd[i]
        );
    }
}

#[test]
fn objective_at_zero_lambda_is_sum_of_box_logliks() {
    let sc = trended_scenario(3, 2, 10, 77);
    let sim = simulate(&sc).unwrap();
    let data = &sim.dataset;
    let penalty = build_penalty(&build_neighborhood(data.grid()));
    let spec = sc.spec.clone();
    let lambdas = vec![0.0; 4];
    let obj =
        penalized_objective(&sim.field, &spec, data, &sim.covariate, &lambdas, &penalty).unwrap();

    let mut direct = 0.0;
    for (b, t, y) in data.observations() {
        let p = gev_params_at(&sim.field, &spec, b, t, &sim.covariate, 0.0).unwrap();
        direct += gev_pdf(&p, y).unwrap().ln();
    }
    assert!(
        (obj.value - direct).abs() < 1e-9 * (1.0 + direct.abs()),
        "objective {} vs direct sum {}",
        obj.value,
        direct
    );
}

#[test]
fn constant_fields_have_zero_penalty() {
    let sc = trended_scenario(3, 3, 8, 5);
    let sim = simulate(&sc).unwrap();
    let data = &sim.dataset;
    let penalty = build_penalty(&build_neighborhood(data.grid()));
    let spec = sc.spec.clone();
    let mut field = ParameterField::zeros(data.n_boxes(), &spec);
    field.mu0 = vec![21.0; data.n_boxes()];
    field.mu1 = Mu1::PerBox(vec![3.0; data.n_boxes()]);
    field.sigma0 = vec![0.3; data.n_boxes()];
    field.xi = vec![-0.1; data.n_boxes()];
    let v0 = penalized_objective(&field, &spec, data, &sim.covariate, &vec![0.0; 4], &penalty)
        .unwrap()
        .value;
    let v1 = penalized_objective(&field, &spec, data, &sim.covariate, &vec![1e7; 4], &penalty)
        .unwrap()
        .value;
    assert_eq!(v0, v1);
}

#[test]
fn single_box_smooth_fit_matches_plain_mle() {
    let mut sc = TruthScenario::new(1, 1, 60, ModelSpec::mod1(), 11);
    sc.spec.elevation_effect = false;
    sc.mu0 = FieldGen::constant(15.0);
    sc.sigma0 = FieldGen::constant(0.5);
    sc.xi = FieldGen::constant(-0.2);
    let sim = simulate(&sc).unwrap();
    let data = &sim.dataset;
    let penalty = build_penalty(&build_neighborhood(data.grid()));

    let fit = fit_smooth(data, &sc.spec, &sim.covariate, &penalty, &FitOptions::default()).unwrap();

    let sample = data.box_sample(0).unwrap();
    let init = fit_lmoments(&sample).unwrap();
    let (mle, _) = fit_mle(&sample, &init).unwrap();

    assert!((fit.field.mu0[0] - mle.mu).abs() < 1e-6, "mu {} vs {}", fit.field.mu0[0], mle.mu);
    assert!(
        (fit.field.sigma0[0].exp() - mle.sigma).abs() < 1e-6,
        "sigma {} vs {}",
        fit.field.sigma0[0].exp(),
        mle.sigma
    );
    assert!((fit.field.xi[0] - mle.xi).abs() < 1e-6, "xi {} vs {}", fit.field.xi[0], mle.xi);

    // Penalty is vacuous: edf equals the coefficient count.
    assert!((fit.edf - 3.0).abs() < 1e-8);
    assert!((aic(&fit) - (-2.0 * fit.unpenalized_ll + 6.0)).abs() < 1e-10);
}

#[test]
fn zero_lambda_fit_matches_independent_fits() {
    let sc = trended_scenario(3, 3, 40, 23);
    let sim = simulate(&sc).unwrap();
    let data = &sim.dataset;
    let penalty = build_penalty(&build_neighborhood(data.grid()));
    let spec = sc.spec.clone();

    let smooth = fit_smooth(
        data,
        &spec,
        &sim.covariate,
        &penalty,
        &FitOptions::fixed_lambdas(vec![0.0; 4]),
    )
    .unwrap();
    let indep = fit_independent(data, &spec, &sim.covariate).unwrap();
    assert_eq!(indep.n_failed(), 0);

    let names = ["mu0", "mu1", "sigma0", "xi"];
    for b in 0..data.n_boxes() {
        let ib = indep.boxes[b].as_ref().unwrap();
        for (ci, name) in names.iter().enumerate() {
            let smooth_val = match *name {
                "mu0" => smooth.field.mu0[b],
                "mu1" => match &smooth.field.mu1 {
                    Mu1::PerBox(v) => v[b],
                    _ => unreachable!(),
                },
                "sigma0" => smooth.field.sigma0[b],
                _ => smooth.field.xi[b],
            };
            assert!(
                (smooth_val - ib.coefficients[ci]).abs() < 1e-5,
                "box {b} {name}: smooth {} vs independent {}",
                smooth_val,
                ib.coefficients[ci]
            );
        }
    }

    // With the penalty off, the uncertainty ratio is 1 within 5%.
    let ratios = uncertainty_ratio(&indep, &smooth).unwrap();
    for (b, r) in ratios.iter().enumerate() {
        let r = r.expect("all boxes converged");
        assert!((r - 1.0).abs() < 0.05, "box {b}: ratio {r}");
    }
}

#[test]
fn huge_lambda_gives_constant_fields_per_component() {
    let sc = trended_scenario(4, 3, 30, 47);
    let sim = simulate(&sc).unwrap();
    let data = &sim.dataset;
    let penalty = build_penalty(&build_neighborhood(data.grid()));
    let spec = sc.spec.clone();

    let fit = fit_smooth(
        data,
        &spec,
        &sim.covariate,
        &penalty,
        &FitOptions::fixed_lambdas(vec![1e8; 4]),
    )
    .unwrap();

    for (name, values) in [
        ("mu0", &fit.field.mu0),
        ("sigma0", &fit.field.sigma0),
        ("xi", &fit.field.xi),
    ] {
        let var = common::variance(values);
        assert!(var < 1e-4, "{name} spatial variance {var}");
    }
    if let Mu1::PerBox(v) = &fit.field.mu1 {
        let var = common::variance(v);
        assert!(var < 1e-4, "mu1 spatial variance {var}");
    }
}

#[test]
fn shift_equivariance_at_fixed_lambda() {
    let sc = trended_scenario(3, 3, 25, 61);
    let sim = simulate(&sc).unwrap();
    let data = &sim.dataset;
    let penalty = build_penalty(&build_neighborhood(data.grid()));
    let spec = sc.spec.clone();
    let lambdas = vec![2.0, 5.0, 1.0, 10.0];

    let fit_a =
        fit_smooth(data, &spec, &sim.covariate, &penalty, &FitOptions::fixed_lambdas(lambdas.clone()))
            .unwrap();

    let c = 3.25;
    let shifted_txx: Vec<Option<f64>> = (0..data.n_boxes())
        .flat_map(|b| (0..data.n_years()).map(move |t| data.value(b, t).map(|y| y + c)))
        .collect();
    let shifted = gevsmooth::grid::GriddedDataset::new(
        data.grid().clone(),
        data.years().to_vec(),
        shifted_txx,
    )
    .unwrap();
    let fit_b =
        fit_smooth(&shifted, &spec, &sim.covariate, &penalty, &FitOptions::fixed_lambdas(lambdas))
            .unwrap();

    for b in 0..data.n_boxes() {
        assert!((fit_b.field.mu0[b] - fit_a.field.mu0[b] - c).abs() < 1e-6, "mu0 box {b}");
        assert!((fit_b.field.sigma0[b] - fit_a.field.sigma0[b]).abs() < 1e-6, "sigma0 box {b}");
        assert!((fit_b.field.xi[b] - fit_a.field.xi[b]).abs() < 1e-6, "xi box {b}");
        if let (Mu1::PerBox(va), Mu1::PerBox(vb)) = (&fit_a.field.mu1, &fit_b.field.mu1) {
            assert!((vb[b] - va[b]).abs() < 1e-6, "mu1 box {b}");
        }
    }
}

#[test]
fn posterior_sampler_is_seeded_and_calibrated() {
    let sc = trended_scenario(3, 3, 30, 203);
    let sim = simulate(&sc).unwrap();
    let data = &sim.dataset;
    let penalty = build_penalty(&build_neighborhood(data.grid()));
    let fit = fit_smooth(data, &sc.spec, &sim.covariate, &penalty, &FitOptions::default()).unwrap();

    let a = posterior_sample(&fit, 50, 9).unwrap();
    let b = posterior_sample(&fit, 50, 9).unwrap();
    assert_eq!(a.len(), 50);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x, y);
    }

    // Mahalanobis distances of draws follow chi-squared(dim): check the mean
    // within 5 standard errors (var of chi2_k is 2k).
    let draws = posterior_sample(&fit, 4000, 1234).unwrap();
    let theta_hat = fit.theta();
    let dim = theta_hat.len() as f64;
    let m2: Vec<f64> = draws
        .iter()
        .map(|f| {
            let d = fit.layout.pack(f) - &theta_hat;
            (&fit.precision * &d).dot(&d)
        })
        .collect();
    let mean_m2 = common::mean(&m2);
    let se = (2.0 * dim / m2.len() as f64).sqrt();
    assert!(
        (mean_m2 - dim).abs() < 5.0 * se,
        "Mahalanobis mean {mean_m2} vs dim {dim} (se {se})"
    );
}

#[test]
fn aic_prefers_trend_model_on_trended_truth() {
    let sc = trended_scenario(4, 4, 50, 301);
    let sim = simulate(&sc).unwrap();
    let data = &sim.dataset;
    let penalty = build_penalty(&build_neighborhood(data.grid()));

    let mut spec1 = ModelSpec::mod1();
    spec1.elevation_effect = false;
    let mut spec2 = ModelSpec::mod2();
    spec2.elevation_effect = false;

    let fit1 = fit_smooth(data, &spec1, &sim.covariate, &penalty, &FitOptions::default()).unwrap();
    let fit2 = fit_smooth(data, &spec2, &sim.covariate, &penalty, &FitOptions::default()).unwrap();
    assert!(
        aic(&fit2) < aic(&fit1),
        "AIC: trend model {} vs no-trend {}",
        aic(&fit2),
        aic(&fit1)
    );
}

#[test]
fn mod5_fits_a_scalar_slope() {
    let mut sc = trended_scenario(3, 3, 40, 17);
    sc.spec = ModelSpec::mod5();
    sc.spec.elevation_effect = false;
    sc.mu1 = FieldGen::constant(3.0);
    let sim = simulate(&sc).unwrap();
    let data = &sim.dataset;
    let penalty = build_penalty(&build_neighborhood(data.grid()));
    let fit = fit_smooth(data, &sc.spec, &sim.covariate, &penalty, &FitOptions::default()).unwrap();
    match fit.field.mu1 {
        Mu1::Scalar(s) => {
            assert!((s - 3.0).abs() < 2.0, "scalar slope {s} far from truth 3.0");
        }
        _ => panic!("mod5 slope should be scalar"),
    }
    assert_eq!(fit.layout.block(BlockName::Mu1).unwrap().len, 1);
    assert_eq!(fit.spec.mu_trend, Trend::Homogeneous);
}
