mod common;
use gevsmooth::fit::{fit_smooth, fit_independent, uncertainty_ratio, FitOptions};
use gevsmooth::grid::{build_neighborhood, build_penalty};
use gevsmooth::model::{ModelSpec, Mu1};
use gevsmooth::synthetic::{simulate, FieldGen, TruthScenario};
use std::time::Instant;

#[test]
fn probe_recovery_15x15() {
    let mut sc = TruthScenario::new(15, 15, 69, ModelSpec::mod2(), 4001);
    sc.mu0 = FieldGen { constant: 22.0, plane_u: 3.0, plane_v: -2.0, sin_amp: 1.5, sin2_amp: 0.5 };
    sc.mu1 = FieldGen { constant: 5.0, plane_u: 4.0, plane_v: 2.5, sin_amp: -2.0, sin2_amp: 0.0 };
    sc.sigma0 = FieldGen { constant: 0.0, plane_u: 0.2, plane_v: -0.1, sin_amp: 0.2, sin2_amp: 0.0 };
    sc.xi = FieldGen { constant: -0.15, plane_u: 0.1, plane_v: 0.08, sin_amp: 0.05, sin2_amp: 0.0 };
    sc.spec.elevation_effect = false;
    let sim = simulate(&sc).unwrap();
    let data = &sim.dataset;
    let penalty = build_penalty(&build_neighborhood(data.grid()));

    let t0 = Instant::now();
    let fit = fit_smooth(data, &sc.spec, &sim.covariate, &penalty, &FitOptions::default()).unwrap();
    println!("SMOOTH FIT: {:.1}s, outer {}, inner {}, lambdas {:?}, edf {:.1}",
        t0.elapsed().as_secs_f64(), fit.outer_iterations, fit.iterations, fit.lambdas.lambdas(), fit.edf);

    let (Mu1::PerBox(est), Mu1::PerBox(truth)) = (&fit.field.mu1, &sim.field.mu1) else { panic!() };
    let rmse = (est.iter().zip(truth).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / est.len() as f64).sqrt();
    let tmean = common::mean(truth);
    let tstd = (truth.iter().map(|v| (v - tmean) * (v - tmean)).sum::<f64>() / truth.len() as f64).sqrt();
    println!("mu1 RMSE {rmse:.4} vs 0.5*spatial std {:.4} (std {tstd:.4})", 0.5 * tstd);

    let t1 = Instant::now();
    let indep = fit_independent(data, &sc.spec, &sim.covariate).unwrap();
    println!("INDEP FIT: {:.1}s, failed {}", t1.elapsed().as_secs_f64(), indep.n_failed());
    let ratios = uncertainty_ratio(&indep, &fit).unwrap();
    let vals: Vec<f64> = ratios.iter().flatten().copied().collect();
    println!("xi SE ratio mean {:.2} min {:.2}", common::mean(&vals),
        vals.iter().copied().fold(f64::INFINITY, f64::min));
    assert!(rmse < 0.5 * tstd);
    assert!(common::mean(&vals) > 1.0);
}
