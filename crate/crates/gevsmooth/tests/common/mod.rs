//! Shared oracles for the integration tests: quadrature, finite differences,
//! Kolmogorov-Smirnov checks and exact sign-flip enumeration. These stay
//! independent of the library's implementation paths.

#![allow(dead_code)]

/// Adaptive Simpson quadrature with absolute tolerance.
pub fn adaptive_simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson<F: Fn(f64) -> f64>(f: &F, a: f64, fa: f64, b: f64, fb: f64) -> (f64, f64, f64) {
        let m = 0.5 * (a + b);
        let fm = f(m);
        ((b - a) / 6.0 * (fa + 4.0 * fm + fb), m, fm)
    }
    fn recurse<F: Fn(f64) -> f64>(
        f: &F,
        a: f64,
        fa: f64,
        b: f64,
        fb: f64,
        whole: f64,
        m: f64,
        fm: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let (left, lm, flm) = simpson(f, a, fa, m, fm);
        let (right, rm, frm) = simpson(f, m, fm, b, fb);
        let delta = left + right - whole;
        if depth >= 50 || delta.abs() <= 15.0 * tol {
            left + right + delta / 15.0
        } else {
            recurse(f, a, fa, m, fm, left, lm, flm, tol / 2.0, depth + 1)
                + recurse(f, m, fm, b, fb, right, rm, frm, tol / 2.0, depth + 1)
        }
    }
    let fa = f(a);
    let fb = f(b);
    let (whole, m, fm) = simpson(f, a, fa, b, fb);
    recurse(f, a, fa, b, fb, whole, m, fm, tol, 0)
}

/// Central finite-difference gradient of a scalar function of a vector.
pub fn fd_gradient<F: Fn(&[f64]) -> f64>(f: &F, x: &[f64], h: f64) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    for i in 0..x.len() {
        let mut hi = x.to_vec();
        let mut lo = x.to_vec();
        hi[i] += h;
        lo[i] -= h;
        g[i] = (f(&hi) - f(&lo)) / (2.0 * h);
    }
    g
}

/// Kolmogorov-Smirnov statistic of `values` against a CDF.
pub fn ks_statistic<F: Fn(f64) -> f64>(values: &[f64], cdf: F) -> f64 {
    let mut u: Vec<f64> = values.iter().map(|&v| cdf(v)).collect();
    u.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = u.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &ui) in u.iter().enumerate() {
        let lo = i as f64 / n;
        let hi = (i + 1) as f64 / n;
        d = d.max((ui - lo).abs()).max((hi - ui).abs());
    }
    d
}

/// Asymptotic KS critical value at significance `alpha`.
pub fn ks_critical(n: usize, alpha: f64) -> f64 {
    (-0.5 * (alpha / 2.0).ln()).sqrt() / (n as f64).sqrt()
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

/// Exact p-value of the sign-flip exchangeability test by full enumeration
/// (2^n assignments), for n <= ~20.
pub fn exact_sign_flip_p(diffs: &[f64]) -> f64 {
    let n = diffs.len();
    assert!(n <= 20, "enumeration limited to 20 elements");
    let t_obs = mean(diffs);
    let mut hits = 0u64;
    let total = 1u64 << n;
    for mask in 0..total {
        let mut sum = 0.0;
        for (i, &d) in diffs.iter().enumerate() {
            if mask >> i & 1 == 1 {
                sum -= d;
            } else {
                sum += d;
            }
        }
        if sum / n as f64 >= t_obs {
            hits += 1;
        }
    }
    hits as f64 / total as f64
}
