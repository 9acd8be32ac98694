use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{LabError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub stderr: f64,
    pub ci95: (f64, f64),
}

/// Mean, standard error (sample standard deviation over √n) and the normal
/// 95% interval.
pub fn summarize(values: &[f64]) -> Result<Summary> {
    let n = values.len();
    if n == 0 {
        return Err(LabError::InsufficientData("summary of an empty sample".into()));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let stderr = if n > 1 {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    } else {
        0.0
    };
    Ok(Summary { n, mean, stderr, ci95: (mean - 1.96 * stderr, mean + 1.96 * stderr) })
}

/// Unbiased sample variance and its standard error under normality
/// (`var·√(2/(n−1))`).
pub fn variance_with_se(values: &[f64]) -> Result<(f64, f64)> {
    let n = values.len();
    if n < 2 {
        return Err(LabError::InsufficientData("variance needs two values".into()));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Ok((var, var * (2.0 / (n - 1) as f64).sqrt()))
}

/// Pearson correlation.
pub fn correlation(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    sxy / (sxx * syy).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMode {
    /// Regress `ln y` on `ln x`.
    LogLog,
    /// Regress `y` on `ln x`.
    SemiLog,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub stderr: f64,
}

/// Ordinary least squares on `(ln x, ln y)` or `(ln x, y)`.
pub fn fit_loglog(xs: &[f64], ys: &[f64], mode: FitMode) -> Result<LineFit> {
    if xs.len() != ys.len() {
        return Err(LabError::InvalidParameter("xs and ys differ in length".into()));
    }
    if xs.len() < 3 {
        return Err(LabError::InsufficientData(format!("{} points; need at least 3", xs.len())));
    }
    if xs.iter().any(|x| *x <= 0.0) || (mode == FitMode::LogLog && ys.iter().any(|y| *y <= 0.0)) {
        return Err(LabError::InvalidParameter("non-positive value in log fit".into()));
    }
    let u: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let v: Vec<f64> = match mode {
        FitMode::LogLog => ys.iter().map(|y| y.ln()).collect(),
        FitMode::SemiLog => ys.to_vec(),
    };
    linear_fit(&u, &v)
}

/// Ordinary least squares of `v` on `u` with the classical slope standard
/// error.
pub fn linear_fit(u: &[f64], v: &[f64]) -> Result<LineFit> {
    let n = u.len();
    if n < 3 {
        return Err(LabError::InsufficientData(format!("{n} points; need at least 3")));
    }
    let nf = n as f64;
    let mu = u.iter().sum::<f64>() / nf;
    let mv = v.iter().sum::<f64>() / nf;
    let sxx: f64 = u.iter().map(|x| (x - mu).powi(2)).sum();
    if sxx == 0.0 {
        return Err(LabError::InvalidParameter("all abscissae equal".into()));
    }
    let sxy: f64 = u.iter().zip(v).map(|(x, y)| (x - mu) * (y - mv)).sum();
    let slope = sxy / sxx;
    let intercept = mv - slope * mu;
    let rss: f64 = u.iter().zip(v).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let stderr = (rss / (nf - 2.0) / sxx).sqrt();
    Ok(LineFit { slope, intercept, stderr })
}

/// Two-sample Kolmogorov–Smirnov statistic.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Asymptotic Kolmogorov tail `P(K > t)`.
pub fn kolmogorov_tail(t: f64) -> f64 {
    if t <= 0.0 {
        return 1.0;
    }
    let mut s = 0.0;
    for k in 1..=100 {
        let term = (-2.0 * (k * k) as f64 * t * t).exp();
        s += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * s).clamp(0.0, 1.0)
}

/// One-sample KS test of `values` against `N(0, variance)`; returns
/// `(statistic, p-value)`.
pub fn ks_normal_test(values: &[f64], variance: f64) -> (f64, f64) {
    let dist = Normal::new(0.0, variance.sqrt()).expect("positive variance");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let d = v
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let f = dist.cdf(*x);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max);
    let t = d * (n.sqrt() + 0.12 + 0.11 / n.sqrt());
    (d, kolmogorov_tail(t))
}

/// Maximum-likelihood rate of an exponential sample.
pub fn exponential_rate_mle(samples: &[f64]) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(LabError::InsufficientData("no samples".into()));
    }
    let n = samples.len() as f64;
    let rate = n / samples.iter().sum::<f64>();
    Ok((rate, rate / n.sqrt()))
}

/// Maximum-likelihood rate of an exponential sample observed only on
/// `[0, b]`. Solves `1/r − b/(e^{rb} − 1) = mean` by bisection; returns
/// `(rate, stderr)` with the stderr from the observed information.
pub fn truncated_exponential_rate_mle(samples: &[f64], b: f64) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(LabError::InsufficientData("no samples".into()));
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    // mean of the truncated law, decreasing in r; r = 0 gives b/2
    let m = |r: f64| {
        if r.abs() < 1e-9 {
            b / 2.0 - r * b * b / 12.0
        } else {
            1.0 / r - b / (r * b).exp_m1()
        }
    };
    let (mut lo, mut hi) = (-200.0 / b, 200.0 / b);
    if mean >= m(lo) || mean <= m(hi) {
        return Err(LabError::InsufficientData("sample mean outside the truncated range".into()));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if m(mid) > mean {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let r = 0.5 * (lo + hi);
    // variance of the truncated law = −dm/dr
    let h = 1e-5 * (1.0 + r.abs());
    let info = -(m(r + h) - m(r - h)) / (2.0 * h);
    Ok((r, 1.0 / (n * info).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::rng::RngStream;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn summary_basics() {
        let s = summarize(&[0.0, 2.0]).unwrap();
        assert_eq!(s.mean, 1.0);
        let c = summarize(&[3.0; 10]).unwrap();
        assert_eq!(c.stderr, 0.0);
        assert!(summarize(&[]).is_err());
    }

    #[test]
    fn fits_exact_lines() {
        let xs = [1.0, 2.0, 4.0, 8.0, 16.0];
        let cube: Vec<f64> = xs.iter().map(|x: &f64| x.powi(3)).collect();
        let f = fit_loglog(&xs, &cube, FitMode::LogLog).unwrap();
        assert_relative_eq!(f.slope, 3.0, epsilon = 1e-12);
        let flat = fit_loglog(&xs, &[2.0; 5], FitMode::LogLog).unwrap();
        assert_relative_eq!(flat.slope, 0.0, epsilon = 1e-12);
        assert!(fit_loglog(&xs[..2], &cube[..2], FitMode::LogLog).is_err());
        assert!(fit_loglog(&xs, &[1.0, -1.0, 1.0, 1.0, 1.0], FitMode::LogLog).is_err());
    }

    #[test]
    fn noisy_planted_slope() {
        let mut rng = RngStream::new(11, &["fit"]);
        let xs = [8.0, 12.0, 16.0, 24.0, 32.0];
        let ys: Vec<f64> =
            xs.iter().map(|x: &f64| 0.81 * x.ln() + 1.0 + 0.02 * rng.normal()).collect();
        let f = fit_loglog(&xs, &ys, FitMode::SemiLog).unwrap();
        assert!((f.slope - 0.81).abs() < 2.0 * f.stderr.max(1e-3), "{f:?}");
    }

    #[test]
    fn ci_calibration() {
        let mut covered = 0;
        for seed in 0..200 {
            let v = RngStream::new(seed, &["ci"]).normals(200);
            let s = summarize(&v).unwrap();
            if s.ci95.0 <= 0.0 && 0.0 <= s.ci95.1 {
                covered += 1;
            }
        }
        assert!((180..=198).contains(&covered), "{covered}");
    }

    #[test]
    fn ks_behaviour() {
        let a = RngStream::new(1, &["ks"]).normals(2000);
        let b = RngStream::new(2, &["ks"]).normals(2000);
        assert!(ks_statistic(&a, &b) < 0.06);
        let shifted: Vec<f64> = b.iter().map(|x| x + 1.0).collect();
        assert!(ks_statistic(&a, &shifted) > 0.3);
        let (_, p) = ks_normal_test(&a, 1.0);
        assert!(p > 0.01);
        let (_, p) = ks_normal_test(&a, 4.0);
        assert!(p < 0.01);
    }

    #[test]
    fn exponential_mles_recover_rate() {
        let mut s = RngStream::new(4, &["exp"]);
        let rate = 0.9;
        let xs: Vec<f64> = (0..200_000).map(|_| -s.uniform().ln_1p_neg() / rate).collect();
        let (r, se) = exponential_rate_mle(&xs).unwrap();
        assert!((r - rate).abs() < 2.0 * se, "{r} {se}");
        let window: Vec<f64> = xs.iter().copied().filter(|x| *x <= 1.0).collect();
        let (r, se) = truncated_exponential_rate_mle(&window, 1.0).unwrap();
        assert!((r - rate).abs() < 2.0 * se, "{r} {se}");
    }

    trait Ln1pNeg {
        fn ln_1p_neg(self) -> f64;
    }
    impl Ln1pNeg for f64 {
        fn ln_1p_neg(self) -> f64 {
            (-self).ln_1p()
        }
    }

    proptest! {
        #[test]
        fn regression_order_invariant(perm in Just(vec![0usize, 1, 2, 3, 4]).prop_shuffle()) {
            let xs = [8.0, 12.0, 16.0, 24.0, 32.0];
            let ys = [2.1, 2.5, 2.8, 3.1, 3.5];
            let a = fit_loglog(&xs, &ys, FitMode::SemiLog).unwrap();
            let px: Vec<f64> = perm.iter().map(|&i| xs[i]).collect();
            let py: Vec<f64> = perm.iter().map(|&i| ys[i]).collect();
            let b = fit_loglog(&px, &py, FitMode::SemiLog).unwrap();
            prop_assert!((a.slope - b.slope).abs() < 1e-12);
        }

        #[test]
        fn semilog_recovers_planted_line(slope in -2.0f64..2.0, c in -5.0f64..5.0) {
            let xs = [3.0, 5.0, 9.0, 17.0];
            let ys: Vec<f64> = xs.iter().map(|x: &f64| slope * x.ln() + c).collect();
            let f = fit_loglog(&xs, &ys, FitMode::SemiLog).unwrap();
            prop_assert!((f.slope - slope).abs() < 1e-12);
        }
    }
}
