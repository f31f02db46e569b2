//! Sample statistics for the benchmark harness: mean/std aggregation,
//! Student-t confidence intervals, and Welch's unequal-variance t-test.
//!
//! The t CDF comes from the regularized incomplete beta function evaluated
//! with the standard continued-fraction expansion; quantiles invert the CDF
//! by bisection. Accuracy is far below the 1e-4 the tests pin.

/// Lanczos approximation of ln Gamma(x), g = 7, n = 9.
fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_571_6e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // Reflection formula.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + 7.5;
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Continued fraction for the incomplete beta function (Lentz's method).
fn betacf(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 200;
    const EPS: f64 = 3e-16;
    const FPMIN: f64 = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < FPMIN {
        d = FPMIN;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta function I_x(a, b).
fn betai(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let bt = (ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln()).exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        bt * betacf(a, b, x) / a
    } else {
        1.0 - bt * betacf(b, a, 1.0 - x) / b
    }
}

/// CDF of Student's t distribution with `df` degrees of freedom.
pub fn t_cdf(t: f64, df: f64) -> f64 {
    if t == 0.0 {
        return 0.5;
    }
    let x = df / (df + t * t);
    let p = 0.5 * betai(0.5 * df, 0.5, x);
    if t > 0.0 {
        1.0 - p
    } else {
        p
    }
}

/// Quantile (inverse CDF) of Student's t by bisection.
pub fn t_quantile(p: f64, df: f64) -> f64 {
    assert!((0.0..1.0).contains(&p) && p > 0.0, "p in (0, 1)");
    if (p - 0.5).abs() < 1e-15 {
        return 0.0;
    }
    let (mut lo, mut hi) = (-1e6, 1e6);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if t_cdf(mid, df) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricAgg {
    pub mean: f64,
    /// Unbiased sample standard deviation (0 for fewer than 2 samples).
    pub std: f64,
    /// Half-width of the 95% confidence interval (t distribution, n-1 dof).
    pub ci95_half: f64,
}

pub fn mean(rows: &[f64]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    rows.iter().sum::<f64>() / rows.len() as f64
}

pub fn sample_std(rows: &[f64]) -> f64 {
    if rows.len() < 2 {
        return 0.0;
    }
    let m = mean(rows);
    (rows.iter().map(|&v| (v - m).powi(2)).sum::<f64>() / (rows.len() - 1) as f64).sqrt()
}

/// Mean, unbiased std and 95% CI half-width for one metric's repetitions.
pub fn aggregate(rows: &[f64]) -> MetricAgg {
    let m = mean(rows);
    let s = sample_std(rows);
    let ci = if rows.len() < 2 || s == 0.0 {
        0.0
    } else {
        t_quantile(0.975, (rows.len() - 1) as f64) * s / (rows.len() as f64).sqrt()
    };
    MetricAgg {
        mean: m,
        std: s,
        ci95_half: ci,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct WelchResult {
    pub t: f64,
    pub df: f64,
    /// Two-sided p-value.
    pub p: f64,
    /// p < 0.05.
    pub significant: bool,
}

/// Welch's unequal-variance t-test on two independent samples.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> WelchResult {
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (ma, mb) = (mean(a), mean(b));
    let (va, vb) = (sample_std(a).powi(2), sample_std(b).powi(2));
    let se2 = va / na + vb / nb;
    if se2 == 0.0 {
        // Identical constant samples: no evidence of difference.
        return WelchResult {
            t: 0.0,
            df: (na + nb - 2.0).max(1.0),
            p: 1.0,
            significant: false,
        };
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2.powi(2)
        / ((va / na).powi(2) / (na - 1.0).max(1.0) + (vb / nb).powi(2) / (nb - 1.0).max(1.0));
    let p = 2.0 * (1.0 - t_cdf(t.abs(), df));
    WelchResult {
        t,
        df,
        p,
        significant: p < 0.05,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn t_quantiles_match_table() {
        // Standard two-sided 95% critical values.
        let table = [
            (1.0, 12.706),
            (5.0, 2.571),
            (10.0, 2.228),
            (19.0, 2.093),
            (30.0, 2.042),
        ];
        for (df, expect) in table {
            let got = t_quantile(0.975, df);
            assert!(
                (got - expect).abs() < 2e-3,
                "df {df}: got {got}, expected {expect}"
            );
        }
    }

    #[test]
    fn t_cdf_symmetry_and_midpoint() {
        assert_eq!(t_cdf(0.0, 7.0), 0.5);
        for &t in &[0.5, 1.3, 2.8] {
            let a = t_cdf(t, 9.0);
            let b = t_cdf(-t, 9.0);
            assert!((a + b - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregate_examples() {
        let same = [5.0, 5.0, 5.0];
        let agg = aggregate(&same);
        assert_eq!(agg.mean, 5.0);
        assert_eq!(agg.std, 0.0);
        assert_eq!(agg.ci95_half, 0.0);

        let rows = [1.0, 2.0, 3.0];
        let agg = aggregate(&rows);
        assert_eq!(agg.mean, 2.0);
        assert!((agg.std - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ci_matches_table_lookup_for_n20() {
        let rows: Vec<f64> = (0..20).map(|i| 10.0 + (i % 5) as f64).collect();
        let agg = aggregate(&rows);
        let expect = 2.093 * sample_std(&rows) / 20f64.sqrt();
        assert!((agg.ci95_half - expect).abs() < 1e-3 * expect);
    }

    #[test]
    fn welch_detects_separated_samples() {
        let a: Vec<f64> = (0..20).map(|i| 10.0 + 0.01 * (i % 3) as f64).collect();
        let b: Vec<f64> = (0..20).map(|i| 11.0 + 0.01 * (i % 3) as f64).collect();
        let r = welch_t_test(&a, &b);
        assert!(r.significant);
        assert!(r.p < 1e-6);
    }

    #[test]
    fn welch_identical_samples_not_significant() {
        let a = [3.0; 10];
        let r = welch_t_test(&a, &a);
        assert!(!r.significant);
        assert_eq!(r.p, 1.0);

        // Same distribution, noisy: should almost always be insignificant.
        let a: Vec<f64> = (0..20).map(|i| ((i * 37) % 11) as f64).collect();
        let b: Vec<f64> = (0..20).map(|i| ((i * 53 + 7) % 11) as f64).collect();
        let r = welch_t_test(&a, &b);
        assert!(r.p > 0.05, "p = {}", r.p);
    }

    #[test]
    fn welch_known_value() {
        // Hand-checked example: a = [1,2,3,4,5], b = [2,3,4,5,6]:
        // means 3 and 4, var 2.5 each, se^2 = 1, t = -1, df = 8.
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let b = [2.0, 3.0, 4.0, 5.0, 6.0];
        let r = welch_t_test(&a, &b);
        assert!((r.t + 1.0).abs() < 1e-12);
        assert!((r.df - 8.0).abs() < 1e-9);
        assert!(!r.significant);
    }
}
