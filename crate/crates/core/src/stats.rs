//! Student-t distribution, Welch's t-test and confidence intervals.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `ln Γ(x)` for `x > 0` (Lanczos, g = 7, n = 9).
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + G + 0.5;
    for (i, &c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Continued fraction for the incomplete beta (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-15;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
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

/// Regularized incomplete beta `I_x(a, b)`.
pub fn inc_beta(a: f64, b: f64, x: f64) -> f64 {
    inc_beta_split(a, b, x, 1.0 - x)
}

/// `I_x(a, b)` with `y = 1 − x` supplied separately, so callers can keep
/// precision when `x` is close to 1.
fn inc_beta_split(a: f64, b: f64, x: f64, y: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if y <= 0.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * y.ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, y) / b
    }
}

/// Two-sided tail probability `P(|T| ≥ |t|)` for `df` degrees of freedom.
pub fn t_two_sided_p(t: f64, df: f64) -> f64 {
    if t.is_nan() {
        return f64::NAN;
    }
    if t.is_infinite() {
        return 0.0;
    }
    let denom = df + t * t;
    inc_beta_split(df / 2.0, 0.5, df / denom, t * t / denom).clamp(0.0, 1.0)
}

/// `P(T ≤ t)`.
pub fn t_cdf(t: f64, df: f64) -> f64 {
    let tail = 0.5 * t_two_sided_p(t, df);
    if t >= 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

/// The `q`-quantile of the t-distribution, by bisection on the CDF.
pub fn t_quantile(q: f64, df: f64) -> f64 {
    assert!(q > 0.0 && q < 1.0 && df > 0.0, "t_quantile({q}, {df})");
    let (mut lo, mut hi) = (-1.0, 1.0);
    while t_cdf(lo, df) > q {
        lo *= 2.0;
    }
    while t_cdf(hi, df) < q {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if t_cdf(mid, df) < q {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-12 * hi.abs().max(1.0) {
            break;
        }
    }
    0.5 * (lo + hi)
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    pub p: f64,
}

/// Welch's unequal-variance two-sided t-test of `a` against `b`.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::invalid(format!(
            "t-test needs at least two values per sample, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (ma, mb) = (mean(a), mean(b));
    let (va, vb) = (variance(a) / a.len() as f64, variance(b) / b.len() as f64);
    let se2 = va + vb;
    if se2 == 0.0 {
        // both samples constant
        let df = (a.len() + b.len() - 2) as f64;
        return Ok(if ma == mb {
            TTest { t: 0.0, df, p: 1.0 }
        } else {
            TTest {
                t: (ma - mb).signum() * f64::INFINITY,
                df,
                p: 0.0,
            }
        });
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (va * va / (a.len() as f64 - 1.0) + vb * vb / (b.len() as f64 - 1.0));
    Ok(TTest {
        t,
        df,
        p: t_two_sided_p(t, df),
    })
}

/// Two-sided one-sample t-test of `mean(xs) = mu0`.
pub fn one_sample_t_test(xs: &[f64], mu0: f64) -> Result<TTest> {
    if xs.len() < 2 {
        return Err(Error::invalid(format!("t-test needs at least two values, got {}", xs.len())));
    }
    let df = xs.len() as f64 - 1.0;
    let diff = mean(xs) - mu0;
    let se = (variance(xs) / xs.len() as f64).sqrt();
    if se == 0.0 {
        return Ok(if diff == 0.0 {
            TTest { t: 0.0, df, p: 1.0 }
        } else {
            TTest {
                t: diff.signum() * f64::INFINITY,
                df,
                p: 0.0,
            }
        });
    }
    let t = diff / se;
    Ok(TTest {
        t,
        df,
        p: t_two_sided_p(t, df),
    })
}

/// Two-sided confidence interval for the mean at `level` (e.g. 0.95).
pub fn mean_ci(xs: &[f64], level: f64) -> Result<(f64, f64)> {
    if xs.len() < 2 {
        return Err(Error::invalid("confidence interval needs at least two values"));
    }
    let m = mean(xs);
    let se = (variance(xs) / xs.len() as f64).sqrt();
    let q = t_quantile(0.5 + level / 2.0, xs.len() as f64 - 1.0);
    Ok((m - q * se, m + q * se))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gamma_at_integers() {
        for (n, fact) in [(1.0, 1.0), (2.0, 1.0), (5.0, 24.0), (10.0, 362_880.0)] {
            assert!((ln_gamma(n) - f64::ln(fact)).abs() < 1e-12);
        }
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-12);
    }

    #[test]
    fn known_t_quantiles() {
        // standard table values
        assert!((t_quantile(0.975, 10.0) - 2.228_138_851_986).abs() < 1e-9);
        assert!((t_quantile(0.975, 1.0) - 12.706_204_736_17).abs() < 1e-8);
        assert!(t_quantile(0.5, 7.0).abs() < 1e-10);
    }

    #[test]
    fn identical_samples() {
        let a = [0.3, 0.1, 0.4, 0.2];
        let r = welch_t_test(&a, &a).unwrap();
        assert_eq!(r.t, 0.0);
        assert_eq!(r.p, 1.0);
    }

    #[test]
    fn one_sample_by_hand() {
        // mean 2, variance 2/3, n 4: t = 2 / sqrt(1/6)
        let r = one_sample_t_test(&[1.0, 2.0, 3.0, 2.0], 0.0).unwrap();
        assert!((r.t - 2.0 * 6f64.sqrt()).abs() < 1e-12);
        assert_eq!(r.df, 3.0);
        assert_eq!(one_sample_t_test(&[0.5, 0.5], 0.5).unwrap().p, 1.0);
    }

    #[test]
    fn ci_brackets_mean() {
        let xs = [0.2, 0.5, 0.1, 0.9, 0.4];
        let (lo, hi) = mean_ci(&xs, 0.95).unwrap();
        assert!(lo <= mean(&xs) && mean(&xs) <= hi);
    }
}
