//! Reference values computed by routes that share no code with the library:
//! quadrature instead of continued fractions, closed forms instead of
//! eigendecompositions, central differences instead of backpropagation.

/// Two-sided Student-t tail probability by adaptive Simpson quadrature.
///
/// With `x = sqrt(df) tan(theta)` the density becomes proportional to
/// `cos(theta)^(df - 1)` on `[0, pi/2]`, so no gamma function is needed.
pub fn t_two_sided_p(t: f64, df: f64) -> f64 {
    assert!(df >= 1.0, "quadrature oracle needs df >= 1");
    let f = |theta: f64| theta.cos().max(0.0).powf(df - 1.0);
    let half_pi = std::f64::consts::FRAC_PI_2;
    let theta_t = (t.abs() / df.sqrt()).atan();
    let tail = adaptive_simpson(&f, theta_t, half_pi, 1e-14);
    let total = adaptive_simpson(&f, 0.0, half_pi, 1e-14);
    (tail / total).clamp(0.0, 1.0)
}

fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(fa: f64, fm: f64, fb: f64, a: f64, b: f64) -> f64 {
        (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    }
    #[allow(clippy::too_many_arguments)]
    fn rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = simpson(fa, flm, fm, a, m);
        let right = simpson(fm, frm, fb, m, b);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            left + right + delta / 15.0
        } else {
            rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
        }
    }
    if b <= a {
        return 0.0;
    }
    let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
    rec(f, a, b, fa, fm, fb, simpson(fa, fm, fb, a, b), tol, 40)
}

/// Welch statistic, Welch–Satterthwaite degrees of freedom and the
/// quadrature p-value.
pub fn welch(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let moments = |xs: &[f64]| {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
        (n, m, v)
    };
    let (na, ma, va) = moments(a);
    let (nb, mb, vb) = moments(b);
    let (qa, qb) = (va / na, vb / nb);
    let t = (ma - mb) / (qa + qb).sqrt();
    let df = (qa + qb).powi(2) / (qa * qa / (na - 1.0) + qb * qb / (nb - 1.0));
    (t, df, t_two_sided_p(t, df))
}

/// Fréchet distance between Gaussians whose covariances share an
/// eigenbasis, from the two spectra.
pub fn frechet_commuting(mu1: &[f64], mu2: &[f64], eig1: &[f64], eig2: &[f64]) -> f64 {
    let mean: f64 = mu1.iter().zip(mu2).map(|(a, b)| (a - b) * (a - b)).sum();
    let cov: f64 = eig1.iter().zip(eig2).map(|(a, b)| a + b - 2.0 * (a * b).sqrt()).sum();
    mean + cov
}

/// `Q diag(eig) Q^T` for a Givens rotation `Q` by `angle` in every
/// consecutive coordinate pair, row-major.
pub fn rotated_covariance(eig: &[f64], angle: f64) -> Vec<f64> {
    let q = givens_chain(eig.len(), angle);
    let n = eig.len();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = (0..n).map(|k| q[i * n + k] * eig[k] * q[j * n + k]).sum();
        }
    }
    out
}

fn givens_chain(n: usize, angle: f64) -> Vec<f64> {
    let mut q = vec![0.0; n * n];
    for i in 0..n {
        q[i * n + i] = 1.0;
    }
    let (s, c) = angle.sin_cos();
    for p in 0..n.saturating_sub(1) {
        for row in 0..n {
            let (a, b) = (q[row * n + p], q[row * n + p + 1]);
            q[row * n + p] = c * a - s * b;
            q[row * n + p + 1] = s * a + c * b;
        }
    }
    q
}

/// Central-difference directional derivative `(f(x + hv) - f(x - hv)) / 2h`.
pub fn directional_derivative(f: impl Fn(&[f64]) -> f64, x: &[f64], v: &[f64], h: f64) -> f64 {
    let step = |sign: f64| -> Vec<f64> { x.iter().zip(v).map(|(a, b)| a + sign * h * b).collect() };
    (f(&step(1.0)) - f(&step(-1.0))) / (2.0 * h)
}
