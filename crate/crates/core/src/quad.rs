//! Quadrature helpers: trapezoid rules on time grids and adaptive Simpson.

use crate::error::{Error, Result};

/// Cumulative trapezoid integral of samples `f` on a (possibly non-uniform)
/// grid `t`. Output has the same length; entry `k` integrates over `[t_0, t_k]`.
pub fn cumulative_trapezoid(t: &[f64], f: &[f64]) -> Vec<f64> {
    debug_assert_eq!(t.len(), f.len());
    let mut out = Vec::with_capacity(t.len());
    let mut acc = 0.0;
    out.push(0.0);
    for k in 1..t.len() {
        acc += 0.5 * (t[k] - t[k - 1]) * (f[k] + f[k - 1]);
        out.push(acc);
    }
    out
}

fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

fn adaptive_step(
    f: &impl Fn(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = simpson(a, m, fa, flm, fm);
    let right = simpson(m, b, fm, frm, fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        left + right + delta / 15.0
    } else {
        adaptive_step(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
            + adaptive_step(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
    }
}

/// Adaptive Simpson integral of `f` over `[a, b]` with absolute tolerance `tol`.
pub fn adaptive_simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> Result<f64> {
    if !(a.is_finite() && b.is_finite()) {
        return Err(Error::InvalidArgument("non-finite integration bounds".into()));
    }
    if a == b {
        return Ok(0.0);
    }
    let (lo, hi, sign) = if a < b { (a, b, 1.0) } else { (b, a, -1.0) };
    let m = 0.5 * (lo + hi);
    let (fa, fm, fb) = (f(lo), f(m), f(hi));
    if !(fa.is_finite() && fm.is_finite() && fb.is_finite()) {
        return Err(Error::Evaluation(format!(
            "integrand not finite on [{lo}, {hi}]"
        )));
    }
    let whole = simpson(lo, hi, fa, fm, fb);
    Ok(sign * adaptive_step(&f, lo, hi, fa, fm, fb, whole, tol, 48))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trapezoid_linear_exact() {
        let t = [0.0, 0.5, 1.0, 2.0];
        let f: Vec<f64> = t.iter().map(|x| 2.0 * x).collect();
        let c = cumulative_trapezoid(&t, &f);
        for (k, &tk) in t.iter().enumerate() {
            assert!((c[k] - tk * tk).abs() < 1e-14);
        }
    }

    #[test]
    fn simpson_matches_log() {
        // integral of 1/u from r to 1 is -ln r
        let r = 0.03;
        let v = adaptive_simpson(|u| 1.0 / u, r, 1.0, 1e-12).unwrap();
        assert!((v + r.ln()).abs() < 1e-10, "{v}");
    }

    #[test]
    fn simpson_oscillatory() {
        let v = adaptive_simpson(|x| (10.0 * x).sin(), 0.0, 1.0, 1e-12).unwrap();
        let exact = (1.0 - (10.0f64).cos()) / 10.0;
        assert!((v - exact).abs() < 1e-10);
    }
}
