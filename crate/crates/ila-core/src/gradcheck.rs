//! Central finite-difference gradient checking.
//!
//! The numeric side perturbs raw input buffers and re-runs a scalar-valued
//! closure, so it is independent of the tape's backward rules.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

/// Central difference gradient of `f` at `x`.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut xbuf = x.to_vec();
    let mut g = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = xbuf[i];
        xbuf[i] = orig + eps;
        let fp = f(&xbuf);
        xbuf[i] = orig - eps;
        let fm = f(&xbuf);
        xbuf[i] = orig;
        g.push((fp - fm) / (2.0 * eps));
    }
    g
}

/// Elementwise relative error with a small absolute floor, so near-zero
/// gradients do not blow up the ratio.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

/// Check `analytic` against a central-difference estimate of `f` around `x`.
pub fn check(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    eps: f64,
    tol: f64,
) -> Result<(), String> {
    let numeric = central_diff(f, x, eps);
    let err = max_rel_error(analytic, numeric.as_slice());
    if err < tol {
        Ok(())
    } else {
        let worst = analytic
            .iter()
            .zip(&numeric)
            .enumerate()
            .max_by(|(_, (a1, n1)), (_, (a2, n2))| {
                let e1 = (*a1 - *n1).abs() / a1.abs().max(n1.abs()).max(1e-6);
                let e2 = (*a2 - *n2).abs() / a2.abs().max(n2.abs()).max(1e-6);
                e1.partial_cmp(&e2).unwrap()
            })
            .map(|(i, (a, n))| format!("index {i}: analytic {a} vs numeric {n}"))
            .unwrap_or_default();
        Err(format!("max rel error {err:.3e} >= tol {tol:.1e} ({worst})"))
    }
}
