//! Central finite differences, the oracle behind every gradient test.

use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Component `i` is `(f(p + h e_i) - f(p - h e_i)) / 2h`.
pub fn finite_difference_gradient(
    mut f: impl FnMut(&[f64]) -> f64,
    p: &[f64],
    h: f64,
) -> Result<Vec<f64>> {
    let mut probe = p.to_vec();
    let mut grad = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        probe[i] = p[i] + h;
        let plus = f(&probe);
        probe[i] = p[i] - h;
        let minus = f(&probe);
        probe[i] = p[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFiniteEvaluation { index: i });
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// `||a - b|| / max(||a||, ||b||)`, zero when both vectors vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom == 0.0 {
        0.0
    } else {
        diff / denom
    }
}
