use crate::error::{LabError, Result};

use super::{svd, Matrix};

/// Variance below which a vector counts as constant.
pub const DEGENERATE_VARIANCE: f64 = 1e-24;

/// Count of singular values above `rel_tol · σ_max`. Zero for the zero matrix.
pub fn numerical_rank(m: &Matrix, rel_tol: f64) -> Result<usize> {
    if !(rel_tol > 0.0 && rel_tol < 1.0) {
        return Err(LabError::Input(format!("rel_tol must lie in (0,1), got {rel_tol}")));
    }
    let s = svd(m)?.singular_values;
    let max = s.first().copied().unwrap_or(0.0);
    if max == 0.0 {
        return Ok(0);
    }
    Ok(s.iter().filter(|&&x| x > rel_tol * max).count())
}

/// Pearson correlation. A (near-)constant argument yields 0.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(LabError::shape("pearson", &[x.len()], &[y.len()]));
    }
    if x.len() < 2 {
        return Err(LabError::Precondition(format!(
            "pearson needs at least 2 samples, got {}",
            x.len()
        )));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxx += da * da;
        syy += db * db;
        sxy += da * db;
    }
    if sxx / n < DEGENERATE_VARIANCE || syy / n < DEGENERATE_VARIANCE {
        return Ok(0.0);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}
