//! The translational-equivariance measure `μ_T(φ) = ‖φ(Tx) − Tφ(x)‖²`,
//! reduced as a mean squared error over patch tokens.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

use super::maps::TokenMap;
use super::tokens::{roll_to_grid, translate, unroll, PrefixSlab, TokenBatch, Translation};

/// Patch-token slab of a batch, `B × H·W × C`, flattened.
fn strip_prefix(x: &TokenBatch) -> Vec<f64> {
    x.spatial_rows().into_vec()
}

/// `x` with its patch tokens translated by `t` and prefix tokens taken
/// from `prefix_src`.
fn shift_with_prefix(x: &TokenBatch, t: &Translation, prefix_src: &TokenBatch) -> Result<TokenBatch> {
    let (grid, _) = roll_to_grid(x)?;
    let (_, prefix) = roll_to_grid(prefix_src)?;
    let shifted = translate(&grid, t)?;
    unroll(
        &shifted,
        &PrefixSlab {
            prefix: prefix.prefix,
            data: prefix.data,
        },
    )
}

/// Mean squared difference between the patch tokens of `φ(Tx)` and `Tφ(x)`.
///
/// Both translated sequences carry the prefix tokens of the input `x`; the
/// prefix never enters the error.
pub fn mu_t(phi: &dyn TokenMap, x: &TokenBatch, t: &Translation) -> Result<f64> {
    let tx = shift_with_prefix(x, t, x)?;
    let fx = phi.apply(x)?;
    let ftx = phi.apply(&tx)?;
    for y in [&fx, &ftx] {
        if (y.batch(), y.tokens(), y.channels()) != (x.batch(), x.tokens(), x.channels()) {
            return Err(LabError::shape(
                "token map output",
                &[x.batch(), x.tokens(), x.channels()],
                &[y.batch(), y.tokens(), y.channels()],
            ));
        }
    }
    let tfx = shift_with_prefix(&fx, t, x)?;
    let a = strip_prefix(&tfx);
    let b = strip_prefix(&ftx);
    if a.is_empty() {
        return Ok(0.0);
    }
    let sse: f64 = a.iter().zip(&b).map(|(p, q)| (p - q) * (p - q)).sum();
    Ok(sse / a.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub phi_id: String,
    pub translations: Vec<Translation>,
    pub mean: f64,
    /// Population standard deviation over all `(x, T)` pairs.
    pub std: f64,
    pub n: usize,
}

/// `μ_T` over every `(x, T)` pair, evaluated in parallel and reduced in
/// pair order.
pub fn mu_t_suite(phi: &dyn TokenMap, xs: &[TokenBatch], translations: &[Translation]) -> Result<SuiteReport> {
    if xs.is_empty() || translations.is_empty() {
        return Err(LabError::Input(
            "equivariance suite needs at least one batch and one translation".into(),
        ));
    }
    let pairs: Vec<(usize, usize)> = (0..xs.len())
        .flat_map(|i| (0..translations.len()).map(move |j| (i, j)))
        .collect();
    let values = pairs
        .par_iter()
        .map(|&(i, j)| mu_t(phi, &xs[i], &translations[j]))
        .collect::<Result<Vec<f64>>>()?;
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    Ok(SuiteReport {
        phi_id: phi.id(),
        translations: translations.to_vec(),
        mean,
        std: var.sqrt(),
        n,
    })
}
