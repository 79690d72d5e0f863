//! Diagnostics recorded along a training run.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::kdcore::ProjectorState;
use crate::linalg::{numerical_rank, pearson, svd, Matrix};

/// Descending singular values of a linear projector, divided by the largest
/// one when it is non-zero.
pub fn record_spectrum(p: &ProjectorState) -> Result<Vec<f64>> {
    if !p.is_linear() {
        return Err(LabError::Unsupported(
            "spectrum recording is defined for single-layer projectors only".into(),
        ));
    }
    let mut s = svd(&p.layers()[0])?.singular_values;
    if let Some(&max) = s.first() {
        if max > 0.0 {
            for x in &mut s {
                *x /= max;
            }
        }
    }
    Ok(s)
}

/// How per-output correlations are reduced over input features.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecorrelationMode {
    /// Best-matching input feature per output feature.
    #[default]
    MeanOfMax,
    MeanOfMean,
}

/// Input-output correlation score in `[0, 1]`: for each output column the
/// largest absolute Pearson correlation with any input column, averaged
/// over output columns. 1 means every output is a copy of some input.
pub fn decorrelation(input: &Matrix, output: &Matrix) -> Result<f64> {
    decorrelation_with(input, output, DecorrelationMode::MeanOfMax)
}

pub fn decorrelation_with(input: &Matrix, output: &Matrix, mode: DecorrelationMode) -> Result<f64> {
    if input.rows() != output.rows() {
        return Err(LabError::shape(
            "decorrelation",
            &[input.rows(), input.cols()],
            &[output.rows(), output.cols()],
        ));
    }
    if input.rows() < 2 {
        return Err(LabError::Precondition(format!(
            "decorrelation needs a batch of at least 2, got {}",
            input.rows()
        )));
    }
    if input.cols() == 0 || output.cols() == 0 {
        return Err(LabError::shape(
            "decorrelation",
            &[input.rows(), input.cols()],
            &[output.rows(), output.cols()],
        ));
    }
    let ins: Vec<Vec<f64>> = (0..input.cols()).map(|j| input.column(j)).collect();
    let mut total = 0.0;
    for j in 0..output.cols() {
        let out = output.column(j);
        let mut best = 0.0_f64;
        let mut sum = 0.0;
        for x in &ins {
            let r = pearson(x, &out)?.abs();
            best = best.max(r);
            sum += r;
        }
        total += match mode {
            DecorrelationMode::MeanOfMax => best,
            DecorrelationMode::MeanOfMean => sum / ins.len() as f64,
        };
    }
    Ok(total / output.cols() as f64)
}

/// Relative tolerance used for rank checks on trajectories.
pub const RANK_TOL: f64 = 1e-8;

/// `rank(zs·wp) ≤ min(rank(zs), rank(wp))`.
pub fn rank_bound_holds(zs: &Matrix, wp: &Matrix) -> Result<bool> {
    let product = zs.matmul(wp)?;
    let rp = numerical_rank(&product, RANK_TOL)?;
    Ok(rp <= numerical_rank(zs, RANK_TOL)?.min(numerical_rank(wp, RANK_TOL)?))
}
