//! Representation normalization without affine parameters.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::linalg::Matrix;

pub const DEFAULT_EPSILON: f64 = 1e-4;
pub const DEFAULT_GROUPS: usize = 4;
/// Rows with a Euclidean norm below this are left untouched by `l2_row`.
pub const L2_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NormKind {
    None,
    L2Row,
    Batch,
    Group {
        #[serde(default = "default_groups")]
        groups: usize,
    },
}

fn default_groups() -> usize {
    DEFAULT_GROUPS
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormScheme {
    #[serde(flatten)]
    pub kind: NormKind,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

impl Default for NormScheme {
    fn default() -> Self {
        NormScheme::batch()
    }
}

impl NormScheme {
    pub fn new(kind: NormKind) -> Self {
        NormScheme {
            kind,
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn none() -> Self {
        Self::new(NormKind::None)
    }

    pub fn l2_row() -> Self {
        Self::new(NormKind::L2Row)
    }

    pub fn batch() -> Self {
        Self::new(NormKind::Batch)
    }

    pub fn group(groups: usize) -> Self {
        Self::new(NormKind::Group { groups })
    }

    pub fn name(&self) -> String {
        match self.kind {
            NormKind::None => "none".into(),
            NormKind::L2Row => "l2_row".into(),
            NormKind::Batch => "batch".into(),
            NormKind::Group { groups } => format!("group{groups}"),
        }
    }

    /// Checks the scheme against a `batch × dim` input.
    pub fn validate(&self, batch: usize, dim: usize) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(LabError::Input(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if batch == 0 || dim == 0 {
            return Err(LabError::shape("normalize", &[batch, dim], &[1, 1]));
        }
        match self.kind {
            NormKind::Batch | NormKind::Group { .. } if batch < 2 => Err(LabError::Precondition(
                format!("{} normalization needs a batch of at least 2, got {batch}", self.name()),
            )),
            NormKind::Group { groups } if groups == 0 || !dim.is_multiple_of(groups) => Err(LabError::Input(
                format!("{groups} groups do not divide feature dimension {dim}"),
            )),
            _ => Ok(()),
        }
    }

    fn pools(&self, dim: usize) -> Vec<Range<usize>> {
        match self.kind {
            NormKind::Batch => (0..dim).map(|j| j..j + 1).collect(),
            NormKind::Group { groups } => {
                let w = dim / groups;
                (0..groups).map(|g| g * w..(g + 1) * w).collect()
            }
            _ => Vec::new(),
        }
    }
}

pub fn normalize(z: &Matrix, scheme: &NormScheme) -> Result<Matrix> {
    normalize_flagged(z, scheme).map(|(m, _)| m)
}

/// Like [`normalize`], also returning the rows `l2_row` left unchanged
/// because their norm fell below [`L2_FLOOR`].
pub fn normalize_flagged(z: &Matrix, scheme: &NormScheme) -> Result<(Matrix, Vec<usize>)> {
    scheme.validate(z.rows(), z.cols())?;
    match scheme.kind {
        NormKind::None => Ok((z.clone(), Vec::new())),
        NormKind::L2Row => {
            let mut out = z.clone();
            let mut flagged = Vec::new();
            for i in 0..z.rows() {
                let n = row_norm(z.row(i));
                if n < L2_FLOOR {
                    flagged.push(i);
                    continue;
                }
                for x in out.row_mut(i) {
                    *x /= n;
                }
            }
            Ok((out, flagged))
        }
        NormKind::Batch | NormKind::Group { .. } => {
            let mut out = z.clone();
            for pool in scheme.pools(z.cols()) {
                let (mean, var) = pool_stats(z, &pool);
                let inv = 1.0 / (var + scheme.epsilon).sqrt();
                for i in 0..z.rows() {
                    for j in pool.clone() {
                        out[(i, j)] = (z[(i, j)] - mean) * inv;
                    }
                }
            }
            Ok((out, Vec::new()))
        }
    }
}

/// Vector-Jacobian product of [`normalize`]: `Jᵀ · upstream`, including the
/// dependence of the batch statistics on every input.
pub fn normalize_vjp(z: &Matrix, scheme: &NormScheme, upstream: &Matrix) -> Result<Matrix> {
    scheme.validate(z.rows(), z.cols())?;
    if upstream.shape() != z.shape() {
        return Err(LabError::shape(
            "normalize_vjp",
            &[z.rows(), z.cols()],
            &[upstream.rows(), upstream.cols()],
        ));
    }
    match scheme.kind {
        NormKind::None => Ok(upstream.clone()),
        NormKind::L2Row => {
            let mut out = upstream.clone();
            for i in 0..z.rows() {
                let x = z.row(i);
                let n = row_norm(x);
                if n < L2_FLOOR {
                    continue;
                }
                let g = upstream.row(i);
                // d(x/|x|) = (I - y yᵀ)/|x|
                let yg: f64 = x.iter().zip(g).map(|(a, b)| a * b).sum::<f64>() / n;
                for (j, o) in out.row_mut(i).iter_mut().enumerate() {
                    *o = (g[j] - x[j] / n * yg) / n;
                }
            }
            Ok(out)
        }
        NormKind::Batch | NormKind::Group { .. } => {
            let mut out = Matrix::zeros(z.rows(), z.cols());
            for pool in scheme.pools(z.cols()) {
                let (mean, var) = pool_stats(z, &pool);
                let inv = 1.0 / (var + scheme.epsilon).sqrt();
                let count = (z.rows() * pool.len()) as f64;
                let mut g_mean = 0.0;
                let mut gy_mean = 0.0;
                for i in 0..z.rows() {
                    for j in pool.clone() {
                        let y = (z[(i, j)] - mean) * inv;
                        g_mean += upstream[(i, j)];
                        gy_mean += upstream[(i, j)] * y;
                    }
                }
                g_mean /= count;
                gy_mean /= count;
                for i in 0..z.rows() {
                    for j in pool.clone() {
                        let y = (z[(i, j)] - mean) * inv;
                        out[(i, j)] = inv * (upstream[(i, j)] - g_mean - y * gy_mean);
                    }
                }
            }
            Ok(out)
        }
    }
}

fn row_norm(row: &[f64]) -> f64 {
    row.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Mean and biased variance over all batch rows and the columns in `pool`.
fn pool_stats(z: &Matrix, pool: &Range<usize>) -> (f64, f64) {
    let count = (z.rows() * pool.len()) as f64;
    let mut mean = 0.0;
    for i in 0..z.rows() {
        for j in pool.clone() {
            mean += z[(i, j)];
        }
    }
    mean /= count;
    let mut var = 0.0;
    for i in 0..z.rows() {
        for j in pool.clone() {
            let d = z[(i, j)] - mean;
            var += d * d;
        }
    }
    (mean, var / count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Rng;

    #[test]
    fn batch_two_rows() {
        let z = Matrix::from_rows(&[[1.0], [3.0]]).unwrap();
        let out = normalize(&z, &NormScheme::batch()).unwrap();
        // mean 2, var 1: ±1/sqrt(1.0001)
        let expect = 1.0 / 1.0001f64.sqrt();
        assert!((out[(0, 0)] + expect).abs() < 1e-15);
        assert!((out[(1, 0)] - expect).abs() < 1e-15);
        assert!((expect - 0.999950003749688).abs() < 1e-12);
    }

    #[test]
    fn batch_constant_column_is_zero() {
        let z = Matrix::from_rows(&[[5.0], [5.0], [5.0]]).unwrap();
        let out = normalize(&z, &NormScheme::batch()).unwrap();
        assert!(out.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn l2_three_four_five() {
        let z = Matrix::from_rows(&[[3.0, 4.0]]).unwrap();
        let out = normalize(&z, &NormScheme::l2_row()).unwrap();
        assert!((out[(0, 0)] - 0.6).abs() < 1e-15);
        assert!((out[(0, 1)] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn l2_flags_zero_rows() {
        let z = Matrix::from_rows(&[[0.0, 0.0], [1.0, 0.0]]).unwrap();
        let (out, flagged) = normalize_flagged(&z, &NormScheme::l2_row()).unwrap();
        assert_eq!(flagged, vec![0]);
        assert_eq!(out, z);
    }

    #[test]
    fn group_with_one_group_per_column_is_batch() {
        let z = Rng::new(1).normal_matrix(6, 4);
        let a = normalize(&z, &NormScheme::batch()).unwrap();
        let b = normalize(&z, &NormScheme::group(4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn precondition_errors() {
        let one_row = Matrix::zeros(1, 4);
        assert!(matches!(
            normalize(&one_row, &NormScheme::batch()),
            Err(LabError::Precondition(_))
        ));
        assert!(matches!(
            normalize(&one_row, &NormScheme::group(2)),
            Err(LabError::Precondition(_))
        ));
        assert!(matches!(
            normalize(&Matrix::zeros(0, 0), &NormScheme::none()),
            Err(LabError::Shape { .. })
        ));
        assert!(normalize(&Matrix::zeros(4, 6), &NormScheme::group(4)).is_err());
        let bad = NormScheme {
            kind: NormKind::Batch,
            epsilon: 0.0,
        };
        assert!(normalize(&Matrix::zeros(4, 6), &bad).is_err());
    }

    #[test]
    fn vjp_identity_for_none() {
        let mut rng = Rng::new(2);
        let z = rng.normal_matrix(3, 3);
        let g = rng.normal_matrix(3, 3);
        assert_eq!(normalize_vjp(&z, &NormScheme::none(), &g).unwrap(), g);
    }

    #[test]
    fn vjp_kills_constant_upstream_columns() {
        let z = Rng::new(3).normal_matrix(8, 3);
        let g = Matrix::from_fn(8, 3, |_, j| j as f64 + 1.0);
        let dz = normalize_vjp(&z, &NormScheme::batch(), &g).unwrap();
        assert!(dz.max_abs() < 1e-12, "{}", dz.max_abs());
    }

    #[test]
    fn serde_shape() {
        let s: NormScheme = serde_json::from_str(r#"{"kind":"group","groups":2}"#).unwrap();
        assert_eq!(s, NormScheme::group(2));
        let b: NormScheme = serde_json::from_str(r#"{"kind":"batch","epsilon":0.001}"#).unwrap();
        assert_eq!(b.epsilon, 0.001);
        let g: NormScheme = serde_json::from_str(r#"{"kind":"group"}"#).unwrap();
        assert_eq!(g.kind, NormKind::Group { groups: 4 });
    }
}
