//! Distances between projected student and teacher representations.
//!
//! All three act on the residual `r = a − b`, summed over every entry of the
//! batch:
//!
//! * `frobenius`: `½ Σ r²`
//! * `logsum(α)`: `ln(Σ |r|^α + floor)`, a soft maximum that flattens the
//!   contribution of residuals that are already small relative to the rest
//! * `logsumexp(τ)`: `τ · ln Σ exp(|r|/τ)`

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::linalg::Matrix;

pub const DEFAULT_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DistanceKind {
    Frobenius,
    Logsum { alpha: f64 },
    Logsumexp { tau: f64 },
}

fn default_floor() -> f64 {
    DEFAULT_FLOOR
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceSpec {
    #[serde(flatten)]
    pub kind: DistanceKind,
    #[serde(default = "default_floor")]
    pub floor: f64,
}

impl DistanceSpec {
    pub fn new(kind: DistanceKind) -> Self {
        DistanceSpec {
            kind,
            floor: DEFAULT_FLOOR,
        }
    }

    pub fn frobenius() -> Self {
        Self::new(DistanceKind::Frobenius)
    }

    pub fn logsum(alpha: f64) -> Self {
        Self::new(DistanceKind::Logsum { alpha })
    }

    pub fn logsumexp(tau: f64) -> Self {
        Self::new(DistanceKind::Logsumexp { tau })
    }

    pub fn name(&self) -> String {
        match self.kind {
            DistanceKind::Frobenius => "frobenius".into(),
            DistanceKind::Logsum { alpha } => format!("logsum{alpha}"),
            DistanceKind::Logsumexp { tau } => format!("logsumexp{tau}"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.floor > 0.0) {
            return Err(LabError::Input(format!("floor must be > 0, got {}", self.floor)));
        }
        match self.kind {
            DistanceKind::Logsum { alpha } if !(alpha > 0.0) => {
                Err(LabError::Input(format!("alpha must be > 0, got {alpha}")))
            }
            DistanceKind::Logsumexp { tau } if !(tau > 0.0) => {
                Err(LabError::Input(format!("tau must be > 0, got {tau}")))
            }
            _ => Ok(()),
        }
    }
}

fn residual(a: &Matrix, b: &Matrix, op: &'static str) -> Result<Matrix> {
    if a.shape() != b.shape() {
        return Err(LabError::shape(op, &[a.rows(), a.cols()], &[b.rows(), b.cols()]));
    }
    a.sub(b)
}

/// `|r|^α` via `exp(α ln|r|)`; magnitudes under `floor` contribute nothing.
#[inline]
fn powered(r: f64, alpha: f64, floor: f64) -> f64 {
    let m = r.abs();
    if m < floor {
        0.0
    } else {
        (alpha * m.ln()).exp()
    }
}

pub fn distance(a: &Matrix, b: &Matrix, spec: &DistanceSpec) -> Result<f64> {
    spec.validate()?;
    let r = residual(a, b, "distance")?;
    Ok(match spec.kind {
        DistanceKind::Frobenius => 0.5 * r.frobenius_norm_sq(),
        DistanceKind::Logsum { alpha } => {
            let s: f64 = r.as_slice().iter().map(|&x| powered(x, alpha, spec.floor)).sum();
            (s + spec.floor).ln()
        }
        DistanceKind::Logsumexp { tau } => {
            let m = r.max_abs() / tau;
            let s: f64 = r.as_slice().iter().map(|&x| (x.abs() / tau - m).exp()).sum();
            tau * (m + s.ln())
        }
    })
}

/// `∂ distance / ∂a`; the gradient with respect to `b` is its negation.
pub fn distance_grad(a: &Matrix, b: &Matrix, spec: &DistanceSpec) -> Result<Matrix> {
    spec.validate()?;
    let r = residual(a, b, "distance_grad")?;
    Ok(match spec.kind {
        DistanceKind::Frobenius => r,
        DistanceKind::Logsum { alpha } => {
            let s: f64 = r.as_slice().iter().map(|&x| powered(x, alpha, spec.floor)).sum();
            let denom = s + spec.floor;
            r.map(|x| {
                if x.abs() < spec.floor {
                    0.0
                } else {
                    alpha * powered(x, alpha - 1.0, spec.floor) * x.signum() / denom
                }
            })
        }
        DistanceKind::Logsumexp { tau } => {
            let m = r.max_abs() / tau;
            let s: f64 = r.as_slice().iter().map(|&x| (x.abs() / tau - m).exp()).sum();
            r.map(|x| {
                let sign = if x == 0.0 { 0.0 } else { x.signum() };
                sign * (x.abs() / tau - m).exp() / s
            })
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Rng;

    fn row(v: &[f64]) -> Matrix {
        Matrix::from_rows(&[v]).unwrap()
    }

    #[test]
    fn frobenius_self_distance_is_zero() {
        let a = Rng::new(1).normal_matrix(3, 4);
        assert_eq!(distance(&a, &a, &DistanceSpec::frobenius()).unwrap(), 0.0);
    }

    #[test]
    fn logsum_hand_values() {
        let zero = row(&[0.0, 0.0]);
        let d = distance(&row(&[1.0, -1.0]), &zero, &DistanceSpec::logsum(2.0)).unwrap();
        assert!((d - (2.0f64 + 1e-12).ln()).abs() < 1e-15);
        assert!((d - std::f64::consts::LN_2).abs() < 1e-6);
        let d4 = distance(&row(&[2.0]), &row(&[0.0]), &DistanceSpec::logsum(4.0)).unwrap();
        assert!((d4 - 2.772589).abs() < 1e-6);
    }

    #[test]
    fn logsum_alpha_one_is_log_l1() {
        let a = row(&[0.5, -1.5, 2.0]);
        let d = distance(&a, &row(&[0.0; 3]), &DistanceSpec::logsum(1.0)).unwrap();
        assert!((d - (4.0f64 + 1e-12).ln()).abs() < 1e-15);
    }

    #[test]
    fn frobenius_gradient_is_residual() {
        let mut rng = Rng::new(4);
        let a = rng.normal_matrix(3, 3);
        let b = rng.normal_matrix(3, 3);
        let g = distance_grad(&a, &b, &DistanceSpec::frobenius()).unwrap();
        assert_eq!(g, a.sub(&b).unwrap());
    }

    #[test]
    fn logsum_gradient_hand_value() {
        let g = distance_grad(&row(&[1.0, 1.0]), &row(&[0.0, 0.0]), &DistanceSpec::logsum(2.0)).unwrap();
        for &x in g.as_slice() {
            assert!((x - 1.0).abs() < 1e-11);
        }
    }

    #[test]
    fn zero_residual_has_zero_gradient() {
        let a = row(&[1.0, 2.0]);
        for spec in [DistanceSpec::logsum(4.0), DistanceSpec::logsum(0.5), DistanceSpec::logsumexp(1.0)] {
            let g = distance_grad(&a, &a, &spec).unwrap();
            assert!(g.as_slice().iter().all(|&x| x == 0.0), "{spec:?}");
            assert!(distance(&a, &a, &spec).unwrap().is_finite());
        }
    }

    #[test]
    fn logsumexp_is_stable_for_large_residuals() {
        let d = distance(&row(&[1000.0, 999.0]), &row(&[0.0, 0.0]), &DistanceSpec::logsumexp(0.5)).unwrap();
        let expect = 1000.0 + 0.5 * (1.0 + (-2.0f64).exp()).ln();
        assert!((d - expect).abs() < 1e-9);
    }

    #[test]
    fn invalid_parameters() {
        let a = row(&[1.0]);
        assert!(distance(&a, &a, &DistanceSpec::logsum(0.0)).is_err());
        assert!(distance(&a, &a, &DistanceSpec::logsumexp(-1.0)).is_err());
        assert!(matches!(
            distance(&a, &row(&[1.0, 2.0]), &DistanceSpec::frobenius()),
            Err(LabError::Shape { .. })
        ));
    }
}
