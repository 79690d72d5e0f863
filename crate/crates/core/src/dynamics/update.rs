//! The projector update rule for an L2 loss with a linear bias-free projector.
//!
//! With `Cs = ZsᵀZs` and `Cst = ZsᵀZt`, gradient descent on
//! `½‖ZsWp − Zt‖²` moves the weights along `Ẇp = Cst − Cs·Wp`. With weight
//! decay `η` and step size `αp` one update is `(1 − η)Wp + αp·Ẇp`.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::linalg::Matrix;

/// Tolerance on `‖Cs − I‖_F` for treating student features as whitened.
pub const WHITENING_TOL: f64 = 1e-8;

/// Self- and cross-correlation of a student/teacher batch.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationPair {
    pub cs: Matrix,
    pub cst: Matrix,
}

impl CorrelationPair {
    /// Validates symmetry and positive semidefiniteness of `cs`.
    pub fn new(cs: Matrix, cst: Matrix) -> Result<Self> {
        if cs.rows() != cs.cols() || cst.rows() != cs.rows() {
            return Err(LabError::shape(
                "correlation pair",
                &[cs.rows(), cs.cols()],
                &[cst.rows(), cst.cols()],
            ));
        }
        let asym = cs.sub(&cs.transpose())?.frobenius_norm();
        if asym > 1e-12 {
            return Err(LabError::Input(format!("self-correlation is not symmetric ({asym:e})")));
        }
        if !cholesky_succeeds(&cs, 1e-9) {
            return Err(LabError::Input(
                "self-correlation is not positive semidefinite".into(),
            ));
        }
        Ok(CorrelationPair { cs, cst })
    }

    pub fn from_features(zs: &Matrix, zt: &Matrix) -> Result<Self> {
        correlations(zs, zt)
    }

    pub fn is_whitened(&self) -> bool {
        whitening_error(&self.cs) <= WHITENING_TOL
    }
}

fn whitening_error(cs: &Matrix) -> f64 {
    match cs.sub(&Matrix::identity(cs.rows())) {
        Ok(d) => d.frobenius_norm(),
        Err(_) => f64::INFINITY,
    }
}

/// Cholesky of `m + shift·I`; succeeds iff the smallest eigenvalue of `m`
/// exceeds `−shift` (up to roundoff).
fn cholesky_succeeds(m: &Matrix, shift: f64) -> bool {
    let n = m.rows();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = m[(j, j)] + shift;
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d <= 0.0 {
            return false;
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in j + 1..n {
            let mut s = m[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    true
}

/// `cs = zsᵀzs`, `cst = zsᵀzt`.
pub fn correlations(zs: &Matrix, zt: &Matrix) -> Result<CorrelationPair> {
    if zs.rows() != zt.rows() {
        return Err(LabError::shape(
            "correlations",
            &[zs.rows(), zs.cols()],
            &[zt.rows(), zt.cols()],
        ));
    }
    Ok(CorrelationPair {
        cs: zs.t_matmul(zs)?,
        cst: zs.t_matmul(zt)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicsConfig {
    pub learning_rate: f64,
    #[serde(default)]
    pub weight_decay: f64,
    pub steps: usize,
    #[serde(default = "default_record_every")]
    pub record_every: usize,
}

fn default_record_every() -> usize {
    10
}

impl DynamicsConfig {
    pub fn new(learning_rate: f64, weight_decay: f64, steps: usize) -> Self {
        DynamicsConfig {
            learning_rate,
            weight_decay,
            steps,
            record_every: default_record_every(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(LabError::Input(format!(
                "learning rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(LabError::Input(format!(
                "weight decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if self.steps == 0 || self.record_every == 0 {
            return Err(LabError::Input("steps and record_every must be >= 1".into()));
        }
        Ok(())
    }
}

/// `Ẇp = cst − cs·wp`.
pub fn projector_velocity(c: &CorrelationPair, wp: &Matrix) -> Result<Matrix> {
    if wp.rows() != c.cs.cols() || wp.cols() != c.cst.cols() {
        return Err(LabError::shape(
            "projector_velocity",
            &[c.cst.rows(), c.cst.cols()],
            &[wp.rows(), wp.cols()],
        ));
    }
    c.cst.sub(&c.cs.matmul(wp)?)
}

/// One weight-decayed update `(1 − η)·wp + αp·(cst − cs·wp)`.
///
/// Only the config's rates are read, so `αp = 0` is allowed here.
pub fn step(wp: &Matrix, c: &CorrelationPair, cfg: &DynamicsConfig) -> Result<Matrix> {
    let v = projector_velocity(c, wp)?;
    let mut out = wp.scale(1.0 - cfg.weight_decay);
    out.axpy(cfg.learning_rate, &v)?;
    Ok(out)
}

/// Simulated weights next to the closed-form whitened recurrence.
#[derive(Clone, Debug)]
pub struct EmaCheck {
    pub simulated: Matrix,
    pub recurrence: Matrix,
    pub max_abs_diff: f64,
}

/// Runs [`step`] over a stream of whitened batches from `wp = 0` and, in
/// parallel, `m ← (1 − η − αp)·m + αp·cst_t`. With `η = αp` the weights are
/// an exponential moving average of the cross-correlations.
pub fn ema_equivalence(stream: &[CorrelationPair], cfg: &DynamicsConfig) -> Result<EmaCheck> {
    let first = stream
        .first()
        .ok_or_else(|| LabError::Input("empty correlation stream".into()))?;
    let (ds, dt) = first.cst.shape();
    let mut w = Matrix::zeros(ds, dt);
    let mut m = Matrix::zeros(ds, dt);
    let decay = 1.0 - cfg.weight_decay - cfg.learning_rate;
    for (t, c) in stream.iter().enumerate() {
        let err = whitening_error(&c.cs);
        if err > WHITENING_TOL {
            return Err(LabError::Precondition(format!(
                "batch {t}: student features are not whitened (‖cs − I‖ = {err:e})"
            )));
        }
        w = step(&w, c, cfg)?;
        let mut next = m.scale(decay);
        next.axpy(cfg.learning_rate, &c.cst)?;
        m = next;
    }
    let max_abs_diff = w.sub(&m)?.max_abs();
    Ok(EmaCheck {
        simulated: w,
        recurrence: m,
        max_abs_diff,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Rng;

    #[test]
    fn orthonormal_batch() {
        let zt = Rng::new(1).normal_matrix(2, 3);
        let c = correlations(&Matrix::identity(2), &zt).unwrap();
        assert_eq!(c.cs, Matrix::identity(2));
        assert_eq!(c.cst, zt);
    }

    #[test]
    fn duplicated_one_hot_rows_count() {
        let zs = Matrix::from_rows(&[[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 0.0]]).unwrap();
        let c = correlations(&zs, &zs).unwrap();
        assert_eq!(c.cs, Matrix::diag(&[3.0, 1.0]));
    }

    #[test]
    fn velocity_examples() {
        let mut rng = Rng::new(2);
        let cst = rng.normal_matrix(3, 4);
        let c = CorrelationPair::new(Matrix::identity(3), cst.clone()).unwrap();
        assert_eq!(projector_velocity(&c, &Matrix::zeros(3, 4)).unwrap(), cst);
        assert_eq!(projector_velocity(&c, &cst).unwrap().max_abs(), 0.0);
        assert!(projector_velocity(&c, &Matrix::zeros(4, 3)).is_err());
    }

    #[test]
    fn step_examples() {
        let mut rng = Rng::new(3);
        let cst = rng.normal_matrix(3, 2);
        let wp = rng.normal_matrix(3, 2);
        let c = CorrelationPair::new(Matrix::identity(3), cst.clone()).unwrap();
        let frozen = DynamicsConfig {
            learning_rate: 0.0,
            weight_decay: 0.0,
            steps: 1,
            record_every: 1,
        };
        assert_eq!(step(&wp, &c, &frozen).unwrap(), wp);
        let cfg = DynamicsConfig::new(0.1, 0.1, 1);
        let got = step(&wp, &c, &cfg).unwrap();
        let expect = wp.scale(0.8).add(&cst.scale(0.1)).unwrap();
        assert!(got.sub(&expect).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn rejects_asymmetric_or_indefinite() {
        let cs = Matrix::from_rows(&[[1.0, 0.5], [0.0, 1.0]]).unwrap();
        assert!(CorrelationPair::new(cs, Matrix::zeros(2, 1)).is_err());
        let cs = Matrix::diag(&[1.0, -1.0]);
        assert!(CorrelationPair::new(cs, Matrix::zeros(2, 1)).is_err());
    }

    #[test]
    fn ema_single_step_and_precondition() {
        let cst = Rng::new(4).normal_matrix(2, 2);
        let c = CorrelationPair::new(Matrix::identity(2), cst.clone()).unwrap();
        let cfg = DynamicsConfig::new(0.2, 0.2, 1);
        let out = ema_equivalence(&[c], &cfg).unwrap();
        assert!(out.simulated.sub(&cst.scale(0.2)).unwrap().max_abs() < 1e-15);
        let bad = CorrelationPair::new(Matrix::diag(&[2.0, 1.0]), cst).unwrap();
        assert!(matches!(ema_equivalence(&[bad], &cfg), Err(LabError::Precondition(_))));
        assert!(ema_equivalence(&[], &cfg).is_err());
    }
}
