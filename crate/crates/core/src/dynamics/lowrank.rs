//! Distillation loss under a rank-limited projector.
//!
//! For whitened student features the best rank-`r` projector matches the
//! teacher only on the top-`r` singular directions of `ZsᵀZt`, leaving
//! `½(‖Zt‖² − Σ_{i≤r} σ_i²)` unexplained. [`low_rank_gap`] finds the
//! constrained optimum by gradient descent on a factored projector `A·B`
//! and reports it next to that truncation value.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::linalg::{svd, Matrix, Rng};

use super::update::WHITENING_TOL;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LowRankConfig {
    pub restarts: usize,
    pub learning_rate: f64,
    pub grad_tol: f64,
    pub max_steps: usize,
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for LowRankConfig {
    fn default() -> Self {
        LowRankConfig {
            restarts: 10,
            learning_rate: 0.05,
            grad_tol: 1e-10,
            max_steps: 50_000,
            init_scale: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LowRankGap {
    pub constrained_loss: f64,
    pub oracle_loss: f64,
    /// Best factored projector found.
    pub weights: Matrix,
    /// Steps taken by the winning restart.
    pub steps: usize,
}

impl LowRankGap {
    pub fn relative_gap(&self) -> f64 {
        (self.constrained_loss - self.oracle_loss).abs() / self.oracle_loss.abs().max(f64::MIN_POSITIVE)
    }
}

/// `½(‖zt‖² − Σ_{i≤r} σ_i(zsᵀzt)²)`.
pub fn truncation_loss(zs: &Matrix, zt: &Matrix, r: usize) -> Result<f64> {
    let s = svd(&zs.t_matmul(zt)?)?.singular_values;
    let kept: f64 = s.iter().take(r).map(|x| x * x).sum();
    Ok(0.5 * (zt.frobenius_norm_sq() - kept))
}

pub fn low_rank_gap(zs: &Matrix, zt: &Matrix, r: usize, cfg: &LowRankConfig) -> Result<LowRankGap> {
    if zs.rows() != zt.rows() {
        return Err(LabError::shape(
            "low_rank_gap",
            &[zs.rows(), zs.cols()],
            &[zt.rows(), zt.cols()],
        ));
    }
    let (ds, dt) = (zs.cols(), zt.cols());
    if r == 0 || r > ds.min(dt) {
        return Err(LabError::Input(format!("rank {r} outside [1, {}]", ds.min(dt))));
    }
    let cs = zs.t_matmul(zs)?;
    let err = cs.sub(&Matrix::identity(ds))?.frobenius_norm();
    if err > WHITENING_TOL {
        return Err(LabError::Precondition(format!(
            "student features are not whitened (‖zsᵀzs − I‖ = {err:e})"
        )));
    }
    if cfg.restarts == 0 {
        return Err(LabError::Input("at least one restart is required".into()));
    }
    let cst = zs.t_matmul(zt)?;
    let oracle_loss = truncation_loss(zs, zt, r)?;

    let mut best: Option<(f64, Matrix, usize)> = None;
    for restart in 0..cfg.restarts {
        let mut rng = Rng::with_stream(cfg.seed, restart as u64);
        let mut a = rng.normal_matrix_scaled(ds, r, cfg.init_scale);
        let mut b = rng.normal_matrix_scaled(r, dt, cfg.init_scale);
        let mut taken = cfg.max_steps;
        for t in 0..cfg.max_steps {
            let w = a.matmul(&b)?;
            let g = cs.matmul(&w)?.sub(&cst)?;
            let ga = g.matmul_t(&b)?;
            let gb = a.t_matmul(&g)?;
            let gnorm = (ga.frobenius_norm_sq() + gb.frobenius_norm_sq()).sqrt();
            if !gnorm.is_finite() {
                return Err(LabError::Numeric(format!(
                    "factored descent diverged at step {t} of restart {restart}"
                )));
            }
            if gnorm < cfg.grad_tol {
                taken = t;
                break;
            }
            a.axpy(-cfg.learning_rate, &ga)?;
            b.axpy(-cfg.learning_rate, &gb)?;
        }
        let w = a.matmul(&b)?;
        let loss = 0.5 * zs.matmul(&w)?.sub(zt)?.frobenius_norm_sq();
        if best.as_ref().is_none_or(|(l, _, _)| loss < *l) {
            best = Some((loss, w, taken));
        }
    }
    let (constrained_loss, weights, steps) = best.expect("at least one restart");
    Ok(LowRankGap {
        constrained_loss,
        oracle_loss,
        weights,
        steps,
    })
}

/// Polar factor `U·Vᵀ` of `z`: the closest matrix with orthonormal columns.
pub fn whiten(z: &Matrix) -> Result<Matrix> {
    if z.rows() < z.cols() {
        return Err(LabError::Input(format!(
            "cannot whiten {}x{}: fewer samples than features",
            z.rows(),
            z.cols()
        )));
    }
    let s = svd(z)?;
    s.left_vectors.matmul_t(&s.right_vectors)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn whitened_has_identity_gram() {
        let z = whiten(&Rng::new(1).normal_matrix(20, 5)).unwrap();
        let g = z.t_matmul(&z).unwrap();
        assert!(g.sub(&Matrix::identity(5)).unwrap().frobenius_norm() < 1e-12);
    }

    #[test]
    fn full_rank_square_case_matches_unconstrained() {
        let mut rng = Rng::new(2);
        let zs = whiten(&rng.normal_matrix(16, 4)).unwrap();
        let zt = rng.normal_matrix(16, 4);
        let out = low_rank_gap(&zs, &zt, 4, &LowRankConfig::default()).unwrap();
        // velocity-zero solution: Wp = Cst
        let unconstrained = 0.5 * zs.matmul(&zs.t_matmul(&zt).unwrap()).unwrap().sub(&zt).unwrap().frobenius_norm_sq();
        assert!((out.constrained_loss - unconstrained).abs() <= 1e-8);
        assert!((out.oracle_loss - unconstrained).abs() <= 1e-8);
    }

    #[test]
    fn realizable_rank_one_target() {
        let mut rng = Rng::new(3);
        let zs = whiten(&rng.normal_matrix(12, 4)).unwrap();
        let m = rng.normal_matrix(4, 1).matmul(&rng.normal_matrix(1, 5)).unwrap();
        let zt = zs.matmul(&m).unwrap();
        let out = low_rank_gap(&zs, &zt, 1, &LowRankConfig::default()).unwrap();
        assert!(out.constrained_loss <= 1e-10, "{}", out.constrained_loss);
    }

    #[test]
    fn preconditions() {
        let mut rng = Rng::new(4);
        let zs = rng.normal_matrix(10, 3);
        let zt = rng.normal_matrix(10, 3);
        assert!(matches!(
            low_rank_gap(&zs, &zt, 1, &LowRankConfig::default()),
            Err(LabError::Precondition(_))
        ));
        let w = whiten(&zs).unwrap();
        assert!(low_rank_gap(&w, &zt, 0, &LowRankConfig::default()).is_err());
        assert!(low_rank_gap(&w, &zt, 4, &LowRankConfig::default()).is_err());
    }
}
