//! The full distillation objective: project the student, normalize, measure.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::linalg::Matrix;

use super::distance::{distance, distance_grad, DistanceSpec};
use super::norm::{normalize, normalize_vjp, NormScheme};
use super::projector::ProjectorState;

/// Where the normalization is applied.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormPlacement {
    /// `D(norm(project(zs)), norm(zt))`
    #[default]
    Joint,
    /// `D(project(zs), norm(zt))`
    TeacherOnly,
    /// `D(project(norm(zs)), norm(zt))`
    PreProjection,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    pub norm: NormScheme,
    pub distance: DistanceSpec,
    #[serde(default)]
    pub placement: NormPlacement,
}

impl DistillConfig {
    pub fn new(norm: NormScheme, distance: DistanceSpec) -> Self {
        DistillConfig {
            norm,
            distance,
            placement: NormPlacement::Joint,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DistillOutput {
    pub loss: f64,
    pub grad_zs: Matrix,
    /// One gradient per projector layer, same shapes as the layers.
    pub grad_layers: Vec<Matrix>,
}

/// Task and distillation terms of the joint objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task_loss: f64,
    pub distill_loss: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(task_loss: f64, distill_loss: f64) -> Self {
        LossBreakdown {
            task_loss,
            distill_loss,
            total: task_loss + distill_loss,
        }
    }
}

/// Joint-placement distillation loss with gradients.
pub fn distill_loss(
    zs: &Matrix,
    zt: &Matrix,
    p: &ProjectorState,
    norm: &NormScheme,
    spec: &DistanceSpec,
) -> Result<DistillOutput> {
    distill_loss_with(zs, zt, p, &DistillConfig::new(*norm, *spec))
}

pub fn distill_loss_with(
    zs: &Matrix,
    zt: &Matrix,
    p: &ProjectorState,
    cfg: &DistillConfig,
) -> Result<DistillOutput> {
    if zs.rows() != zt.rows() {
        return Err(LabError::shape(
            "distill_loss",
            &[zs.rows(), zs.cols()],
            &[zt.rows(), zt.cols()],
        ));
    }
    let student_in = match cfg.placement {
        NormPlacement::PreProjection => normalize(zs, &cfg.norm)?,
        _ => zs.clone(),
    };
    let trace = p.forward(&student_in)?;
    let a = match cfg.placement {
        NormPlacement::Joint => normalize(&trace.output, &cfg.norm)?,
        _ => trace.output.clone(),
    };
    let b = normalize(zt, &cfg.norm)?;
    let loss = distance(&a, &b, &cfg.distance)?;
    let ga = distance_grad(&a, &b, &cfg.distance)?;
    let g_out = match cfg.placement {
        NormPlacement::Joint => normalize_vjp(&trace.output, &cfg.norm, &ga)?,
        _ => ga,
    };
    let (g_in, grad_layers) = p.backward(&trace, &g_out)?;
    let grad_zs = match cfg.placement {
        NormPlacement::PreProjection => normalize_vjp(zs, &cfg.norm, &g_in)?,
        _ => g_in,
    };
    Ok(DistillOutput {
        loss,
        grad_zs,
        grad_layers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kdcore::project;
    use crate::linalg::Rng;

    #[test]
    fn perfect_alignment_is_zero() {
        let mut rng = Rng::new(3);
        let zs = rng.normal_matrix(6, 3);
        let p = ProjectorState::linear(rng.normal_matrix(3, 4));
        let zt = project(&zs, &p).unwrap();
        let out = distill_loss(&zs, &zt, &p, &NormScheme::none(), &DistanceSpec::frobenius()).unwrap();
        assert_eq!(out.loss, 0.0);
        assert_eq!(out.grad_zs.max_abs(), 0.0);
        assert_eq!(out.grad_layers[0].max_abs(), 0.0);
    }

    #[test]
    fn linear_frobenius_gradient_is_correlation_form() {
        let mut rng = Rng::new(4);
        let zs = rng.normal_matrix(10, 3);
        let zt = rng.normal_matrix(10, 5);
        let w = rng.normal_matrix(3, 5);
        let out = distill_loss(
            &zs,
            &zt,
            &ProjectorState::linear(w.clone()),
            &NormScheme::none(),
            &DistanceSpec::frobenius(),
        )
        .unwrap();
        let cs = zs.t_matmul(&zs).unwrap();
        let cst = zs.t_matmul(&zt).unwrap();
        let closed = cs.matmul(&w).unwrap().sub(&cst).unwrap();
        assert!(out.grad_layers[0].sub(&closed).unwrap().max_abs() <= 1e-10);
    }

    #[test]
    fn batch_mismatch() {
        let p = ProjectorState::linear(Matrix::identity(2));
        let r = distill_loss(
            &Matrix::zeros(3, 2),
            &Matrix::zeros(4, 2),
            &p,
            &NormScheme::none(),
            &DistanceSpec::frobenius(),
        );
        assert!(matches!(r, Err(LabError::Shape { .. })));
    }

    #[test]
    fn breakdown_total() {
        let b = LossBreakdown::new(0.25, 1.5);
        assert_eq!(b.total, 1.75);
    }
}
