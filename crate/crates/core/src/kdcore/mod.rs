//! Distillation loss kernel: normalization, projector, distances, and the
//! combined objective, each with an analytic backward pass.
//!
//! The canonical pipeline projects the student representation and then
//! normalizes the projected student and the teacher with the same scheme
//! before measuring the distance (see [`NormPlacement`] for the ablations).

mod distance;
mod norm;
mod pipeline;
mod projector;
mod task;

pub use distance::{distance, distance_grad, DistanceKind, DistanceSpec, DEFAULT_FLOOR};
pub use norm::{
    normalize, normalize_flagged, normalize_vjp, NormKind, NormScheme, DEFAULT_EPSILON, DEFAULT_GROUPS,
    L2_FLOOR,
};
pub use pipeline::{distill_loss, distill_loss_with, DistillConfig, DistillOutput, LossBreakdown, NormPlacement};
pub use projector::{project, Activation, ProjectorSpec, ProjectorState, ProjectorTrace, DEFAULT_HIDDEN_WIDTH};
pub use task::{accuracy, argmax, task_loss, TaskLoss};
