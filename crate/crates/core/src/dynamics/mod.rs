//! Training dynamics of the projector: the correlation-form update rule,
//! its whitened fixed point and moving-average reading, spectra and
//! input-output correlation probes, and the rank-limited loss.

mod lowrank;
mod probes;
mod trajectory;
mod update;

pub use lowrank::{low_rank_gap, truncation_loss, whiten, LowRankConfig, LowRankGap};
pub use probes::{decorrelation, decorrelation_with, rank_bound_holds, record_spectrum, DecorrelationMode, RANK_TOL};
pub use trajectory::{run_dynamics, DynamicsRun, TrajectoryRecord};
pub use update::{
    correlations, ema_equivalence, projector_velocity, step, CorrelationPair, DynamicsConfig, EmaCheck,
    WHITENING_TOL,
};
