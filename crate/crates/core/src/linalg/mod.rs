//! Dense linear algebra and statistics kernel.

mod io;
mod matrix;
mod rng;
mod stats;
mod svd;

pub use io::format_g17;
pub(crate) use io::read_u64;
pub use matrix::Matrix;
pub use rng::Rng;
pub use stats::{numerical_rank, pearson, DEGENERATE_VARIANCE};
pub use svd::{svd, SvdResult};
