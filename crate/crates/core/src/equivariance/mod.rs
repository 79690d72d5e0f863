//! Translational equivariance of token-sequence feature maps.
//!
//! Patch tokens live on an `H × W` grid behind a few prefix tokens. A map
//! `φ` is translation equivariant when `φ(Tx) = Tφ(x)`; [`mu_t`] measures
//! how far it is from that.

mod maps;
mod measure;
mod tokens;

pub use maps::{softmax_rows, ConvMixer, IdentityMap, PositionalAttention, TokenMap, TokenMlp};
pub use measure::{mu_t, mu_t_suite, SuiteReport};
pub use tokens::{
    roll_to_grid, translate, translate_tokens, unit_shifts, unroll, Grid, PrefixSlab, TokenBatch,
    Translation, TranslationMode, DEFAULT_GRID, DEFAULT_PREFIX,
};
