//! Array kernels behind the tape operations: forward and backward passes
//! as plain functions over flat buffers.
//!
//! Accumulation order inside every output element is fixed, so results are
//! bitwise reproducible regardless of how the outer loops are parallelized.

pub(crate) mod bilinear;
pub(crate) mod bn;
pub(crate) mod conv;
pub(crate) mod dcn;
pub(crate) mod pool;

pub use bn::{BnState, Mode};
pub use conv::ConvSpec;
pub use dcn::DcnSpec;
pub use pool::PoolKind;
