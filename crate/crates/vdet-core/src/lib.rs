//! Self-contained vehicle detection engine: a small dense-tensor autodiff
//! core, the detection network blocks built on it (ghost convolutions,
//! channel/spatial attention, modulated deformable convolution), dataset
//! handling, a training loop, and detection metrics.

pub mod boxes;
pub mod data;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod rng;
pub(crate) mod kernels;
pub mod scalar;
pub mod tape;
pub mod train;
pub mod tensor;

pub use kernels::{BnState, ConvSpec, DcnSpec, Mode, PoolKind};
pub use scalar::{Dtype, Scalar};
pub use boxes::{Box2, DetectionBox};
pub use data::{Dataset, Sample};
pub use eval::{EvalReport, GtBox, MatchCounts};
pub use model::{build_model, decode_predictions, Model, ModelConfig, Prediction};
pub use tape::{Tape, Var};
pub use tensor::{Tensor, TensorError};
