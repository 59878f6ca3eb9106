//! Tensor substrate for the pianoroll diffusion model: a reverse-mode tape
//! over a fixed set of primitives, parameter storage, Adam, finite-difference
//! gradient checks and the checkpoint format.

pub mod adam;
pub mod checkpoint;
mod error;
pub mod gradcheck;
mod kernels;
pub mod layers;
pub mod param;
mod scalar;
pub mod tape;
mod tensor;

pub use adam::Adam;
pub use checkpoint::{Checkpoint, CheckpointError};
pub use error::{NnError, Result};
pub use kernels::Conv2dGeom;
pub use param::{Init, ParamId, ParamStore, Parameter};
pub use scalar::{gemm, MatRef, Scalar};
pub use tape::{CustomOp, Gradients, Tape, Var};
pub use tensor::Tensor;
