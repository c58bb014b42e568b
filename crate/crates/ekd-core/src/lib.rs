//! Online knowledge distillation engine.
//!
//! Two block-structured CNN streams — a teacher and a student — train in
//! lockstep on the same batches. Each stream carries bottleneck "guided"
//! classifier heads on its intermediate blocks; shallow heads distill from
//! the stream's own backbone (within-stream), and the student's backbone and
//! heads distill from the freshly updated teacher (cross-stream). After
//! training, the student backbone is exported alone for inference.
//!
//! Everything runs on a built-in reverse-mode autodiff tape over dense
//! tensors; training is single precision, gradient checking double.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod loss;
pub mod nn;
pub mod seeding;
pub mod tensor;
pub mod train;
pub mod verify;

pub use autodiff::{Tape, Var};
pub use error::{EkdError, Result};
pub use tensor::{DType, Scalar, Tensor};
