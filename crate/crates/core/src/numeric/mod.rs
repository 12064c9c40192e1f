//! Dense tensors, a reverse-mode tape, and optimizers, generic over the
//! floating-point element type.

mod checkpoint;
mod gradcheck;
mod graph;
mod optim;
mod params;
mod scalar;
mod tensor;

pub use checkpoint::{load, read_tensors, save, write_tensors, MAGIC};
pub use gradcheck::{grad_check, relative_error, GradCheckReport, LeafCheck, REL_ERROR_FLOOR};
pub use graph::{AttentionMask, Gradients, Graph, Var};
pub(crate) use graph::sigmoid;
pub use optim::{clip_grad_norm, AdamW, CosineSchedule};
pub use params::{Bound, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;
