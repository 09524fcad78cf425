//! Minimal dense-tensor numeric core: row-major f32 tensors, reverse-mode
//! automatic differentiation on a per-step tape, the Adam optimizer with a
//! linear warm-up schedule, and a versioned named-tensor checkpoint container.
//!
//! Everything is CPU-only f32. Kernels are plain fixed-order loops (unrolled
//! where it matters) so results are bit-identical for a given platform, seed
//! and input.

mod checkpoint;
mod error;
mod graph;
pub mod kernels;
mod optim;
pub mod rng;
mod tensor;

pub use checkpoint::{inspect, load, save, CheckpointError, CheckpointMeta, TensorEntry};
pub use error::NumError;
pub use graph::{CustomOp, Gradients, Graph, Var};
pub use optim::{clip_global_norm, Adam, AdamConfig, LrSchedule};
pub use tensor::Tensor;

pub type Result<T> = std::result::Result<T, NumError>;
