//! Dense-array computation core: tensors, a reverse-mode tape with the layer
//! kernels the model needs, Adam, and a finite-difference gradient checker.
//!
//! Everything runs in 64-bit floats with fixed accumulation order; results
//! are bitwise deterministic for a given input regardless of thread count.

mod check;
mod optim;
mod tape;
mod tensor;

pub use check::finite_diff_check;
pub use optim::{AdamHyper, AdamState};
pub use tape::{Gradients, NodeId, Tape};
pub use tensor::Tensor;
