//! Minimal dense-tensor compute layer: row-major tensors, a tape-based
//! reverse-mode differentiation graph, AdamW, a cosine learning-rate schedule
//! and a finite-difference gradient checker.
//!
//! Everything runs single-threaded with a fixed reduction order, so identical
//! seeds give bitwise-identical parameter trajectories.

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod param;
pub mod real;
pub mod schedule;
pub mod suite;
pub mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, grad_check_params, GradCheckOptions, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use optim::{AdamW, AdamWConfig, AdamWState, ParamGroup};
pub use param::{ParamId, ParamStore, Parameter};
pub use real::{DType, Real};
pub use schedule::CosineSchedule;
pub use tensor::Tensor;
