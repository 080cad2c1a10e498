//! Knowledge distillation for compact fully-connected networks.
//!
//! A small reverse-mode autodiff engine, teacher and student MLPs,
//! distillation objectives for classification, alignment and verification,
//! a synthetic face-like dataset and an experiment pipeline that trains the
//! whole grid of teachers and students.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod pipeline;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
