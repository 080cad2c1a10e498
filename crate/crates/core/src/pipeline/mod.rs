//! Training loops and the experiment flow.

mod experiment;
mod optim;
mod stages;

pub use experiment::*;
pub use optim::*;
pub use stages::*;
