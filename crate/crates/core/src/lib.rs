pub mod autodiff;
pub mod balancing;
pub mod checkpoint;
pub mod config;
pub mod encoders;
pub mod evaluation;
pub mod error;
mod io;
pub mod objectives;
pub mod pipeline;
pub mod seed;
pub mod synth;
pub mod tensor;
pub mod training;

pub use autodiff::{finite_diff_grad, GradMap, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
