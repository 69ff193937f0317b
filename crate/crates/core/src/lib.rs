pub mod autodiff;
pub mod cli;
pub mod config;
pub mod data;
pub mod emvm;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod mwsa;
pub mod nn;
pub mod ops;
pub mod rdcnn;
pub mod ssm;
pub mod tensor;
pub mod train;
pub mod verify;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
