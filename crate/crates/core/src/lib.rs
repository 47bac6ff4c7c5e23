//! A small f64 deep-learning library built around explicit attention
//! (squeeze-and-excitation, CBAM) and its "ignoring" counterparts, where a
//! block learns which features to suppress and an inversion function turns
//! that ignoring mask into an attention mask.

pub mod attention;
pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod cam;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use autograd::{numeric_grad, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Shape, Tensor};
