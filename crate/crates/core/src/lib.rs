pub mod autodiff;
pub mod cli;
pub mod config;
mod binio;
pub mod error;
pub mod exec;
pub mod flow;
pub mod model_io;
pub mod ops;
pub mod prior;
pub mod selfcheck;
pub mod signals;
pub mod tensor;
pub mod training;
pub mod transport;

pub use error::{Error, Result};
pub use tensor::Tensor;
