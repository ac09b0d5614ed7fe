pub mod cli;
pub mod design_space;
pub mod emulator;
pub mod error;
pub mod models;
mod optimize;
pub mod pareto;
pub mod posterior;
pub mod sampler;
pub mod seed;

pub use error::{CtoError, Result};
