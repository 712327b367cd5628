pub mod adversary;
pub mod cli;
pub mod config;
pub mod data;
pub mod decode_eval;
pub mod error;
pub mod generator;
pub mod gradcheck;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
