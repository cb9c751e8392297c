pub mod audio;
pub mod cli;
pub mod config;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod inference;
pub mod mel;
pub mod nn;
pub mod optim;
pub mod score_model;
pub mod sde;
pub mod training;

pub use error::{Error, Result};
