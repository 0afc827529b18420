pub mod chain;
pub mod checkpoint;
pub mod config;
pub mod ctpc;
pub mod data;
pub mod domain;
pub mod error;
pub mod fusion;
pub mod model;
pub mod nn;
pub mod objective;
pub mod rng;
pub mod run;
pub mod tensor;
pub mod train;
pub mod view;

pub use error::{CaupsiError, Result};
