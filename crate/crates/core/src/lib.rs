pub mod api_pool;
pub mod bidf_mkd;
pub mod config;
pub mod data;
pub mod error;
pub mod generator;
pub mod harness;
pub mod nn;
pub mod replay;
pub mod runner;
pub mod task_recovery;
pub mod zo_grad;

pub use error::{Error, Result};
