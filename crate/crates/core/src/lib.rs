pub mod cli;
pub mod config;
pub mod datasets;
pub mod domain;
pub mod error;
pub mod evaluation;
pub mod feedback;
pub mod gateway;
pub mod inference;
pub mod optimizer;
pub mod run_dir;
pub mod scoring;
pub mod text;

pub use error::{Error, Result};
