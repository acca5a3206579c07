//! File formats, config handling and the experiment driver behind the `ubot` binary.

pub mod config;
pub mod error;
pub mod experiment;
pub mod expr;
pub mod io;

pub use error::{Result, UbotError};
