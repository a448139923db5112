//! File formats, image IO and the command line around `nutricast-core`.

pub mod checkpoint;
pub mod chemio;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod imageio;
pub mod manifest;
pub mod report;
pub mod run;

pub use error::{Error, Result};
