//! Class activation maps trained with image-text matching objectives.

pub mod backbone;
pub mod cli;
pub mod datamodel;
pub mod error;
pub mod evalkit;
pub mod losses;
pub mod matcher;
pub mod pipeline;
pub mod synthgen;

pub use error::{ClimsError, Result};
