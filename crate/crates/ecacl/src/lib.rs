//! File formats, parallel augmentation, experiment drivers and the `ecacl`
//! command line on top of [`ecacl_core`].

pub mod checkpoint;
pub mod config;
mod error;
pub mod experiment;
pub mod idx;
pub mod metrics;
pub mod parallel;

pub use error::{Error, Result};
