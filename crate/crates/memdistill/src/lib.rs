//! File formats, datasets, parallel evaluation and the command line for
//! `memdistill-core`.

pub mod artifact;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod datasets;
pub mod error;
pub mod experiments;
pub mod idx;
pub mod parallel;
pub mod pnm;
pub mod report;
pub mod zca;

pub use error::{Error, Result};
pub use memdistill_core;
