//! File formats, the pipeline runner and the `vtomo` command line on top of
//! [`vtomo_core`].
//!
//! Everything numerical lives in the core crate. This crate reads and
//! writes the on-disk formats ([`io`]), strings the stages together with
//! timing and a run manifest ([`pipeline`]), and maps failures to exit codes
//! ([`cli`]).

mod error;

pub mod cli;
pub mod io;
pub mod pipeline;

pub use error::{Error, Result};
