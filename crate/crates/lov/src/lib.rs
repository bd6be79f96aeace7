//! File formats, plot data and the `lov` command line on top of `lov-core`.

pub mod chain;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod manifest;
pub mod plots;
pub mod surface;
