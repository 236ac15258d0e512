//! Staged command-line pipeline around `rkrom-core`: simulate, reduce,
//! train, evaluate and report, each writing a manifest with the digests of
//! everything it produced.

pub mod commands;
pub mod config;
pub mod error;
pub mod formats;
pub mod manifest;
