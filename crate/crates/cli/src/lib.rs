//! Command-line interface and HTTP service over the `styleprompter` library.

pub mod cli;
pub mod service;
