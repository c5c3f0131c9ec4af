//! Std companion to `gwrep-core`: the parts that need an operating system.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod io;
pub mod merge;
pub mod pipeline;
pub mod sim;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
