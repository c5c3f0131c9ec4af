//! Numerical core for synthesizing genotype-phenotype association evidence
//! across studies.
//!
//! The crate is `no_std` (it needs `alloc`) and performs no IO. File formats,
//! the simulator and the command-line pipeline live in the `gwrep` crate.
#![no_std]
// `!(x > 0.0)` is deliberate: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(test)]
extern crate std;

mod error;
pub mod sum;

pub mod credibility;
pub mod gate;
pub mod inflation;
pub mod meta;
pub mod power;
pub mod special;
pub mod sumstats;
pub mod winners_curse;

pub use error::{Error, Result};

/// Version of this crate, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
