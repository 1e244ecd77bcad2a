//! Executable memorization-capacity theory for single-layer multi-head attention.
//!
//! The crate is `no_std` (with `alloc`). It contains the dense numerics, the
//! attention forward pass, data-assumption checks, the constructive weight
//! synthesizer, closed-form capacity bounds and the gradient-training
//! experiments. File formats and the command-line interface live in the
//! `attn-memcap` crate.
#![no_std]

extern crate alloc;

pub mod assumptions;
pub mod bounds;
pub mod error;
pub mod experiments;
pub mod model;
pub mod numerics;
pub mod random;
pub mod synthesis;

pub use error::{Error, Result};

#[cfg(test)]
mod oracle;
