//! Model soups from collections of fine-tuned checkpoints.
//!
//! The crate covers the whole pipeline at desk scale: a synthetic ingredient
//! factory ([`finetune`]), a small MLP with an analytic backward pass
//! ([`model`]), a streaming checkpoint store with residency accounting
//! ([`params`]), the soup-construction algorithms ([`soup`]), and the
//! measurement harness ([`bench`]).

pub mod bench;
pub mod cli;
pub mod config;
pub mod error;
pub mod finetune;
pub mod model;
pub mod params;
pub mod seed;
pub mod soup;
pub mod verify;

pub use error::{Error, Result};

/// Formats a real with 17 significant digits, which round-trips every `f64`.
pub fn fmt_real(x: f64) -> String {
    format!("{x:.16e}")
}
