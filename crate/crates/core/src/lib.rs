//! Coarse-to-fine multi-granularity feature networks and asynchronous
//! two-stream fusion for action recognition, trained from scratch on
//! synthetic two-stream sequences.

pub mod autodiff;
pub mod c2f;
pub mod data;
mod error;
pub mod fusion;
pub mod grouper;
pub mod harness;
pub mod nn;
pub mod trainer;

pub use error::{Error, Result};
