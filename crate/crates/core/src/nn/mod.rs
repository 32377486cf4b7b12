//! Parameterized layers over the autodiff tape, plus checkpoint storage.

mod checkpoint;
mod graph;
mod init;
mod layers;

pub use checkpoint::{Checkpoint, Record, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use graph::Graph;
pub use init::glorot_uniform;
pub use layers::{upsample_factor, Conv2d, Linear, LstmState, LstmUnit};
