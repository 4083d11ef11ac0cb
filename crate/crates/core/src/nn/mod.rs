//! Small MLPs, Adam, and checkpoints.

mod adam;
mod checkpoint;
mod mlp;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use mlp::{sigmoid, softplus, Activation, Dense, ForwardCache, Gradients, Head, Mlp, MlpShape};
