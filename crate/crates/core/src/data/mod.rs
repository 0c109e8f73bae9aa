//! Dataset parsers, checkpoints and image export.

pub mod checkpoint;
pub mod cifar;
mod dataset;
pub mod idx;
pub mod pgm;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use cifar::load_cifar10_bin;
pub use dataset::{Dataset, Split};
pub use idx::load_mnist_idx;
pub use pgm::dump_attention_pgm;
