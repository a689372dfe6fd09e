//! Dense matrices, seeded RNG and the binary tensor container.

pub mod container;
pub mod matrix;
pub mod rng;

pub use container::{write_atomic, Tensor, TensorContainer};
pub use matrix::Matrix;
pub use rng::{DetRng, Seed};
