//! A from-scratch convolutional network for classifying crack-like surface
//! features, with training, transfer learning by head replacement, and
//! dataset tooling.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod layers;
pub mod net;
pub mod rng;
pub mod scalar;
mod simd;
pub mod tensor;
pub mod train;
pub mod verify;

pub use checkpoint::Checkpoint;
pub use data::{Dataset, Sample};
pub use error::{Error, Result};
pub use net::{Network, NetworkConfig};
pub use rng::Rng;
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use train::{MetricsRow, TrainConfig};
