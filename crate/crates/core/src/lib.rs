//! Training networks that contain query-only linear layers.
//!
//! A black-box layer is evaluated for real on the forward pass; its
//! parameters are updated from zeroth-order estimates, and gradients flow
//! upstream through a low-rank surrogate that is kept aligned with the
//! device by a projector-splitting update.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod hybridnet;
pub mod numlin;
pub mod photonics;
pub mod surrogate;
pub mod trainer;
pub mod zograd;

pub use checkpoint::{checkpoint_read, checkpoint_write, CheckpointError, Tensor};
pub use config::{RunConfig, TrainConfig};
pub use data::{Dataset, Generator};
pub use error::{Error, Result};
pub use hybridnet::{Network, NetworkSpec};
pub use numlin::{Matrix, RngStream};
pub use photonics::{BlackBoxLayer, KindName, LayerKind};
pub use surrogate::SurrogateModel;
pub use trainer::{QueryLedger, Trainer};
pub use zograd::{ZoConfig, ZoEstimate};
