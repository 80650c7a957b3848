//! Personalized federated learning with hierarchical SVD compression.
//!
//! The crate is organised bottom-up:
//!
//! * [`model`]: a small convolutional network with hand-written forward and
//!   backward passes, Adam, and the [`ParameterSet`] container.
//! * [`linalg`]: thin SVD used by the compression codec.
//! * [`hsvd`]: the three-tier low-rank codec plus the uncompressed head.
//! * [`collab`]: risk-matrix dynamics, gradient correction and the server's
//!   historical gradients.
//! * [`data`]: synthetic multi-class images and Dirichlet label skew.
//! * [`wire`]: byte-exact message encoding, so bandwidth is measured.
//! * [`fedsim`]: client/server state machines and the synchronous round loop.
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`). The aliases
//! below fix the in-memory precision to `f64`, which is what the simulator
//! uses; the wire always carries `f32`.

pub mod collab;
pub mod data;
mod error;
pub mod fedsim;
pub mod hsvd;
pub mod linalg;
pub mod model;
mod scalar;
pub mod wire;

pub use error::{Error, Result};
pub use scalar::Scalar;




pub use collab::{CollabConfig, RiskMatrix};
pub use fedsim::{ExperimentConfig, Mode, RoundMetrics};
pub use hsvd::{CompressedUpdate, EnergyConfig};
pub use model::{LayerKind, LayerSpec, ParameterSet, Part};

/// Parameters, gradients and optimizer moments in double precision.
pub type ParameterSetF64 = model::ParameterSet<f64>;
/// Single-precision parameter set (wire precision).
pub type ParameterSetF32 = model::ParameterSet<f32>;
pub type BatchF64 = model::Batch<f64>;
pub type OptimizerStateF64 = model::OptimizerState<f64>;




pub type CompressedUpdateF64 = hsvd::CompressedUpdate<f64>;
pub type RiskMatrixF64 = collab::RiskMatrix<f64>;
pub type DatasetF64 = data::Dataset<f64>;
pub type SimulationF64 = fedsim::Simulation<f64>;
