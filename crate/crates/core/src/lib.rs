//! Video snapshot compressive imaging reconstruction with a dense deep
//! unfolding network: a sensing model, learned data and prior steps unrolled
//! over a fixed number of phases, training and evaluation tooling.

pub mod checkpoint;
pub mod data_module;
pub mod dfma;
pub mod error;
pub mod eval;
pub mod forward;
pub mod graph;
pub mod io;
pub mod kernels;
pub mod layers;
pub mod network;
pub mod prior;
pub mod tensor;
pub mod train;

pub use error::{Result, SciError};
pub use forward::{MaskSet, Measurement, NormalizedMeasurement, VideoBlock};
pub use network::{NetworkConfig, ParameterRegistry};
pub use tensor::{Scalar, Tensor};
