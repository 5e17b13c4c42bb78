//! Variational simulation of dissipative spin chains with a neural density
//! matrix, plus a dense exact reference for small systems.

pub mod error;
pub mod model;
pub mod ndm;
pub mod sampler;
pub mod estimators;
pub mod exact;
pub mod tdvp;

pub use error::{NdmError, Result};
pub use model::{Boundary, DoubledConfig, LindbladModel, OperatorTerm, SpinConfig};
pub use ndm::{NdmParams, ParamLayout, ParamVector};
