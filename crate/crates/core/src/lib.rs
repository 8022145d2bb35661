//! Learned image codec whose network structure is itself learned: a width
//! variant per inter-node edge and a parallel decoding order over latent
//! elements, selected per device budget, task and quality.

pub mod codec;
pub mod coder;
pub mod complexity;
pub mod control;
pub mod data;
pub mod entropy;
pub mod error;
pub mod eval;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod structure;
pub mod training;
pub mod transforms;

pub use control::{ControllerState, Task};
pub use error::{Error, Result};
pub use model::{Model, ModelConfig};
pub use structure::{EdgeId, StructureSample, TopologyField};
