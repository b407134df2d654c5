//! The segmentation network, its differentiable kernels and checkpoints.

mod checkpoint;
mod model;
pub mod ops;
mod params;
mod tape;

pub use checkpoint::{load_checkpoint, save_checkpoint, ModelRole, FORMAT_VERSION};
pub use model::{build_network, Model, NetworkConfig, Predictor, RESIDUAL_BLOCKS_PER_LEVEL};
pub use params::{Param, ParamId, ParamKind, ParamStore};
pub use tape::{Graph, NodeId};
