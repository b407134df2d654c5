//! Brain-tumour subregion segmentation with a cascaded, densely connected 3D
//! U-net: preprocessing, network construction and training, coarse-to-fine
//! patch inference with flip test-time augmentation and ensembling, and
//! connected-component post-processing.

pub mod error;
pub mod inference;
pub mod io;
pub mod network;
pub mod objectives;
pub mod patches;
pub mod phantoms;
pub mod postprocess;
pub mod preprocess;
pub mod trainer;
mod resample;
pub mod volumes;

pub use error::{Error, Result};
pub use resample::resize_trilinear;
