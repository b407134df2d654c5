use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid label value {value} at voxel {index:?} (expected one of 0, 1, 2, 4)")]
    InvalidLabel { value: i64, index: [usize; 3] },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("subregion masks are not nested (et ⊆ tc ⊆ wt violated)")]
    NotNested,

    #[error("volume has no nonzero voxel; cannot derive a brain region")]
    EmptyBrain,

    #[error("empty bounding box")]
    EmptyBoundingBox,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing modality file {}", .0.display())]
    MissingModality(PathBuf),

    #[error("{path}: {message}")]
    Nifti { path: PathBuf, message: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training aborted at epoch {epoch}: non-finite loss {loss}")]
    NonFiniteLoss { epoch: usize, loss: f64 },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("invalid phantom: {0}")]
    Phantom(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
