use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the shape-estimation engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),

    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),

    #[error("image dimensions differ: depth is {depth_width}x{depth_height}, color is {color_width}x{color_height}")]
    DimensionMismatch {
        depth_width: usize,
        depth_height: usize,
        color_width: usize,
        color_height: usize,
    },

    #[error("volume of {voxels} voxels needs {required} bytes, over the {budget} byte budget")]
    MemoryBudget {
        voxels: usize,
        required: usize,
        budget: usize,
    },

    #[error("blended normal collapsed (norm {0:e}); local rotations are degenerate")]
    DegenerateNormal(f64),

    #[error("diagonal block {block} of the normal equations is not invertible")]
    SingularBlock { block: usize },

    #[error("mesh is empty")]
    EmptyMesh,

    #[error("malformed mesh: {0}")]
    MalformedMesh(String),

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
