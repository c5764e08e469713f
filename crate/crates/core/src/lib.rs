//! Model-free shape estimation for deforming surfaces.
//!
//! The engine tracks an embedded deformation graph against a stream of depth
//! frames and fuses the same frames into a TSDF volume living in the
//! coordinates of the first frame. Each processed frame yields a reference
//! mesh (extracted from the volume) and a live mesh (the reference mesh warped
//! by the current deformation).
//!
//! Module map:
//!
//! - [`geometry`]: rigid transforms, twists, the pinhole camera and triangle meshes.
//! - [`frame`]: depth/color images, bilateral filtering, vertex and normal maps.
//! - [`tsdf`]: the reference volume, non-rigid projective fusion, marching cubes.
//! - [`graph`]: node sampling, skinning and the blending warp.
//! - [`tracker`]: the alignment energy, Gauss-Newton linearization and the PCG solver.
//! - [`harness`]: synthetic scenes, a ray-cast renderer, corruption, metrics and the pipeline.

pub mod error;
pub mod frame;
pub mod geometry;
pub mod graph;
pub mod harness;
pub mod ply;
pub mod tracker;
pub mod tsdf;

pub use error::{Error, Result};
