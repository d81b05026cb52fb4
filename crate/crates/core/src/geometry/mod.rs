//! Shared math: rotations, pinhole projection, silhouette rasterization,
//! mask overlap scores and similarity alignment.

mod camera;
mod mask;
mod procrustes;
mod raster;
mod so3;

use thiserror::Error;

pub use camera::{project_points, CameraIntrinsics, MIN_DEPTH};
pub use mask::{dice, iou, SilhouetteMask};
pub use procrustes::{
    nn_alignment, nn_mean_distance, nn_vertex_error, procrustes_align, PointIndex, Similarity,
};
pub use raster::rasterize_silhouette;
pub use so3::{
    aa_to_matrix, canonical_aa, geodesic_distance, matrix_to_aa, nearest_representative,
    so3_geodesic_blend,
};
pub(crate) use so3::rotation_log;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("matrix is not a proper rotation (deviation {0:e})")]
    NotARotation(f64),
    #[error("point {index} is at or behind the camera plane (z = {z})")]
    BehindCamera { index: usize, z: f64 },
    #[error("zero-size raster")]
    EmptyRaster,
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("degenerate point set: {0}")]
    Degenerate(String),
    #[error("empty point cloud")]
    EmptyCloud,
    #[error("PGM: {0}")]
    Pgm(String),
    #[error("{0}: {1}")]
    Io(String, #[source] std::io::Error),
}
