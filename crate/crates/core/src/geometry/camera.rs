use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use super::GeometryError;

/// Minimum depth for a point to count as in front of the camera.
pub const MIN_DEPTH: f64 = 1e-6;

/// Pinhole intrinsics plus raster size. Image y grows downward, camera
/// looks along +z.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<(), GeometryError> {
        let finite = [self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive and finite (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(GeometryError::EmptyRaster);
        }
        Ok(())
    }

    /// Intrinsics of the same camera sampled on a raster `factor` times
    /// coarser. Continuous image coordinates scale uniformly.
    pub fn downscaled(&self, factor: u32) -> Result<Self, GeometryError> {
        if factor == 0 {
            return Err(GeometryError::EmptyRaster);
        }
        let f = factor as f64;
        let width = self.width / factor;
        let height = self.height / factor;
        if width == 0 || height == 0 {
            return Err(GeometryError::EmptyRaster);
        }
        Ok(Self {
            fx: self.fx / f,
            fy: self.fy / f,
            cx: self.cx / f,
            cy: self.cy / f,
            width,
            height,
        })
    }

    #[inline]
    pub fn project(&self, p: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }
}

/// Projects camera-frame points to pixel coordinates.
pub fn project_points(
    points: &[Vector3<f64>],
    k: &CameraIntrinsics,
) -> Result<Vec<Vector2<f64>>, GeometryError> {
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            if !(p.z > MIN_DEPTH) {
                Err(GeometryError::BehindCamera { index: i, z: p.z })
            } else {
                Ok(k.project(p))
            }
        })
        .collect()
}
