use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use super::Vec3;
use crate::error::{Error, Result};

/// Pinhole intrinsics. Pixel `(i, j)` has its center at continuous coordinate `(i, j)`;
/// the camera looks down +Z and depth is the Z coordinate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// 320×240 desk-scale camera with a ~56° horizontal field of view.
    pub fn desk() -> Self {
        Self {
            fx: 300.0,
            fy: 300.0,
            cx: 160.0,
            cy: 120.0,
            width: 320,
            height: 240,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if !(self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64)
        {
            return Err(Error::InvalidIntrinsics(format!(
                "principal point ({}, {}) outside the {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Pinhole projection; `None` behind the camera or outside the image.
    pub fn project(&self, p: &Vec3) -> Option<Vector2<f64>> {
        if p.z <= 0.0 {
            return None;
        }
        let u = self.fx * p.x / p.z + self.cx;
        let v = self.fy * p.y / p.z + self.cy;
        self.pixel_of(u, v).map(|_| Vector2::new(u, v))
    }

    /// Nearest pixel to a continuous image coordinate, if it lies in the image.
    #[inline]
    pub fn pixel_of(&self, u: f64, v: f64) -> Option<(usize, usize)> {
        let (iu, iv) = ((u + 0.5).floor(), (v + 0.5).floor());
        if iu >= 0.0 && iv >= 0.0 && iu < self.width as f64 && iv < self.height as f64 {
            Some((iu as usize, iv as usize))
        } else {
            None
        }
    }

    /// Projects straight to the nearest pixel index.
    #[inline]
    pub fn project_to_pixel(&self, p: &Vec3) -> Option<(usize, usize)> {
        if p.z <= 0.0 {
            return None;
        }
        self.pixel_of(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }

    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Result<Vec3> {
        if !(depth > 0.0) {
            return Err(Error::NonPositiveDepth(depth));
        }
        Ok(self.unproject_unchecked(u, v, depth))
    }

    #[inline]
    pub(crate) fn unproject_unchecked(&self, u: f64, v: f64, depth: f64) -> Vec3 {
        Vec3::new(
            (u - self.cx) * depth / self.fx,
            (v - self.cy) * depth / self.fy,
            depth,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k500() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 500.0, 160.0, 120.0, 320, 240).unwrap()
    }

    #[test]
    fn optical_axis_projects_to_principal_point() {
        let px = k500().project(&Vec3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!((px.x, px.y), (160.0, 120.0));
    }

    #[test]
    fn off_axis_projection() {
        let px = k500().project(&Vec3::new(0.1, 0.0, 1.0)).unwrap();
        assert!((px.x - 210.0).abs() < 1e-12);
    }

    #[test]
    fn behind_camera_and_out_of_frame_are_none() {
        assert!(k500().project(&Vec3::new(0.0, 0.0, -0.2)).is_none());
        assert!(k500().project(&Vec3::new(5.0, 0.0, 1.0)).is_none());
    }

    #[test]
    fn unproject_principal_point_and_hand_value() {
        let k = k500();
        assert_eq!(
            k.unproject(160.0, 120.0, 0.5).unwrap(),
            Vec3::new(0.0, 0.0, 0.5)
        );
        let p = k.unproject(210.0, 120.0, 1.0).unwrap();
        assert!((p - Vec3::new(0.1, 0.0, 1.0)).norm() < 1e-15);
    }

    #[test]
    fn unproject_rejects_non_positive_depth() {
        assert!(matches!(
            k500().unproject(10.0, 10.0, 0.0),
            Err(Error::NonPositiveDepth(_))
        ));
        assert!(k500().unproject(10.0, 10.0, -1.0).is_err());
    }

    #[test]
    fn round_trip_on_random_pixels() {
        let k = k500();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let (u, v) = (rng.gen_range(0.0..319.0), rng.gen_range(0.0..239.0));
            let z = rng.gen_range(0.2..3.0);
            let px = k.project(&k.unproject(u, v, z).unwrap()).unwrap();
            worst = worst.max((px.x - u).abs()).max((px.y - v).abs());
        }
        assert!(worst < 1e-9, "worst round-trip error {worst}");
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 4.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 0.0, 3.9, 4, 4).is_ok());
    }
}
