//! Per-frame preprocessing: depth filtering, vertex map and normal map.

mod io;

pub use io::{
    load_color_png, load_depth_png, read_intrinsics, save_color_png, save_depth_png,
    write_intrinsics,
};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Rgb, Vec3};

/// Dense per-pixel grid of optional values, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelMap<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<Option<T>>,
}

impl<T: Copy> PixelMap<T> {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![None; width * height],
        }
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> Option<T> {
        self.data[v * self.width + u]
    }

    pub fn present_count(&self) -> usize {
        self.data.iter().filter(|p| p.is_some()).count()
    }
}

pub type VertexMap = PixelMap<Vec3>;
pub type NormalMap = PixelMap<Vec3>;

/// Depth image in meters. Invalid pixels are stored as `0.0` and read back as `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl DepthMap {
    /// Builds a depth map; non-finite and non-positive values become invalid.
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::InvalidConfig(format!(
                "depth buffer has {} values for a {width}x{height} image",
                values.len()
            )));
        }
        let values = values
            .into_iter()
            .map(|d| if d.is_finite() && d > 0.0 { d } else { 0.0 })
            .collect();
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn invalid(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![0.0; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> Option<f64>) -> Self {
        let mut values = Vec::with_capacity(width * height);
        for v in 0..height {
            for u in 0..width {
                values.push(f(u, v).filter(|d| d.is_finite() && *d > 0.0).unwrap_or(0.0));
            }
        }
        Self {
            width,
            height,
            values,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> Option<f64> {
        let d = self.values[v * self.width + u];
        (d > 0.0).then_some(d)
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, depth: Option<f64>) {
        self.values[v * self.width + u] =
            depth.filter(|d| d.is_finite() && *d > 0.0).unwrap_or(0.0);
    }

    pub fn is_valid(&self, u: usize, v: usize) -> bool {
        self.values[v * self.width + u] > 0.0
    }

    pub fn valid_count(&self) -> usize {
        self.values.iter().filter(|&&d| d > 0.0).count()
    }

    /// Raw buffer, `0.0` marking invalid pixels.
    pub fn raw(&self) -> &[f64] {
        &self.values
    }

    /// Invalidates every depth beyond `depth_max`.
    pub fn clamp_range(mut self, depth_max: f64) -> Self {
        for d in &mut self.values {
            if *d > depth_max {
                *d = 0.0;
            }
        }
        self
    }
}

/// RGB image paired with a depth map.
#[derive(Clone, Debug, PartialEq)]
pub struct ColorMap {
    width: usize,
    height: usize,
    pixels: Vec<Rgb>,
}

impl ColorMap {
    pub fn new(width: usize, height: usize, pixels: Vec<Rgb>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::InvalidConfig(format!(
                "color buffer has {} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, color: Rgb) -> Self {
        Self {
            width,
            height,
            pixels: vec![color; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> Rgb {
        self.pixels[v * self.width + u]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, c: Rgb) {
        self.pixels[v * self.width + u] = c;
    }

    pub fn pixels(&self) -> &[Rgb] {
        &self.pixels
    }
}

/// Depth preprocessing settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterParams {
    pub enabled: bool,
    /// Half-width of the filter window in pixels.
    pub radius: usize,
    pub spatial_sigma: f64,
    pub range_sigma: f64,
    /// Depths beyond this (meters) are treated as invalid.
    pub depth_max: f64,
}

impl Default for FilterParams {
    fn default() -> Self {
        Self {
            enabled: true,
            radius: 3,
            spatial_sigma: 2.0,
            range_sigma: 0.01,
            depth_max: 10.0,
        }
    }
}

/// One preprocessed sensor frame.
#[derive(Clone, Debug)]
pub struct ObservationFrame {
    pub index: usize,
    /// Filtered depth.
    pub depth: DepthMap,
    /// Input depth after range clamping, before filtering.
    pub raw_depth: DepthMap,
    pub color: ColorMap,
    pub vertex_map: VertexMap,
    pub normal_map: NormalMap,
    pub intrinsics: CameraIntrinsics,
}

/// Edge-preserving smoothing. Invalid pixels neither contribute nor get filled.
pub fn bilateral_filter(
    d: &DepthMap,
    spatial_sigma: f64,
    range_sigma: f64,
    radius: usize,
) -> DepthMap {
    let (w, h) = (d.width, d.height);
    let r = radius as isize;
    let spatial_coef = -0.5 / (spatial_sigma * spatial_sigma);
    let range_coef = -0.5 / (range_sigma * range_sigma);
    let kernel: Vec<f64> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| ((dx * dx + dy * dy) as f64 * spatial_coef).exp()))
        .collect();
    let side = (2 * r + 1) as usize;

    let mut out = vec![0.0; w * h];
    out.par_chunks_mut(w).enumerate().for_each(|(v, row)| {
        for (u, slot) in row.iter_mut().enumerate() {
            let center = d.values[v * w + u];
            if center <= 0.0 {
                continue;
            }
            let (mut acc, mut wsum) = (0.0, 0.0);
            for dy in -r..=r {
                let y = v as isize + dy;
                if y < 0 || y >= h as isize {
                    continue;
                }
                for dx in -r..=r {
                    let x = u as isize + dx;
                    if x < 0 || x >= w as isize {
                        continue;
                    }
                    let q = d.values[y as usize * w + x as usize];
                    if q <= 0.0 {
                        continue;
                    }
                    let diff = q - center;
                    let weight = kernel[(dy + r) as usize * side + (dx + r) as usize]
                        * (diff * diff * range_coef).exp();
                    acc += weight * q;
                    wsum += weight;
                }
            }
            // the center pixel always contributes weight 1
            *slot = acc / wsum;
        }
    });
    DepthMap {
        width: w,
        height: h,
        values: out,
    }
}

pub fn compute_vertex_map(d: &DepthMap, k: &CameraIntrinsics) -> VertexMap {
    let w = d.width;
    let mut data = vec![None; w * d.height];
    data.par_chunks_mut(w).enumerate().for_each(|(v, row)| {
        for (u, slot) in row.iter_mut().enumerate() {
            if let Some(z) = d.get(u, v) {
                *slot = Some(k.unproject_unchecked(u as f64, v as f64, z));
            }
        }
    });
    PixelMap {
        width: w,
        height: d.height,
        data,
    }
}

/// Central-difference normals, oriented toward the camera. Border pixels and pixels
/// with an absent stencil neighbor get no normal.
pub fn compute_normal_map(vm: &VertexMap) -> NormalMap {
    let (w, h) = (vm.width, vm.height);
    let mut data = vec![None; w * h];
    if w < 3 || h < 3 {
        return PixelMap {
            width: w,
            height: h,
            data,
        };
    }
    data.par_chunks_mut(w).enumerate().for_each(|(v, row)| {
        if v == 0 || v + 1 == h {
            return;
        }
        for u in 1..w - 1 {
            let (Some(c), Some(l), Some(r), Some(up), Some(dn)) = (
                vm.get(u, v),
                vm.get(u - 1, v),
                vm.get(u + 1, v),
                vm.get(u, v - 1),
                vm.get(u, v + 1),
            ) else {
                continue;
            };
            let n = (r - l).cross(&(dn - up));
            let len = n.norm();
            if !(len > 0.0) {
                continue;
            }
            let mut n = n / len;
            let facing = n.dot(&c);
            if facing == 0.0 {
                continue;
            }
            if facing > 0.0 {
                n = -n;
            }
            row[u] = Some(n);
        }
    });
    PixelMap {
        width: w,
        height: h,
        data,
    }
}

/// Filters the raw depth and derives both feature maps.
pub fn build_frame(
    index: usize,
    depth_raw: &DepthMap,
    color: ColorMap,
    k: &CameraIntrinsics,
    params: &FilterParams,
) -> Result<ObservationFrame> {
    if depth_raw.width != color.width || depth_raw.height != color.height {
        return Err(Error::DimensionMismatch {
            depth_width: depth_raw.width,
            depth_height: depth_raw.height,
            color_width: color.width,
            color_height: color.height,
        });
    }
    if depth_raw.width != k.width || depth_raw.height != k.height {
        return Err(Error::InvalidIntrinsics(format!(
            "intrinsics describe {}x{} but the depth map is {}x{}",
            k.width, k.height, depth_raw.width, depth_raw.height
        )));
    }
    k.validate()?;
    let ranged = depth_raw.clone().clamp_range(params.depth_max);
    let depth = if params.enabled {
        bilateral_filter(
            &ranged,
            params.spatial_sigma,
            params.range_sigma,
            params.radius,
        )
    } else {
        ranged.clone()
    };
    let vertex_map = compute_vertex_map(&depth, k);
    let normal_map = compute_normal_map(&vertex_map);
    Ok(ObservationFrame {
        index,
        depth,
        raw_depth: ranged,
        color,
        vertex_map,
        normal_map,
        intrinsics: *k,
    })
}
