//! On-disk frame formats: 16-bit millimeter depth PNGs, 8-bit RGB PNGs and a
//! key-value intrinsics file.

use std::fs;
use std::path::Path;

use image::{ImageBuffer, Luma, Rgb as ImgRgb};

use super::{ColorMap, DepthMap};
use crate::error::{Error, Result};
use crate::geometry::CameraIntrinsics;

/// Reads a single-channel 16-bit PNG holding millimeters; 0 is invalid.
pub fn load_depth_png(path: &Path) -> Result<DepthMap> {
    let img = image::open(path)?.into_luma16();
    let (w, h) = img.dimensions();
    let values = img.pixels().map(|p| p.0[0] as f64 * 1e-3).collect();
    DepthMap::new(w as usize, h as usize, values)
}

/// Writes depth rounded to whole millimeters. Depths that do not fit in 16 bits are written as invalid.
pub fn save_depth_png(path: &Path, depth: &DepthMap) -> Result<()> {
    let (w, h) = (depth.width(), depth.height());
    let buf: Vec<u16> = depth
        .raw()
        .iter()
        .map(|&d| {
            let mm = (d * 1e3).round();
            if d > 0.0 && mm <= u16::MAX as f64 {
                mm as u16
            } else {
                0
            }
        })
        .collect();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(w as u32, h as u32, buf).expect("buffer sized from the depth map");
    img.save(path)?;
    Ok(())
}

pub fn load_color_png(path: &Path) -> Result<ColorMap> {
    let img = image::open(path)?.into_rgb8();
    let (w, h) = img.dimensions();
    ColorMap::new(w as usize, h as usize, img.pixels().map(|p| p.0).collect())
}

pub fn save_color_png(path: &Path, color: &ColorMap) -> Result<()> {
    let buf: Vec<u8> = color
        .pixels()
        .iter()
        .flat_map(|c| c.iter().copied())
        .collect();
    let img: ImageBuffer<ImgRgb<u8>, Vec<u8>> =
        ImageBuffer::from_raw(color.width() as u32, color.height() as u32, buf)
            .expect("buffer sized from the color map");
    img.save(path)?;
    Ok(())
}

/// Parses `fx = .., fy = .., cx = .., cy = .., width = .., height = ..`.
pub fn read_intrinsics(path: &Path) -> Result<CameraIntrinsics> {
    let text = fs::read_to_string(path)?;
    let k: CameraIntrinsics = toml::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    k.validate()?;
    Ok(k)
}

pub fn write_intrinsics(path: &Path, k: &CameraIntrinsics) -> Result<()> {
    let text = toml::to_string(k).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_png_round_trip_is_millimeter_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("depth_00000.png");
        let d = DepthMap::from_fn(7, 5, |u, v| {
            (u != 3).then(|| 0.5 + 0.001 * (u + 10 * v) as f64)
        });
        save_depth_png(&path, &d).unwrap();
        let back = load_depth_png(&path).unwrap();
        assert_eq!(back.width(), 7);
        for v in 0..5 {
            for u in 0..7 {
                match (d.get(u, v), back.get(u, v)) {
                    (Some(a), Some(b)) => assert!((a - b).abs() < 1e-9),
                    (None, None) => {}
                    other => panic!("validity changed at ({u},{v}): {other:?}"),
                }
            }
        }
    }

    #[test]
    fn color_png_and_intrinsics_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = ColorMap::new(2, 2, vec![[1, 2, 3], [4, 5, 6], [7, 8, 9], [250, 0, 128]]).unwrap();
        let p = dir.path().join("color_00000.png");
        save_color_png(&p, &c).unwrap();
        assert_eq!(load_color_png(&p).unwrap(), c);

        let k = CameraIntrinsics::desk();
        let kp = dir.path().join("intrinsics.txt");
        write_intrinsics(&kp, &k).unwrap();
        assert_eq!(read_intrinsics(&kp).unwrap(), k);
    }

    #[test]
    fn intrinsics_parse_errors_name_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let kp = dir.path().join("intrinsics.txt");
        fs::write(&kp, "fx = 1.0\n").unwrap();
        match read_intrinsics(&kp) {
            Err(Error::Parse { path, .. }) => assert_eq!(path, kp),
            other => panic!("unexpected {other:?}"),
        }
    }
}
