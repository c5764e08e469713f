use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::frame::{
    load_color_png, load_depth_png, read_intrinsics, save_color_png, save_depth_png,
    write_intrinsics, ColorMap, DepthMap,
};
use crate::geometry::{CameraIntrinsics, TriangleMesh};
use crate::ply::write_ply;

use super::corrupt::{corrupt_frame, CorruptionSpec};
use super::render::render_frame;
use super::scene::{generate_ground_truth, ground_truth_in_camera, SceneSpec};

/// Raw images for one time step.
#[derive(Clone, Debug)]
pub struct SourceFrame {
    /// What the engine sees (possibly corrupted).
    pub depth: DepthMap,
    pub color: ColorMap,
    /// Uncorrupted images, when they differ from the observed ones.
    pub clean: Option<(DepthMap, ColorMap)>,
    /// Ground-truth surface in camera coordinates.
    pub ground_truth: Option<TriangleMesh>,
}

impl SourceFrame {
    pub fn clean_images(&self) -> (&DepthMap, &ColorMap) {
        match &self.clean {
            Some((d, c)) => (d, c),
            None => (&self.depth, &self.color),
        }
    }
}

pub trait FrameSource: Sync {
    fn intrinsics(&self) -> &CameraIntrinsics;
    fn frame_count(&self) -> usize;
    fn frame(&self, t: usize) -> Result<SourceFrame>;
}

/// Renders a synthetic scene on demand and applies the corruption spec.
#[derive(Clone, Debug)]
pub struct SyntheticSource {
    pub scene: SceneSpec,
    pub corruption: CorruptionSpec,
    pub intrinsics: CameraIntrinsics,
}

impl SyntheticSource {
    pub fn new(
        scene: SceneSpec,
        corruption: CorruptionSpec,
        intrinsics: CameraIntrinsics,
    ) -> Result<Self> {
        scene.validate()?;
        intrinsics.validate()?;
        corruption.validate(intrinsics.width, intrinsics.height)?;
        Ok(Self {
            scene,
            corruption,
            intrinsics,
        })
    }

    /// Noiseless, unoccluded images of frame `t`.
    pub fn render_clean(&self, t: usize) -> Result<(DepthMap, ColorMap)> {
        let world = generate_ground_truth(&self.scene, t)?;
        Ok(render_frame(
            &world,
            &self.intrinsics,
            &self.scene.camera_pose(),
        ))
    }
}

impl FrameSource for SyntheticSource {
    fn intrinsics(&self) -> &CameraIntrinsics {
        &self.intrinsics
    }

    fn frame_count(&self) -> usize {
        self.scene.frames
    }

    fn frame(&self, t: usize) -> Result<SourceFrame> {
        if t >= self.scene.frames {
            return Err(Error::InvalidConfig(format!(
                "frame {t} is past the end of the {}-frame scene",
                self.scene.frames
            )));
        }
        let (depth, color) = self.render_clean(t)?;
        let ground_truth = Some(ground_truth_in_camera(&self.scene, t)?);
        if self.corruption.is_clean() {
            return Ok(SourceFrame {
                depth,
                color,
                clean: None,
                ground_truth,
            });
        }
        let (cd, cc) = corrupt_frame(&depth, &color, &self.corruption, t);
        Ok(SourceFrame {
            depth: cd,
            color: cc,
            clean: Some((depth, color)),
            ground_truth,
        })
    }
}

/// A recorded sequence: `depth_%05d.png`, `color_%05d.png` and `intrinsics.txt`.
#[derive(Clone, Debug)]
pub struct DiskSource {
    dir: PathBuf,
    intrinsics: CameraIntrinsics,
    frames: usize,
}

pub fn depth_file(t: usize) -> String {
    format!("depth_{t:05}.png")
}

pub fn color_file(t: usize) -> String {
    format!("color_{t:05}.png")
}

impl DiskSource {
    /// Opens a directory; the sequence runs from frame 0 up to the first missing depth image.
    pub fn open(dir: &Path) -> Result<Self> {
        let intrinsics = read_intrinsics(&dir.join("intrinsics.txt"))?;
        let frames = (0..)
            .take_while(|&t| dir.join(depth_file(t)).is_file())
            .count();
        if frames == 0 {
            return Err(Error::Parse {
                path: dir.to_path_buf(),
                message: "no depth_00000.png in directory".into(),
            });
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            intrinsics,
            frames,
        })
    }
}

impl FrameSource for DiskSource {
    fn intrinsics(&self) -> &CameraIntrinsics {
        &self.intrinsics
    }

    fn frame_count(&self) -> usize {
        self.frames
    }

    fn frame(&self, t: usize) -> Result<SourceFrame> {
        let depth = load_depth_png(&self.dir.join(depth_file(t)))?;
        let color_path = self.dir.join(color_file(t));
        let color = if color_path.is_file() {
            load_color_png(&color_path)?
        } else {
            ColorMap::filled(depth.width(), depth.height(), [128, 128, 128])
        };
        if (depth.width(), depth.height()) != (self.intrinsics.width, self.intrinsics.height) {
            return Err(Error::InvalidIntrinsics(format!(
                "frame {t} is {}x{} but the intrinsics say {}x{}",
                depth.width(),
                depth.height(),
                self.intrinsics.width,
                self.intrinsics.height
            )));
        }
        Ok(SourceFrame {
            depth,
            color,
            clean: None,
            ground_truth: None,
        })
    }
}

/// Dumps a source to disk in the recorded-sequence layout, plus `gt_%05d.ply` when available.
pub fn write_sequence(source: &dyn FrameSource, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_intrinsics(&dir.join("intrinsics.txt"), source.intrinsics())?;
    for t in 0..source.frame_count() {
        let f = source.frame(t)?;
        save_depth_png(&dir.join(depth_file(t)), &f.depth)?;
        save_color_png(&dir.join(color_file(t)), &f.color)?;
        if let Some(gt) = &f.ground_truth {
            write_ply(&dir.join(format!("gt_{t:05}.ply")), gt)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::corrupt::OcclusionBox;

    fn small_scene() -> SceneSpec {
        SceneSpec {
            frames: 3,
            ..SceneSpec::default()
        }
    }

    #[test]
    fn synthetic_frames_see_the_sheet() {
        let src = SyntheticSource::new(
            small_scene(),
            CorruptionSpec::default(),
            CameraIntrinsics::desk(),
        )
        .unwrap();
        let f = src.frame(0).unwrap();
        assert!(f.clean.is_none());
        assert!(f.depth.valid_count() > 5000);
        let gt = f.ground_truth.unwrap();
        assert!(gt.vertices.iter().all(|v| (v.z - 0.6).abs() < 1e-12));
        assert!(src.frame(3).is_err());
    }

    #[test]
    fn corrupted_source_keeps_the_clean_images() {
        let corruption = CorruptionSpec {
            occlusions: vec![OcclusionBox {
                u0: 0,
                v0: 0,
                u1: 320,
                v1: 240,
                first: 1,
                last: 1,
            }],
            ..CorruptionSpec::default()
        };
        let src =
            SyntheticSource::new(small_scene(), corruption, CameraIntrinsics::desk()).unwrap();
        let f = src.frame(1).unwrap();
        assert_eq!(f.depth.valid_count(), 0);
        assert!(f.clean_images().0.valid_count() > 5000);
        let bad = CorruptionSpec {
            occlusions: vec![OcclusionBox {
                u0: 0,
                v0: 0,
                u1: 321,
                v1: 240,
                first: 1,
                last: 1,
            }],
            ..CorruptionSpec::default()
        };
        assert!(SyntheticSource::new(small_scene(), bad, CameraIntrinsics::desk()).is_err());
    }

    #[test]
    fn disk_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let src = SyntheticSource::new(
            small_scene(),
            CorruptionSpec::default(),
            CameraIntrinsics::desk(),
        )
        .unwrap();
        write_sequence(&src, dir.path()).unwrap();
        let disk = DiskSource::open(dir.path()).unwrap();
        assert_eq!(disk.frame_count(), 3);
        assert_eq!(disk.intrinsics(), src.intrinsics());
        let (a, b) = (src.frame(2).unwrap(), disk.frame(2).unwrap());
        assert_eq!(a.color, b.color);
        for (x, y) in a.depth.raw().iter().zip(b.depth.raw()) {
            assert!((x - y).abs() <= 0.0005 + 1e-12);
        }
        assert!(dir.path().join("gt_00002.ply").is_file());
        assert!(DiskSource::open(&dir.path().join("missing")).is_err());
    }
}
