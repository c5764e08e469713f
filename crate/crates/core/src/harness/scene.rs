use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Rgb, RigidTransform, TriangleMesh, Vec3};
use crate::ply::read_ply;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SceneKind {
    /// The sheet wraps onto a cylinder whose curvature ramps linearly over the sequence.
    BendingSheet,
    /// The sheet (or a loaded mesh) at fixed curvature translates by `velocity` every frame.
    RigidMotion,
    Static,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub kind: SceneKind,
    pub width: f64,
    pub height: f64,
    /// Quads along the width.
    pub segments_s: usize,
    /// Quads along the height.
    pub segments_y: usize,
    pub kappa_start: f64,
    pub kappa_end: f64,
    /// Curvature for the rigid-motion and static scenes.
    pub kappa: f64,
    /// World-space translation per frame (rigid-motion scene).
    pub velocity: [f64; 3],
    /// Replaces the sheet in the rigid-motion and static scenes.
    pub mesh_path: Option<PathBuf>,
    /// Camera center in world coordinates.
    pub camera_position: [f64; 3],
    /// Camera orientation as a rotation vector (camera-to-world).
    pub camera_rotation: [f64; 3],
    pub frames: usize,
    pub fps: f64,
    /// Side of the checkerboard squares printed on the sheet.
    pub checker_size: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            kind: SceneKind::BendingSheet,
            width: 0.3,
            height: 0.2,
            segments_s: 60,
            segments_y: 40,
            kappa_start: 0.0,
            kappa_end: 4.0,
            kappa: 0.0,
            velocity: [0.0; 3],
            mesh_path: None,
            camera_position: [0.15, 0.0, -0.6],
            camera_rotation: [0.0; 3],
            frames: 60,
            fps: 30.0,
            checker_size: 0.02,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::InvalidConfig(
                "scene needs at least one frame".into(),
            ));
        }
        if !(self.width > 0.0 && self.height > 0.0) || self.segments_s == 0 || self.segments_y == 0
        {
            return Err(Error::InvalidConfig(
                "sheet dimensions and tessellation must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Camera-to-world pose.
    pub fn camera_pose(&self) -> RigidTransform {
        let rv = Vec3::from(self.camera_rotation);
        let rotation = if rv.norm() > 0.0 {
            RigidTransform::from_axis_angle(rv, rv.norm()).rotation
        } else {
            RigidTransform::identity().rotation
        };
        RigidTransform::new(rotation, Vec3::from(self.camera_position))
    }

    /// Bend curvature at frame `t`.
    pub fn curvature(&self, t: usize) -> f64 {
        match self.kind {
            SceneKind::BendingSheet if self.frames > 1 => {
                self.kappa_start
                    + (self.kappa_end - self.kappa_start) * t as f64 / (self.frames - 1) as f64
            }
            SceneKind::BendingSheet => self.kappa_start,
            _ => self.kappa,
        }
    }

    /// Translation applied at frame `t` (world coordinates).
    pub fn offset(&self, t: usize) -> Vec3 {
        match self.kind {
            SceneKind::RigidMotion => Vec3::from(self.velocity) * t as f64,
            _ => Vec3::zeros(),
        }
    }
}

/// Maps arc coordinate `s` on a sheet bent with curvature `kappa` to `(x, z)` and the
/// camera-facing normal `(nx, nz)`.
pub fn wrap(s: f64, kappa: f64) -> ((f64, f64), (f64, f64)) {
    let a = kappa * s;
    let (x, z) = if kappa.abs() < 1e-12 {
        (s, 0.5 * kappa * s * s)
    } else {
        (a.sin() / kappa, (1.0 - a.cos()) / kappa)
    };
    ((x, z), (a.sin(), -a.cos()))
}

/// Sheet isometrically wrapped onto a cylinder of curvature `kappa`, in world coordinates.
pub fn bent_sheet(spec: &SceneSpec, kappa: f64) -> TriangleMesh {
    let (ns, ny) = (spec.segments_s, spec.segments_y);
    let mut mesh = TriangleMesh::default();
    for j in 0..=ny {
        let y = -spec.height / 2.0 + spec.height * j as f64 / ny as f64;
        for i in 0..=ns {
            let s = spec.width * i as f64 / ns as f64;
            let ((x, z), (nx, nz)) = wrap(s, kappa);
            mesh.vertices.push(Vec3::new(x, y, z));
            mesh.normals.push(Vec3::new(nx, 0.0, nz));
            mesh.colors
                .push(checker(s, y + spec.height / 2.0, spec.checker_size));
        }
    }
    let idx = |i: usize, j: usize| (j * (ns + 1) + i) as u32;
    for j in 0..ny {
        for i in 0..ns {
            // wound so that face normals agree with the camera-facing vertex normals
            mesh.triangles
                .push([idx(i, j), idx(i, j + 1), idx(i + 1, j)]);
            mesh.triangles
                .push([idx(i + 1, j), idx(i, j + 1), idx(i + 1, j + 1)]);
        }
    }
    mesh
}

fn checker(s: f64, y: f64, size: f64) -> Rgb {
    if ((s / size).floor() as i64 + (y / size).floor() as i64) % 2 == 0 {
        [230, 230, 230]
    } else {
        [40, 90, 200]
    }
}

/// Ground-truth object mesh at frame `t`, in world coordinates.
pub fn generate_ground_truth(spec: &SceneSpec, t: usize) -> Result<TriangleMesh> {
    let base = match (&spec.mesh_path, spec.kind) {
        (Some(path), SceneKind::RigidMotion | SceneKind::Static) => read_ply(path)?,
        _ => bent_sheet(spec, spec.curvature(t)),
    };
    let offset = spec.offset(t);
    Ok(if offset == Vec3::zeros() {
        base
    } else {
        base.transformed(&RigidTransform::from_translation(offset))
    })
}

/// Ground truth expressed in the camera (reference) frame.
pub fn ground_truth_in_camera(spec: &SceneSpec, t: usize) -> Result<TriangleMesh> {
    Ok(generate_ground_truth(spec, t)?.transformed(&spec.camera_pose().inverse()))
}
