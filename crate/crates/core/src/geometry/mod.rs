//! Shared 3D types: rigid transforms with an exponential-map update chart,
//! the pinhole camera, and triangle meshes.

mod camera;
mod mesh;
mod transform;

pub use camera::CameraIntrinsics;
pub use mesh::{closest_point_on_triangle, point_triangle_distance, Rgb, TriangleMesh};
pub use transform::{
    orthonormalize, se3_exp, skew, Mat3, RigidTransform, Twist, Vec3, SMALL_ANGLE,
};
