use crate::frame::{ColorMap, DepthMap};
use crate::geometry::{CameraIntrinsics, Rgb, RigidTransform, TriangleMesh, Vec3};

/// Barycentric slack so rays through shared edges hit one of the two triangles.
const EDGE_EPS: f64 = 1e-12;

/// Ray-casts `mesh` (world coordinates) from a camera at `camera_pose` (camera-to-world).
/// Depth is the camera-frame z of the nearest hit; color interpolates the vertex colors.
pub fn render_frame(
    mesh: &TriangleMesh,
    k: &CameraIntrinsics,
    camera_pose: &RigidTransform,
) -> (DepthMap, ColorMap) {
    let (w, h) = (k.width, k.height);
    let mut depth = vec![f64::INFINITY; w * h];
    let mut color = vec![[0u8; 3]; w * h];
    let world_to_cam = camera_pose.inverse();
    let verts: Vec<Vec3> = mesh
        .vertices
        .iter()
        .map(|v| world_to_cam.apply(v))
        .collect();

    for tri in &mesh.triangles {
        let [a, b, c] = tri.map(|i| verts[i as usize]);
        let Some((u0, u1, v0, v1)) = pixel_bounds(k, &[a, b, c]) else {
            continue;
        };
        let e1 = b - a;
        let e2 = c - a;
        let normal = e1.cross(&e2);
        let plane = normal.dot(&a);
        for py in v0..=v1 {
            for px in u0..=u1 {
                let dir = Vec3::new((px as f64 - k.cx) / k.fx, (py as f64 - k.cy) / k.fy, 1.0);
                let Some((bu, bv)) = moller_trumbore(&dir, &a, &e1, &e2) else {
                    continue;
                };
                // depth from the plane equation: exact for fronto-parallel triangles
                let z = plane / normal.dot(&dir);
                let i = py * w + px;
                if z > 0.0 && z < depth[i] {
                    depth[i] = z;
                    color[i] = blend_color(
                        [
                            mesh.colors[tri[0] as usize],
                            mesh.colors[tri[1] as usize],
                            mesh.colors[tri[2] as usize],
                        ],
                        1.0 - bu - bv,
                        bu,
                        bv,
                    );
                }
            }
        }
    }
    let values = depth
        .into_iter()
        .map(|d| if d.is_finite() { d } else { 0.0 })
        .collect();
    (
        DepthMap::new(w, h, values).expect("buffer sized from the intrinsics"),
        ColorMap::new(w, h, color).expect("buffer sized from the intrinsics"),
    )
}

/// Inclusive pixel rectangle covered by the projected triangle, or `None` if it misses
/// the image. Triangles reaching behind the camera are tested against every pixel.
fn pixel_bounds(k: &CameraIntrinsics, pts: &[Vec3; 3]) -> Option<(usize, usize, usize, usize)> {
    if pts.iter().all(|p| p.z <= 0.0) {
        return None;
    }
    if pts.iter().any(|p| p.z <= 1e-9) {
        return Some((0, k.width - 1, 0, k.height - 1));
    }
    let (mut umin, mut umax, mut vmin, mut vmax) = (
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
    );
    for p in pts {
        let u = k.fx * p.x / p.z + k.cx;
        let v = k.fy * p.y / p.z + k.cy;
        umin = umin.min(u);
        umax = umax.max(u);
        vmin = vmin.min(v);
        vmax = vmax.max(v);
    }
    let lo_u = (umin - 1.0).ceil().max(0.0);
    let hi_u = (umax + 1.0).floor().min(k.width as f64 - 1.0);
    let lo_v = (vmin - 1.0).ceil().max(0.0);
    let hi_v = (vmax + 1.0).floor().min(k.height as f64 - 1.0);
    if lo_u > hi_u || lo_v > hi_v {
        return None;
    }
    Some((lo_u as usize, hi_u as usize, lo_v as usize, hi_v as usize))
}

/// Barycentric coordinates `(u, v)` of the hit of the ray from the origin along `dir`.
#[inline]
fn moller_trumbore(dir: &Vec3, a: &Vec3, e1: &Vec3, e2: &Vec3) -> Option<(f64, f64)> {
    let p = dir.cross(e2);
    let det = e1.dot(&p);
    if det.abs() < 1e-18 {
        return None;
    }
    let inv = 1.0 / det;
    let s = -a;
    let u = s.dot(&p) * inv;
    if !(-EDGE_EPS..=1.0 + EDGE_EPS).contains(&u) {
        return None;
    }
    let q = s.cross(e1);
    let v = dir.dot(&q) * inv;
    if v < -EDGE_EPS || u + v > 1.0 + EDGE_EPS {
        return None;
    }
    let t = e2.dot(&q) * inv;
    (t > 0.0).then_some((u, v))
}

fn blend_color(c: [Rgb; 3], w0: f64, w1: f64, w2: f64) -> Rgb {
    std::array::from_fn(|k| {
        (c[0][k] as f64 * w0 + c[1][k] as f64 * w1 + c[2][k] as f64 * w2)
            .round()
            .clamp(0.0, 255.0) as u8
    })
}
