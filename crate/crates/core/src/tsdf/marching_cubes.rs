use std::collections::HashMap;

use super::tables::TRI_TABLE;
use super::TsdfVolume;
use crate::geometry::{Rgb, TriangleMesh, Vec3};

/// Corner offsets, numbered as in the case table.
const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

/// Corner pairs joined by each of the 12 cube edges.
const EDGES: [[usize; 2]; 12] = [
    [0, 1],
    [1, 2],
    [2, 3],
    [3, 0],
    [4, 5],
    [5, 6],
    [6, 7],
    [7, 4],
    [0, 4],
    [1, 5],
    [2, 6],
    [3, 7],
];

/// Triangulates the zero level set over cells whose eight corners are all observed.
/// Vertices are shared between adjacent cells; normals follow +∇𝒟, pointing into free space.
pub fn extract_reference_mesh(vol: &TsdfVolume) -> TriangleMesh {
    let r = vol.resolution();
    let mut mesh = TriangleMesh::default();
    let mut welded: HashMap<(usize, u8), u32> = HashMap::new();

    for z in 0..r - 1 {
        for y in 0..r - 1 {
            for x in 0..r - 1 {
                if !vol.block_occupied(x, y, z) {
                    continue;
                }
                let mut values = [0.0; 8];
                let mut observed = true;
                let mut case = 0usize;
                for (c, off) in CORNERS.iter().enumerate() {
                    let (cx, cy, cz) = (x + off[0], y + off[1], z + off[2]);
                    if vol.weight(cx, cy, cz) <= 0.0 {
                        observed = false;
                        break;
                    }
                    values[c] = vol.tsdf(cx, cy, cz);
                    if values[c] < 0.0 {
                        case |= 1 << c;
                    }
                }
                if !observed || case == 0 || case == 255 {
                    continue;
                }
                let row = &TRI_TABLE[case];
                for tri in row.chunks(3).take_while(|t| t[0] >= 0) {
                    let mut ids = [0u32; 3];
                    for (slot, &e) in tri.iter().enumerate() {
                        let [a, b] = EDGES[e as usize];
                        let (lo, hi) = if CORNERS[a] < CORNERS[b] {
                            (a, b)
                        } else {
                            (b, a)
                        };
                        let axis = (0..3)
                            .find(|&k| CORNERS[lo][k] != CORNERS[hi][k])
                            .expect("edge spans one axis");
                        let lo_voxel = [x + CORNERS[lo][0], y + CORNERS[lo][1], z + CORNERS[lo][2]];
                        let key = (vol.index(lo_voxel[0], lo_voxel[1], lo_voxel[2]), axis as u8);
                        ids[slot] = *welded.entry(key).or_insert_with(|| {
                            push_edge_vertex(vol, &mut mesh, lo_voxel, axis, values[lo], values[hi])
                        });
                    }
                    // the table winds counter-clockwise about the inward side
                    mesh.triangles.push([ids[0], ids[2], ids[1]]);
                }
            }
        }
    }
    mesh
}

fn push_edge_vertex(
    vol: &TsdfVolume,
    mesh: &mut TriangleMesh,
    lo: [usize; 3],
    axis: usize,
    d0: f64,
    d1: f64,
) -> u32 {
    let mut hi = lo;
    hi[axis] += 1;
    let t = if d0 == d1 { 0.5 } else { d0 / (d0 - d1) };
    let p0 = vol.voxel_center(lo[0], lo[1], lo[2]);
    let p1 = vol.voxel_center(hi[0], hi[1], hi[2]);
    let g = gradient(vol, lo) * (1.0 - t) + gradient(vol, hi) * t;
    let normal = if g.norm() > 0.0 {
        g.normalize()
    } else {
        // flat neighborhood: fall back to the edge direction toward the positive side
        let dir = (p1 - p0).normalize();
        if d1 >= d0 {
            dir
        } else {
            -dir
        }
    };
    let c0 = vol.color(lo[0], lo[1], lo[2]);
    let c1 = vol.color(hi[0], hi[1], hi[2]);
    let color: Rgb =
        std::array::from_fn(|k| (c0[k] as f64 * (1.0 - t) + c1[k] as f64 * t).round() as u8);
    mesh.vertices.push(p0 + (p1 - p0) * t);
    mesh.normals.push(normal);
    mesh.colors.push(color);
    (mesh.vertices.len() - 1) as u32
}

/// Central-difference gradient of 𝒟, one-sided on the volume boundary.
fn gradient(vol: &TsdfVolume, p: [usize; 3]) -> Vec3 {
    let r = vol.resolution();
    let mut g = Vec3::zeros();
    for axis in 0..3 {
        let mut lo = p;
        let mut hi = p;
        if p[axis] > 0 {
            lo[axis] -= 1;
        }
        if p[axis] + 1 < r {
            hi[axis] += 1;
        }
        let span = (hi[axis] - lo[axis]) as f64 * vol.voxel_size();
        g[axis] = (vol.tsdf(hi[0], hi[1], hi[2]) - vol.tsdf(lo[0], lo[1], lo[2])) / span;
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tsdf::{create_volume, VolumeConfig};
    use std::collections::HashMap as Map;

    fn sphere_volume(radius: f64, resolution: usize) -> TsdfVolume {
        let cfg = VolumeConfig::centered(Vec3::new(0.0, 0.0, 0.5), 0.32, resolution);
        let mut vol = create_volume(VolumeConfig {
            tau: 4.0 * cfg.voxel_size(),
            ..cfg
        })
        .unwrap();
        let center = Vec3::new(0.0, 0.0, 0.5);
        vol.fill_with(|p| ((p - center).norm() - radius, [255, 0, 0]));
        vol
    }

    #[test]
    fn unobserved_volume_is_empty() {
        let vol = create_volume(VolumeConfig::centered(Vec3::zeros(), 0.08, 16)).unwrap();
        let mesh = extract_reference_mesh(&vol);
        assert!(mesh.is_empty());
        assert!(mesh.triangles.is_empty());
    }

    #[test]
    fn sphere_vertices_lie_on_the_sphere() {
        let vol = sphere_volume(0.1, 64);
        let mesh = extract_reference_mesh(&vol);
        mesh.validate().unwrap();
        assert!(mesh.triangles.len() > 1000);
        let center = Vec3::new(0.0, 0.0, 0.5);
        let worst = mesh
            .vertices
            .iter()
            .map(|v| ((v - center).norm() - 0.1).abs())
            .fold(0.0, f64::max);
        assert!(worst < vol.voxel_size(), "max radius error {worst}");
        for (v, n) in mesh.vertices.iter().zip(&mesh.normals) {
            let radial = (v - center).normalize();
            assert!(n.dot(&radial) > 0.99);
        }
    }

    #[test]
    fn plane_is_exact_with_consistent_winding() {
        let cfg = VolumeConfig::centered(Vec3::new(0.0, 0.0, 0.5), 0.16, 32);
        let mut vol = create_volume(VolumeConfig {
            tau: 3.0 * cfg.voxel_size(),
            ..cfg
        })
        .unwrap();
        let n = Vec3::new(0.3, -0.2, -1.0).normalize();
        let p0 = Vec3::new(0.001, 0.002, 0.503);
        vol.fill_with(|p| ((p - p0).dot(&n), [0, 128, 0]));
        let mesh = extract_reference_mesh(&vol);
        assert!(!mesh.triangles.is_empty());
        let vs = vol.voxel_size();
        for (v, vn) in mesh.vertices.iter().zip(&mesh.normals) {
            assert!((v - p0).dot(&n).abs() <= 0.1 * vs);
            assert!(vn.dot(&n) >= 1f64.to_radians().cos());
        }
        for t in 0..mesh.triangles.len() {
            let [a, b, c] = mesh.triangle(t);
            let face = (b - a).cross(&(c - a));
            if face.norm() > 1e-12 {
                assert!(face.dot(&n) > 0.0, "triangle {t} wound against the normal");
            }
        }
        assert!(mesh.colors.iter().all(|&c| c == [0, 128, 0]));
    }

    #[test]
    fn closed_surface_is_watertight_and_shares_vertices() {
        let vol = sphere_volume(0.08, 48);
        let mesh = extract_reference_mesh(&vol);
        let mut edges: Map<(u32, u32), usize> = Map::new();
        for t in &mesh.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *edges.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        assert!(
            edges.values().all(|&c| c == 2),
            "open or non-manifold edges present"
        );
        let mut positions: Vec<[u64; 3]> = mesh
            .vertices
            .iter()
            .map(|v| [v.x.to_bits(), v.y.to_bits(), v.z.to_bits()])
            .collect();
        positions.sort();
        positions.dedup();
        assert_eq!(positions.len(), mesh.vertices.len());
    }

    #[test]
    fn unobserved_corners_block_cells() {
        let cfg = VolumeConfig::centered(Vec3::zeros(), 0.08, 16);
        let mut vol = create_volume(VolumeConfig {
            tau: 2.0 * cfg.voxel_size(),
            ..cfg
        })
        .unwrap();
        let u = |d| crate::tsdf::VoxelUpdate {
            d,
            c: [9, 9, 9],
            omega: 1.0,
        };
        // one cell with a single negative corner, then the same cell with a corner missing
        for (i, off) in CORNERS.iter().enumerate() {
            vol.integrate_voxel(
                4 + off[0],
                4 + off[1],
                4 + off[2],
                &u(if i == 0 { -0.5 } else { 0.5 }),
            );
        }
        let mesh = extract_reference_mesh(&vol);
        assert_eq!(mesh.triangles.len(), 1);
        assert_eq!(mesh.vertices.len(), 3);
        let mut partial = create_volume(vol.config().clone()).unwrap();
        for (i, off) in CORNERS.iter().enumerate().take(7) {
            partial.integrate_voxel(
                4 + off[0],
                4 + off[1],
                4 + off[2],
                &u(if i == 0 { -0.5 } else { 0.5 }),
            );
        }
        assert!(extract_reference_mesh(&partial).is_empty());
    }

    #[test]
    fn colors_interpolate_along_edges() {
        let cfg = VolumeConfig::centered(Vec3::zeros(), 0.08, 16);
        let mut vol = create_volume(VolumeConfig {
            tau: 2.0 * cfg.voxel_size(),
            ..cfg
        })
        .unwrap();
        for (i, off) in CORNERS.iter().enumerate() {
            let (d, c) = if i == 0 {
                (-0.25, [0, 0, 0])
            } else {
                (0.75, [200, 100, 40])
            };
            vol.integrate_voxel(
                4 + off[0],
                4 + off[1],
                4 + off[2],
                &crate::tsdf::VoxelUpdate { d, c, omega: 1.0 },
            );
        }
        let mesh = extract_reference_mesh(&vol);
        // t = 0.25 along each edge out of corner 0
        assert!(mesh.colors.iter().all(|&c| c == [50, 25, 10]));
        let base = vol.voxel_center(4, 4, 4);
        for v in &mesh.vertices {
            assert!(((v - base).norm() - 0.25 * vol.voxel_size()).abs() < 1e-12);
        }
    }
}
