use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::frame::ObservationFrame;
use crate::geometry::{point_triangle_distance, TriangleMesh, Vec3};
use crate::tracker::{associate, EnergyParams};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlignmentError {
    /// Σ (n_dᵀ(v − v_d))² over associated vertices, m².
    pub sum: f64,
    /// `sqrt(sum / count)`, m.
    pub rms: f64,
    pub count: usize,
}

/// Point-to-plane error of a live mesh against a frame under the tracker's association
/// rules. `None` when nothing associates.
pub fn alignment_error(
    live: &TriangleMesh,
    frame: &ObservationFrame,
    params: &EnergyParams,
) -> Option<AlignmentError> {
    let residuals: Vec<f64> = live
        .vertices
        .par_iter()
        .zip(&live.normals)
        .filter_map(|(v, n)| {
            associate(v, n, frame, params).map(|(vd, nd)| nd.dot(&(v - vd)).powi(2))
        })
        .collect();
    if residuals.is_empty() {
        return None;
    }
    let sum: f64 = residuals.iter().sum();
    Some(AlignmentError {
        sum,
        rms: (sum / residuals.len() as f64).sqrt(),
        count: residuals.len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfaceError {
    pub rms: f64,
    pub max: f64,
}

/// Exact distance to the closest triangle, by checking every triangle.
pub fn brute_force_distance(p: &Vec3, mesh: &TriangleMesh) -> f64 {
    (0..mesh.triangles.len())
        .map(|t| {
            let [a, b, c] = mesh.triangle(t);
            point_triangle_distance(p, &a, &b, &c)
        })
        .fold(f64::INFINITY, f64::min)
}

/// Uniform grid over triangle bounding boxes answering exact point-to-mesh distance queries.
pub struct MeshDistance<'a> {
    mesh: &'a TriangleMesh,
    origin: Vec3,
    cell: f64,
    dims: [i64; 3],
    cells: Vec<Vec<u32>>,
}

impl<'a> MeshDistance<'a> {
    pub fn new(mesh: &'a TriangleMesh) -> Result<Self> {
        if mesh.triangles.is_empty() {
            return Err(Error::EmptyMesh);
        }
        let (lo, hi) = mesh.bounds().ok_or(Error::EmptyMesh)?;
        let extent = hi - lo;
        let volume = extent.iter().map(|e| e.max(1e-6)).product::<f64>();
        // about two triangles per occupied cell for surface-like meshes
        let cell = (volume / (mesh.triangles.len() as f64).max(1.0))
            .cbrt()
            .max(extent.max() / 256.0)
            .max(1e-9);
        let dims: [i64; 3] =
            std::array::from_fn(|a| ((extent[a] / cell).floor() as i64 + 1).max(1));
        let mut grid = Self {
            mesh,
            origin: lo,
            cell,
            dims,
            cells: Vec::new(),
        };
        let mut cells = vec![Vec::new(); (dims[0] * dims[1] * dims[2]) as usize];
        for t in 0..mesh.triangles.len() {
            let [a, b, c] = mesh.triangle(t);
            let (tlo, thi) = (a.inf(&b).inf(&c), a.sup(&b).sup(&c));
            let (c0, c1) = (grid.clamped_cell(&tlo), grid.clamped_cell(&thi));
            for z in c0[2]..=c1[2] {
                for y in c0[1]..=c1[1] {
                    for x in c0[0]..=c1[0] {
                        cells[grid.flat([x, y, z])].push(t as u32);
                    }
                }
            }
        }
        grid.cells = cells;
        Ok(grid)
    }

    fn cell_of(&self, p: &Vec3) -> [i64; 3] {
        std::array::from_fn(|a| ((p[a] - self.origin[a]) / self.cell).floor() as i64)
    }

    fn clamped_cell(&self, p: &Vec3) -> [i64; 3] {
        let c = self.cell_of(p);
        std::array::from_fn(|a| c[a].clamp(0, self.dims[a] - 1))
    }

    fn flat(&self, c: [i64; 3]) -> usize {
        (c[0] + self.dims[0] * (c[1] + self.dims[1] * c[2])) as usize
    }

    /// Exact distance from `p` to the mesh surface.
    pub fn distance(&self, p: &Vec3) -> f64 {
        let home = self.cell_of(p);
        // Chebyshev ring beyond which no cell of the grid remains
        let last_ring = (0..3)
            .map(|a| (home[a]).abs().max((home[a] - (self.dims[a] - 1)).abs()))
            .max()
            .unwrap_or(0);
        let mut best = f64::INFINITY;
        for ring in 0..=last_ring {
            // every cell at ring r + 1 or beyond is at least r cells away from any point of the home cell
            if best <= (ring as f64 - 1.0) * self.cell * (1.0 - 1e-9) {
                break;
            }
            self.visit_ring(home, ring, |t| {
                let [a, b, c] = self.mesh.triangle(t as usize);
                best = best.min(point_triangle_distance(p, &a, &b, &c));
            });
        }
        best
    }

    fn visit_ring(&self, home: [i64; 3], ring: i64, mut f: impl FnMut(u32)) {
        let lo: [i64; 3] = std::array::from_fn(|a| (home[a] - ring).max(0));
        let hi: [i64; 3] = std::array::from_fn(|a| (home[a] + ring).min(self.dims[a] - 1));
        for z in lo[2]..=hi[2] {
            for y in lo[1]..=hi[1] {
                for x in lo[0]..=hi[0] {
                    let cheb = (x - home[0])
                        .abs()
                        .max((y - home[1]).abs())
                        .max((z - home[2]).abs());
                    if cheb != ring {
                        continue;
                    }
                    for &t in &self.cells[self.flat([x, y, z])] {
                        f(t);
                    }
                }
            }
        }
    }
}

/// RMS and maximum distance from the live mesh vertices to the ground-truth surface.
pub fn surface_error(live: &TriangleMesh, gt: &TriangleMesh) -> Result<SurfaceError> {
    if live.vertices.is_empty() {
        return Err(Error::EmptyMesh);
    }
    let index = MeshDistance::new(gt)?;
    let d: Vec<f64> = live
        .vertices
        .par_iter()
        .map(|v| index.distance(v))
        .collect();
    let sum_sq: f64 = d.iter().map(|x| x * x).sum();
    Ok(SurfaceError {
        rms: (sum_sq / d.len() as f64).sqrt(),
        max: d.iter().copied().fold(0.0, f64::max),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::{build_frame, ColorMap, DepthMap, FilterParams};
    use crate::geometry::CameraIntrinsics;
    use crate::harness::scene::{bent_sheet, SceneSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn plane_mesh(z: f64) -> TriangleMesh {
        let spec = SceneSpec {
            width: 0.2,
            height: 0.2,
            segments_s: 20,
            segments_y: 20,
            ..SceneSpec::default()
        };
        let mut m = bent_sheet(&spec, 0.0);
        for v in &mut m.vertices {
            *v += Vec3::new(-0.1, 0.0, z);
        }
        m
    }

    #[test]
    fn surface_error_of_identical_and_offset_planes() {
        let a = plane_mesh(0.6);
        let e = surface_error(&a, &a).unwrap();
        assert_eq!((e.rms, e.max), (0.0, 0.0));
        let b = plane_mesh(0.603);
        let e = surface_error(&b, &a).unwrap();
        assert!((e.rms - 0.003).abs() < 1e-12 && (e.max - 0.003).abs() < 1e-12);
        assert!(matches!(
            surface_error(&TriangleMesh::default(), &a),
            Err(Error::EmptyMesh)
        ));
        assert!(matches!(
            surface_error(&a, &TriangleMesh::default()),
            Err(Error::EmptyMesh)
        ));
    }

    #[test]
    fn grid_distance_matches_brute_force_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for trial in 0..5 {
            let mut gt = TriangleMesh::default();
            for _ in 0..300 {
                let base = Vec3::new(
                    rng.gen_range(-0.2..0.2),
                    rng.gen_range(-0.2..0.2),
                    rng.gen_range(0.4..0.8),
                );
                for _ in 0..3 {
                    gt.vertices.push(
                        base + Vec3::new(
                            rng.gen_range(-0.03..0.03),
                            rng.gen_range(-0.03..0.03),
                            rng.gen_range(-0.03..0.03),
                        ),
                    );
                    gt.normals.push(Vec3::z());
                    gt.colors.push([0; 3]);
                }
                let n = gt.vertices.len() as u32;
                gt.triangles.push([n - 3, n - 2, n - 1]);
            }
            let index = MeshDistance::new(&gt).unwrap();
            for _ in 0..400 {
                let p = Vec3::new(
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(0.0..1.2),
                );
                assert_eq!(
                    index.distance(&p),
                    brute_force_distance(&p, &gt),
                    "trial {trial} at {p:?}"
                );
            }
        }
        let sheet = bent_sheet(&SceneSpec::default(), 4.0);
        let index = MeshDistance::new(&sheet).unwrap();
        for _ in 0..400 {
            let p = Vec3::new(
                rng.gen_range(-0.1..0.4),
                rng.gen_range(-0.2..0.2),
                rng.gen_range(-0.1..0.3),
            );
            assert_eq!(index.distance(&p), brute_force_distance(&p, &sheet));
        }
    }

    fn plane_frame(z: f64) -> ObservationFrame {
        let k = CameraIntrinsics::new(300.0, 300.0, 80.0, 60.0, 160, 120).unwrap();
        let d = DepthMap::from_fn(160, 120, |_, _| Some(z));
        build_frame(
            0,
            &d,
            ColorMap::filled(160, 120, [0; 3]),
            &k,
            &FilterParams::default(),
        )
        .unwrap()
    }

    #[test]
    fn alignment_error_of_offset_plane() {
        let frame = plane_frame(0.6);
        let params = EnergyParams::default();
        let on = alignment_error(&plane_mesh(0.6), &frame, &params).unwrap();
        assert!(on.rms < 1e-9);
        let off = alignment_error(&plane_mesh(0.605), &frame, &params).unwrap();
        assert!((off.rms - 0.005).abs() < 0.02 * 0.005, "rms {}", off.rms);
        assert!((off.sum - off.count as f64 * 0.005f64.powi(2)).abs() < 1e-9);
        assert!(alignment_error(&plane_mesh(0.9), &frame, &params).is_none());
    }

    #[test]
    fn masked_pixels_drop_out_of_alignment() {
        let params = EnergyParams::default();
        let mesh = plane_mesh(0.6);
        let full = alignment_error(&mesh, &plane_frame(0.6), &params).unwrap();
        let k = CameraIntrinsics::new(300.0, 300.0, 80.0, 60.0, 160, 120).unwrap();
        let d = DepthMap::from_fn(160, 120, |u, _| (u >= 80).then_some(0.6));
        let half = build_frame(
            0,
            &d,
            ColorMap::filled(160, 120, [0; 3]),
            &k,
            &FilterParams::default(),
        )
        .unwrap();
        let masked = alignment_error(&mesh, &half, &params).unwrap();
        assert!(masked.count < full.count);
        for (v, n) in mesh.vertices.iter().zip(&mesh.normals) {
            if let Some((vd, _)) = associate(v, n, &half, &params) {
                assert!(k.project_to_pixel(&vd).unwrap().0 >= 80);
            }
        }
    }
}
