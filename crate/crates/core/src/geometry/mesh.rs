use super::{RigidTransform, Vec3};
use crate::error::{Error, Result};

pub type Rgb = [u8; 3];

/// Indexed triangle mesh with per-vertex normals and colors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Vec3>,
    pub normals: Vec<Vec3>,
    pub colors: Vec<Rgb>,
    pub triangles: Vec<[u32; 3]>,
}

impl TriangleMesh {
    pub fn new(
        vertices: Vec<Vec3>,
        normals: Vec<Vec3>,
        colors: Vec<Rgb>,
        triangles: Vec<[u32; 3]>,
    ) -> Result<Self> {
        let mesh = Self {
            vertices,
            normals,
            colors,
            triangles,
        };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        if self.normals.len() != n || self.colors.len() != n {
            return Err(Error::MalformedMesh(format!(
                "{} vertices but {} normals and {} colors",
                n,
                self.normals.len(),
                self.colors.len()
            )));
        }
        if let Some((i, nrm)) = self
            .normals
            .iter()
            .enumerate()
            .find(|(_, v)| (v.norm() - 1.0).abs() > 1e-6)
        {
            return Err(Error::MalformedMesh(format!(
                "normal {i} has length {}",
                nrm.norm()
            )));
        }
        if let Some(t) = self
            .triangles
            .iter()
            .find(|t| t.iter().any(|&i| i as usize >= n))
        {
            return Err(Error::MalformedMesh(format!(
                "triangle {t:?} indexes past {n} vertices"
            )));
        }
        Ok(())
    }

    pub fn transformed(&self, t: &RigidTransform) -> TriangleMesh {
        TriangleMesh {
            vertices: self.vertices.iter().map(|v| t.apply(v)).collect(),
            normals: self.normals.iter().map(|n| t.apply_vector(n)).collect(),
            colors: self.colors.clone(),
            triangles: self.triangles.clone(),
        }
    }

    pub fn triangle(&self, i: usize) -> [Vec3; 3] {
        let [a, b, c] = self.triangles[i];
        [
            self.vertices[a as usize],
            self.vertices[b as usize],
            self.vertices[c as usize],
        ]
    }

    /// Axis-aligned bounds `(min, max)`, or `None` for an empty mesh.
    pub fn bounds(&self) -> Option<(Vec3, Vec3)> {
        let first = *self.vertices.first()?;
        Some(
            self.vertices
                .iter()
                .fold((first, first), |(lo, hi), v| (lo.inf(v), hi.sup(v))),
        )
    }
}

/// Closest point to `p` on triangle `(a, b, c)` (Ericson, Real-Time Collision Detection 5.1.5).
pub fn closest_point_on_triangle(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> Vec3 {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return a + ab * v;
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return a + ac * w;
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return b + (c - b) * w;
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    a + ab * v + ac * w
}

pub fn point_triangle_distance(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> f64 {
    (p - closest_point_on_triangle(p, a, b, c)).norm()
}
