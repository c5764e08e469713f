//! Embedded deformation graph: node sampling, neighbor construction, Gaussian
//! skinning and the blending warp from reference to live coordinates.
//!
//! A point `v` bound to nodes `S` with weights `w` is warped as
//! `T_rigid · Σ_k w_k T_k v`, every `T_k` acting on `v` directly (not about the
//! node position). Normals blend rotations only and are renormalized.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{orthonormalize, Mat3, RigidTransform, TriangleMesh, Vec3};

/// Upper bound on nodes per skinning binding.
pub const MAX_SKIN_NODES: usize = 8;

/// Below this every Gaussian weight counts as underflowed.
const WEIGHT_UNDERFLOW: f64 = 1e-30;

#[derive(Clone, Debug, PartialEq)]
pub struct GraphNode {
    /// Reference-frame position, fixed for the life of the node.
    pub position: Vec3,
    pub transform: RigidTransform,
    /// Gaussian influence radius σ.
    pub radius: f64,
    pub neighbors: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DeformationGraph {
    pub rigid: RigidTransform,
    pub nodes: Vec<GraphNode>,
}

/// Graph construction defaults.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraphParams {
    pub sampling_radius: f64,
    pub n_neighbors: usize,
    /// Nodes per skinning binding.
    pub skin_nodes: usize,
    /// Node radius σ; `None` uses the sampling radius.
    pub sigma: Option<f64>,
    /// Grow the graph over newly reconstructed geometry.
    pub extend: bool,
}

impl Default for GraphParams {
    fn default() -> Self {
        Self {
            sampling_radius: 0.025,
            n_neighbors: 4,
            skin_nodes: 4,
            sigma: None,
            extend: true,
        }
    }
}

impl GraphParams {
    pub fn sigma(&self) -> f64 {
        self.sigma.unwrap_or(self.sampling_radius)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sampling_radius > 0.0) || !(self.sigma() > 0.0) {
            return Err(Error::InvalidConfig(
                "graph sampling radius and sigma must be positive".into(),
            ));
        }
        if self.n_neighbors == 0 || self.skin_nodes == 0 || self.skin_nodes > MAX_SKIN_NODES {
            return Err(Error::InvalidConfig(format!(
                "need n_neighbors ≥ 1 and 1 ≤ skin_nodes ≤ {MAX_SKIN_NODES}"
            )));
        }
        Ok(())
    }
}

/// Normalized Gaussian weights binding a point to its nearest nodes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SkinningBinding {
    len: u8,
    nodes: [u32; MAX_SKIN_NODES],
    weights: [f64; MAX_SKIN_NODES],
}

impl SkinningBinding {
    pub fn empty() -> Self {
        Self {
            len: 0,
            nodes: [0; MAX_SKIN_NODES],
            weights: [0.0; MAX_SKIN_NODES],
        }
    }

    /// Builds a binding from explicit pairs, normalizing the weights.
    pub fn from_pairs(pairs: &[(usize, f64)]) -> Self {
        assert!(pairs.len() <= MAX_SKIN_NODES);
        let mut b = Self::empty();
        let total: f64 = pairs.iter().map(|p| p.1).sum();
        for (i, &(n, w)) in pairs.iter().enumerate() {
            b.nodes[i] = n as u32;
            b.weights[i] = w / total;
        }
        b.len = pairs.len() as u8;
        b
    }

    pub fn len(&self) -> usize {
        self.len as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn node_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.nodes[..self.len()].iter().map(|&n| n as usize)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights[..self.len()]
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.node_indices().zip(self.weights().iter().copied())
    }
}

/// Keeps the `k` smallest `(dist², index)` pairs, lower index first on ties.
struct NearestSet {
    k: usize,
    len: usize,
    items: [(f64, u32); MAX_SKIN_NODES],
}

impl NearestSet {
    fn new(k: usize) -> Self {
        Self {
            k: k.min(MAX_SKIN_NODES),
            len: 0,
            items: [(f64::INFINITY, u32::MAX); MAX_SKIN_NODES],
        }
    }

    #[inline]
    fn offer(&mut self, d2: f64, idx: u32) {
        let before = |a: (f64, u32), b: (f64, u32)| a.0 < b.0 || (a.0 == b.0 && a.1 < b.1);
        if self.len == self.k && !before((d2, idx), self.items[self.len - 1]) {
            return;
        }
        let mut pos = self.len.min(self.k - 1);
        if self.len < self.k {
            self.len += 1;
        }
        while pos > 0 && before((d2, idx), self.items[pos - 1]) {
            self.items[pos] = self.items[pos - 1];
            pos -= 1;
        }
        self.items[pos] = (d2, idx);
    }

    fn as_slice(&self) -> &[(f64, u32)] {
        &self.items[..self.len]
    }
}

impl DeformationGraph {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn positions(&self) -> Vec<Vec3> {
        self.nodes.iter().map(|n| n.position).collect()
    }

    /// Index of the closest node (lowest index on ties).
    pub fn nearest_node(&self, p: &Vec3) -> Option<usize> {
        let mut set = NearestSet::new(1);
        for (i, n) in self.nodes.iter().enumerate() {
            set.offer((n.position - p).norm_squared(), i as u32);
        }
        set.as_slice().first().map(|&(_, i)| i as usize)
    }

    /// Nodes that can be among the `k` nearest of some point in the box `[lo, hi]`,
    /// in increasing index order.
    pub fn skinning_candidates(&self, lo: &Vec3, hi: &Vec3, k: usize) -> Vec<u32> {
        let k = k.min(self.nodes.len());
        if k == 0 {
            return Vec::new();
        }
        let mut bounds: Vec<(f64, f64)> = Vec::with_capacity(self.nodes.len());
        for n in &self.nodes {
            let p = n.position;
            let mut dmin = 0.0;
            let mut dmax = 0.0;
            for a in 0..3 {
                let below = (lo[a] - p[a]).max(0.0);
                let above = (p[a] - hi[a]).max(0.0);
                let gap = below.max(above);
                dmin += gap * gap;
                let far = (p[a] - lo[a]).abs().max((hi[a] - p[a]).abs());
                dmax += far * far;
            }
            bounds.push((dmin, dmax));
        }
        let mut maxes: Vec<f64> = bounds.iter().map(|b| b.1).collect();
        let (_, kth, _) = maxes.select_nth_unstable_by(k - 1, |a, b| a.total_cmp(b));
        let cutoff = *kth;
        bounds
            .iter()
            .enumerate()
            .filter(|(_, b)| b.0 <= cutoff)
            .map(|(i, _)| i as u32)
            .collect()
    }
}

fn binding_from_nearest(
    graph: &DeformationGraph,
    v0: &Vec3,
    nearest: &NearestSet,
) -> SkinningBinding {
    let mut b = SkinningBinding::empty();
    let found = nearest.as_slice();
    if found.is_empty() {
        return b;
    }
    let mut max_w: f64 = 0.0;
    for (slot, &(_, idx)) in found.iter().enumerate() {
        let node = &graph.nodes[idx as usize];
        let d2 = (v0 - node.position).norm_squared();
        let w = (-d2 / (2.0 * node.radius * node.radius)).exp();
        b.nodes[slot] = idx;
        b.weights[slot] = w;
        max_w = max_w.max(w);
    }
    if max_w < WEIGHT_UNDERFLOW {
        b.nodes[0] = found[0].1;
        b.weights = [0.0; MAX_SKIN_NODES];
        b.weights[0] = 1.0;
        b.len = 1;
        return b;
    }
    b.len = found.len() as u8;
    let total: f64 = b.weights().iter().sum();
    for w in &mut b.weights[..found.len()] {
        *w /= total;
    }
    b
}

/// Gaussian skinning over the `k` nearest nodes (fewer if the graph is smaller).
pub fn compute_skinning(v0: &Vec3, graph: &DeformationGraph, k: usize) -> SkinningBinding {
    let mut nearest = NearestSet::new(k);
    for (i, n) in graph.nodes.iter().enumerate() {
        nearest.offer((n.position - v0).norm_squared(), i as u32);
    }
    binding_from_nearest(graph, v0, &nearest)
}

/// Same result as [`compute_skinning`] when `candidates` come from
/// [`DeformationGraph::skinning_candidates`] for a box containing `v0`.
pub fn compute_skinning_among(
    v0: &Vec3,
    graph: &DeformationGraph,
    k: usize,
    candidates: &[u32],
) -> SkinningBinding {
    let mut nearest = NearestSet::new(k);
    for &i in candidates {
        nearest.offer((graph.nodes[i as usize].position - v0).norm_squared(), i);
    }
    binding_from_nearest(graph, v0, &nearest)
}

pub fn compute_bindings(
    points: &[Vec3],
    graph: &DeformationGraph,
    k: usize,
) -> Vec<SkinningBinding> {
    use rayon::prelude::*;
    points
        .par_iter()
        .map(|p| compute_skinning(p, graph, k))
        .collect()
}

/// Blended node warp before the global rigid transform.
#[inline]
pub fn blend_point(v0: &Vec3, graph: &DeformationGraph, binding: &SkinningBinding) -> Vec3 {
    if binding.is_empty() {
        return *v0;
    }
    let mut acc = Vec3::zeros();
    for (k, w) in binding.iter() {
        acc += graph.nodes[k].transform.apply(v0) * w;
    }
    acc
}

#[inline]
pub fn warp_point(v0: &Vec3, graph: &DeformationGraph, binding: &SkinningBinding) -> Vec3 {
    graph.rigid.apply(&blend_point(v0, graph, binding))
}

pub fn warp_normal(n0: &Vec3, graph: &DeformationGraph, binding: &SkinningBinding) -> Result<Vec3> {
    let blended = if binding.is_empty() {
        *n0
    } else {
        binding.iter().fold(Vec3::zeros(), |acc, (k, w)| {
            acc + graph.nodes[k].transform.rotation * n0 * w
        })
    };
    let n = graph.rigid.rotation * blended;
    let len = n.norm();
    if len < 1e-9 {
        return Err(Error::DegenerateNormal(len));
    }
    Ok(n / len)
}

pub fn warp_mesh_with_bindings(
    mesh0: &TriangleMesh,
    graph: &DeformationGraph,
    bindings: &[SkinningBinding],
) -> Result<TriangleMesh> {
    let vertices = mesh0
        .vertices
        .iter()
        .zip(bindings)
        .map(|(v, b)| warp_point(v, graph, b))
        .collect();
    let normals = mesh0
        .normals
        .iter()
        .zip(bindings)
        .map(|(n, b)| warp_normal(n, graph, b))
        .collect::<Result<Vec<_>>>()?;
    Ok(TriangleMesh {
        vertices,
        normals,
        colors: mesh0.colors.clone(),
        triangles: mesh0.triangles.clone(),
    })
}

pub fn warp_mesh(mesh0: &TriangleMesh, graph: &DeformationGraph, k: usize) -> Result<TriangleMesh> {
    let bindings = compute_bindings(&mesh0.vertices, graph, k);
    warp_mesh_with_bindings(mesh0, graph, &bindings)
}

/// Uniform hash grid over points, for radius queries.
struct PointGrid {
    cell: f64,
    cells: HashMap<(i64, i64, i64), Vec<usize>>,
}

impl PointGrid {
    fn new(cell: f64) -> Self {
        Self {
            cell,
            cells: HashMap::new(),
        }
    }

    fn key(&self, p: &Vec3) -> (i64, i64, i64) {
        (
            (p.x / self.cell).floor() as i64,
            (p.y / self.cell).floor() as i64,
            (p.z / self.cell).floor() as i64,
        )
    }

    fn insert(&mut self, p: &Vec3, idx: usize) {
        let key = self.key(p);
        self.cells.entry(key).or_default().push(idx);
    }

    /// True if any stored point lies strictly closer than `radius` (≤ cell size).
    fn any_within(&self, p: &Vec3, radius: f64, points: &[Vec3]) -> bool {
        let (x, y, z) = self.key(p);
        let r2 = radius * radius;
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(list) = self.cells.get(&(x + dx, y + dy, z + dz)) {
                        if list.iter().any(|&i| (points[i] - p).norm_squared() < r2) {
                            return true;
                        }
                    }
                }
            }
        }
        false
    }
}

/// Greedy Poisson-disk subsampling of mesh vertices in index order.
pub fn sample_nodes(mesh: &TriangleMesh, sampling_radius: f64) -> Vec<Vec3> {
    assert!(sampling_radius > 0.0, "sampling radius must be positive");
    let mut nodes = Vec::new();
    let mut grid = PointGrid::new(sampling_radius);
    for v in &mesh.vertices {
        if !grid.any_within(v, sampling_radius, &nodes) {
            grid.insert(v, nodes.len());
            nodes.push(*v);
        }
    }
    nodes
}

/// Indices of the `n` nearest other points, ties to the lower index.
fn nearest_others(positions: &[Vec3], i: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<(f64, usize)> = positions
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(j, p)| ((p - positions[i]).norm_squared(), j))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    order.into_iter().take(n).map(|(_, j)| j).collect()
}

/// Graph over the given node positions with identity transforms.
pub fn build_graph(positions: &[Vec3], n_neighbors: usize, sigma: f64) -> DeformationGraph {
    let nodes = (0..positions.len())
        .map(|i| GraphNode {
            position: positions[i],
            transform: RigidTransform::identity(),
            radius: sigma,
            neighbors: nearest_others(positions, i, n_neighbors),
        })
        .collect();
    DeformationGraph {
        rigid: RigidTransform::identity(),
        nodes,
    }
}

/// Adds nodes over mesh regions not covered by the current graph. Existing nodes keep
/// their position, transform and radius; only neighbor sets may change.
pub fn extend_graph(
    graph: &DeformationGraph,
    mesh: &TriangleMesh,
    sampling_radius: f64,
    n_neighbors: usize,
    skin_nodes: usize,
) -> DeformationGraph {
    let mut positions = graph.positions();
    let mut grid = PointGrid::new(sampling_radius);
    for (i, p) in positions.iter().enumerate() {
        grid.insert(p, i);
    }
    let old_count = positions.len();
    for v in &mesh.vertices {
        if !grid.any_within(v, sampling_radius, &positions) {
            grid.insert(v, positions.len());
            positions.push(*v);
        }
    }
    if positions.len() == old_count {
        return graph.clone();
    }

    let mut out = graph.clone();
    for p in &positions[old_count..] {
        let (transform, radius) = if graph.is_empty() {
            (RigidTransform::identity(), sampling_radius)
        } else {
            let binding = compute_skinning(p, graph, skin_nodes);
            let radius = graph.nodes[graph.nearest_node(p).expect("non-empty graph")].radius;
            (blended_transform_at(p, graph, &binding), radius)
        };
        out.nodes.push(GraphNode {
            position: *p,
            transform,
            radius,
            neighbors: Vec::new(),
        });
    }
    for i in 0..positions.len() {
        let nn = nearest_others(&positions, i, n_neighbors);
        if out.nodes[i].neighbors != nn {
            out.nodes[i].neighbors = nn;
        }
    }
    out
}

/// Rigid transform agreeing with the blended warp at `p`: rotation is the projection of the
/// weighted rotation sum onto SO(3), translation chosen so that `T p` equals the blended point.
fn blended_transform_at(
    p: &Vec3,
    graph: &DeformationGraph,
    binding: &SkinningBinding,
) -> RigidTransform {
    let rsum = binding.iter().fold(Mat3::zeros(), |acc, (k, w)| {
        acc + graph.nodes[k].transform.rotation * w
    });
    let rotation = orthonormalize(&rsum);
    let target = blend_point(p, graph, binding);
    RigidTransform::new(rotation, target - rotation * p)
}
