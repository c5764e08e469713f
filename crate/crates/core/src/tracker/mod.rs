//! Frame-to-model alignment of the deformation graph: projective data
//! association, a point-to-plane data term with an as-rigid-as-possible
//! regularizer, and damped Gauss-Newton steps solved by block-Jacobi PCG.
//!
//! Unknown blocks are ordered node 0..K followed by the global rigid transform.
//! Every unknown is updated by left multiplication, `T ← exp(δ)·T`, with the twist
//! expressed about the block's pivot (see [`pivots`]).

mod solver;

use nalgebra::{Matrix3, SMatrix, SVector, Vector6};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::ObservationFrame;
use crate::geometry::{se3_exp, skew, RigidTransform, TriangleMesh, Twist, Vec3};
use crate::graph::{blend_point, warp_normal, warp_point, DeformationGraph, SkinningBinding};

pub use solver::{
    pcg_solve, pcg_solve_observed, BlockSparseSystem, PcgResult, PcgSettings, SystemBuilder,
};

const DAMPING_MIN: f64 = 1e-6;
const DAMPING_MAX: f64 = 1e6;
const MAX_RETRIES: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnergyParams {
    pub lambda_data: f64,
    pub lambda_reg: f64,
    pub max_corr_distance: f64,
    /// Radians.
    pub max_normal_angle: f64,
    pub gn_iterations: usize,
    pub pcg_max_iterations: usize,
    pub pcg_tolerance: f64,
    pub lm_damping_init: f64,
    /// Reject live pixels closer than this many pixels to an invalid pixel or the image border.
    pub edge_margin: usize,
}

impl Default for EnergyParams {
    fn default() -> Self {
        Self {
            lambda_data: 1.0,
            lambda_reg: 5.0,
            max_corr_distance: 0.10,
            max_normal_angle: 30f64.to_radians(),
            gn_iterations: 6,
            pcg_max_iterations: 100,
            pcg_tolerance: 1e-6,
            lm_damping_init: 1e-4,
            edge_margin: 4,
        }
    }
}

impl EnergyParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.lambda_data,
            self.lambda_reg,
            self.max_corr_distance,
            self.max_normal_angle,
            self.pcg_tolerance,
            self.lm_damping_init,
        ];
        if positive.iter().any(|v| !(*v > 0.0))
            || self.gn_iterations == 0
            || self.pcg_max_iterations == 0
        {
            return Err(Error::InvalidConfig(
                "tracker weights, thresholds and iteration counts must be positive".into(),
            ));
        }
        Ok(())
    }

    fn pcg(&self) -> PcgSettings {
        PcgSettings {
            max_iterations: self.pcg_max_iterations,
            tolerance: self.pcg_tolerance,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correspondence {
    pub vertex_index: usize,
    pub target: Vec3,
    pub normal: Vec3,
}

/// Live-frame target `(v_d, n_d)` for a live point and normal, if it passes the
/// validity, distance and normal-angle gates.
#[inline]
pub fn associate(
    v: &Vec3,
    n: &Vec3,
    frame: &ObservationFrame,
    params: &EnergyParams,
) -> Option<(Vec3, Vec3)> {
    let (u, px) = frame.intrinsics.project_to_pixel(v)?;
    let target = frame.vertex_map.get(u, px)?;
    let normal = frame.normal_map.get(u, px)?;
    if (v - target).norm() > params.max_corr_distance
        || n.dot(&normal) < params.max_normal_angle.cos()
    {
        return None;
    }
    if params.edge_margin > 0 && near_edge(frame, u, px, params.edge_margin) {
        return None;
    }
    Some((target, normal))
}

fn near_edge(frame: &ObservationFrame, u: usize, v: usize, margin: usize) -> bool {
    let (w, h) = (frame.depth.width(), frame.depth.height());
    if u < margin || v < margin || u + margin >= w || v + margin >= h {
        return true;
    }
    (v - margin..=v + margin)
        .any(|y| (u - margin..=u + margin).any(|x| frame.depth.get(x, y).is_none()))
}

/// Projective association of warped reference vertices with the live vertex and normal maps.
pub fn find_correspondences(
    mesh0: &TriangleMesh,
    bindings: &[SkinningBinding],
    graph: &DeformationGraph,
    frame: &ObservationFrame,
    params: &EnergyParams,
) -> Vec<Correspondence> {
    (0..mesh0.vertices.len())
        .into_par_iter()
        .filter_map(|m| {
            let b = &bindings[m];
            let v = warp_point(&mesh0.vertices[m], graph, b);
            // cheap projection test before the normal warp
            frame.intrinsics.project_to_pixel(&v)?;
            let n = warp_normal(&mesh0.normals[m], graph, b).ok()?;
            let (target, normal) = associate(&v, &n, frame, params)?;
            Some(Correspondence {
                vertex_index: m,
                target,
                normal,
            })
        })
        .collect()
}

/// Σ (n_dᵀ(ṽ_m − v_d))² with `warped[m]` the warped position of vertex m.
pub fn data_energy(correspondences: &[Correspondence], warped: &[Vec3]) -> f64 {
    correspondences
        .iter()
        .map(|c| c.normal.dot(&(warped[c.vertex_index] - c.target)).powi(2))
        .sum()
}

/// Σ_i Σ_{j∈N_i} ‖T_i g_i − T_j g_i‖² over directed neighbor pairs.
pub fn reg_energy(graph: &DeformationGraph) -> f64 {
    graph
        .nodes
        .iter()
        .map(|ni| {
            let a = ni.transform.apply(&ni.position);
            ni.neighbors
                .iter()
                .map(|&j| (a - graph.nodes[j].transform.apply(&ni.position)).norm_squared())
                .sum::<f64>()
        })
        .sum()
}

pub fn weighted_energy(data: f64, reg: f64, params: &EnergyParams) -> f64 {
    params.lambda_data * data + params.lambda_reg * reg
}

/// λ_data·E_data + λ_reg·E_reg at the given graph.
pub fn total_energy(
    graph: &DeformationGraph,
    mesh0: &TriangleMesh,
    bindings: &[SkinningBinding],
    correspondences: &[Correspondence],
    params: &EnergyParams,
) -> f64 {
    let data: f64 = correspondences
        .iter()
        .map(|c| {
            let v = warp_point(
                &mesh0.vertices[c.vertex_index],
                graph,
                &bindings[c.vertex_index],
            );
            c.normal.dot(&(v - c.target)).powi(2)
        })
        .sum();
    weighted_energy(data, reg_energy(graph), params)
}

/// `[−[p − c]× | I]`, the derivative of a twist increment about pivot `c` applied to `p`.
fn point_jacobian(p: &Vec3, c: &Vec3) -> SMatrix<f64, 3, 6> {
    let mut j = SMatrix::<f64, 3, 6>::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(&(p - c))));
    j.fixed_view_mut::<3, 3>(0, 3)
        .copy_from(&Matrix3::identity());
    j
}

/// Gauss-Newton normal equations of the total energy at `graph`, damped by `damping`.
pub fn linearize(
    graph: &DeformationGraph,
    mesh0: &TriangleMesh,
    bindings: &[SkinningBinding],
    correspondences: &[Correspondence],
    params: &EnergyParams,
    damping: f64,
) -> BlockSparseSystem {
    let k = graph.node_count();
    let rigid_block = k;
    let mut builder = SystemBuilder::new(k + 1);
    let (sd, sr) = (params.lambda_data.sqrt(), params.lambda_reg.sqrt());
    let rot = graph.rigid.rotation;
    let pivot = pivots(graph);

    let mut jac: Vec<(usize, SMatrix<f64, 1, 6>)> =
        Vec::with_capacity(crate::graph::MAX_SKIN_NODES + 1);
    for c in correspondences {
        let v0 = &mesh0.vertices[c.vertex_index];
        let b = &bindings[c.vertex_index];
        let warped = graph.rigid.apply(&blend_point(v0, graph, b));
        let r = SVector::<f64, 1>::new(sd * c.normal.dot(&(warped - c.target)));
        jac.clear();
        let n_local = rot.transpose() * c.normal;
        for (node, w) in b.iter() {
            let p = graph.nodes[node].transform.apply(v0);
            jac.push((
                node,
                n_local.transpose() * point_jacobian(&p, &pivot[node]) * (sd * w),
            ));
        }
        jac.push((
            rigid_block,
            c.normal.transpose() * point_jacobian(&warped, &pivot[rigid_block]) * sd,
        ));
        builder.add_residual(&r, &jac);
    }

    for (i, ni) in graph.nodes.iter().enumerate() {
        let a = ni.transform.apply(&ni.position);
        let ja = point_jacobian(&a, &pivot[i]) * sr;
        for &j in &ni.neighbors {
            let bpt = graph.nodes[j].transform.apply(&ni.position);
            let r = (a - bpt) * sr;
            builder.add_residual(&r, &[(i, ja), (j, -point_jacobian(&bpt, &pivot[j]) * sr)]);
        }
    }
    builder.build(damping)
}

/// Centre of each block's increment: a node's current image `T_i·g_i`, and for the rigid block
/// the mean of the rigidly moved node images.
pub fn pivots(graph: &DeformationGraph) -> Vec<Vec3> {
    let mut out: Vec<Vec3> = graph
        .nodes
        .iter()
        .map(|n| n.transform.apply(&n.position))
        .collect();
    let mean = if out.is_empty() {
        Vec3::zeros()
    } else {
        out.iter().sum::<Vec3>() / out.len() as f64
    };
    out.push(graph.rigid.apply(&mean));
    out
}

/// Applies `T ← exp(δ)·T` to every node (blocks 0..K) and the rigid transform (block K), with
/// each twist expressed about the block's pivot.
pub fn apply_update(graph: &DeformationGraph, delta: &[Vector6<f64>]) -> DeformationGraph {
    let mut out = graph.clone();
    let pivot = pivots(graph);
    let step = |t: &RigidTransform, d: &Vector6<f64>, c: &Vec3| {
        let inc = se3_exp(&Twist::from_vector(d));
        let about = RigidTransform::new(inc.rotation, inc.translation + c - inc.rotation * c);
        about.compose(t)
    };
    for ((node, d), c) in out.nodes.iter_mut().zip(delta).zip(&pivot) {
        node.transform = step(&node.transform, d, c);
    }
    out.rigid = step(
        &graph.rigid,
        &delta[graph.node_count()],
        &pivot[graph.node_count()],
    );
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationDiagnostics {
    pub correspondences: usize,
    pub energy_before: f64,
    /// Energy after the accepted step, or `energy_before` if every retry failed.
    pub energy_after: f64,
    pub accepted: bool,
    pub retries: usize,
    pub pcg_iterations: usize,
    pub pcg_residual: f64,
    pub damping: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrackDiagnostics {
    pub iterations: Vec<IterationDiagnostics>,
    /// No correspondence was found in any iteration.
    pub lost: bool,
}

impl TrackDiagnostics {
    /// Correspondences used by the last iteration.
    pub fn correspondences(&self) -> usize {
        self.iterations.last().map_or(0, |it| it.correspondences)
    }

    pub fn final_energy(&self) -> Option<f64> {
        self.iterations.last().map(|it| it.energy_after)
    }

    pub fn pcg_iterations(&self) -> usize {
        self.iterations.iter().map(|it| it.pcg_iterations).sum()
    }
}

/// Estimates the graph for `frame`, starting from `graph_prev`.
pub fn track_frame(
    graph_prev: &DeformationGraph,
    mesh0: &TriangleMesh,
    bindings: &[SkinningBinding],
    frame: &ObservationFrame,
    params: &EnergyParams,
) -> Result<(DeformationGraph, TrackDiagnostics)> {
    let mut graph = graph_prev.clone();
    let mut diag = TrackDiagnostics::default();
    let mut damping = params.lm_damping_init;
    let mut any = false;

    for _ in 0..params.gn_iterations {
        let corr = find_correspondences(mesh0, bindings, &graph, frame, params);
        if corr.is_empty() {
            break;
        }
        any = true;
        let e0 = total_energy(&graph, mesh0, bindings, &corr, params);
        let mut system = linearize(&graph, mesh0, bindings, &corr, params, damping);
        let mut it = IterationDiagnostics {
            correspondences: corr.len(),
            energy_before: e0,
            energy_after: e0,
            accepted: false,
            retries: 0,
            pcg_iterations: 0,
            pcg_residual: 0.0,
            damping,
        };
        for attempt in 0..=MAX_RETRIES {
            system.damping = damping;
            let sol = pcg_solve(&system, &params.pcg())?;
            it.pcg_iterations += sol.iterations;
            it.pcg_residual = sol.residual;
            it.retries = attempt;
            it.damping = damping;
            let candidate = apply_update(&graph, &sol.solution);
            let e1 = total_energy(&candidate, mesh0, bindings, &corr, params);
            if e1 < e0 {
                graph = candidate;
                it.energy_after = e1;
                it.accepted = true;
                damping = (damping * 0.5).max(DAMPING_MIN);
                break;
            }
            damping = (damping * 10.0).min(DAMPING_MAX);
        }
        let accepted = it.accepted;
        diag.iterations.push(it);
        if !accepted {
            break;
        }
    }
    if !any {
        diag.lost = true;
        return Ok((graph_prev.clone(), diag));
    }
    Ok((graph, diag))
}
