//! The reference volume: a dense TSDF grid with color and weight, fused
//! non-rigidly from live frames and triangulated with marching cubes.

mod marching_cubes;
mod tables;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{DepthMap, ObservationFrame};
use crate::geometry::{Rgb, Vec3};
use crate::graph::{compute_skinning, compute_skinning_among, warp_point, DeformationGraph};

pub use marching_cubes::extract_reference_mesh;

/// Voxels per side of an occupancy block.
pub const BLOCK: usize = 8;

/// Bytes of storage per voxel: tsdf (f64), weight (f32), color (3 × u8).
const BYTES_PER_VOXEL: usize = 8 + 4 + 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VolumeConfig {
    pub side_length: f64,
    pub resolution: usize,
    /// Reference-frame position of the center of voxel (0, 0, 0).
    pub origin: [f64; 3],
    pub tau: f64,
    pub omega_max: f64,
    pub default_new_weight: f64,
    /// Skip updates whose signed distance is below −τ.
    pub behind_surface_exclusion: bool,
    /// Read depth bilinearly at the projected position when the four surrounding pixels are
    /// valid and within τ of each other; otherwise at the nearest pixel.
    pub interpolate_depth: bool,
    /// Integrate the unfiltered depth; the filtered depth still drives tracking.
    pub fuse_raw_depth: bool,
    /// Nodes per voxel skinning binding.
    pub skin_nodes: usize,
    pub memory_budget_bytes: usize,
}

impl Default for VolumeConfig {
    fn default() -> Self {
        Self {
            side_length: 0.7,
            resolution: 512,
            origin: [-0.35, -0.35, 0.0],
            tau: 0.01,
            omega_max: 32.0,
            default_new_weight: 1.0,
            behind_surface_exclusion: true,
            interpolate_depth: true,
            fuse_raw_depth: true,
            skin_nodes: 4,
            memory_budget_bytes: 4 << 30,
        }
    }
}

impl VolumeConfig {
    pub fn voxel_size(&self) -> f64 {
        self.side_length / self.resolution as f64
    }

    pub fn voxel_count(&self) -> usize {
        self.resolution.pow(3)
    }

    pub fn origin(&self) -> Vec3 {
        Vec3::from(self.origin)
    }

    /// Cube centered at `center` with the given side and resolution.
    pub fn centered(center: Vec3, side_length: f64, resolution: usize) -> Self {
        let vs = side_length / resolution as f64;
        let origin = center - Vec3::repeat(side_length / 2.0 - vs / 2.0);
        Self {
            side_length,
            resolution,
            origin: origin.into(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution < 8 {
            return Err(Error::InvalidConfig(format!(
                "volume resolution {} is below 8",
                self.resolution
            )));
        }
        if !(self.side_length > 0.0) {
            return Err(Error::InvalidConfig(
                "volume side length must be positive".into(),
            ));
        }
        if !(self.tau >= self.voxel_size()) {
            return Err(Error::InvalidConfig(format!(
                "truncation {} m is smaller than the voxel size {} m",
                self.tau,
                self.voxel_size()
            )));
        }
        if !(self.default_new_weight > 0.0 && self.omega_max >= self.default_new_weight) {
            return Err(Error::InvalidConfig(format!(
                "need omega_max ({}) ≥ default_new_weight ({}) > 0",
                self.omega_max, self.default_new_weight
            )));
        }
        if self.skin_nodes == 0 || self.skin_nodes > crate::graph::MAX_SKIN_NODES {
            return Err(Error::InvalidConfig(format!(
                "voxel skin_nodes {} out of range",
                self.skin_nodes
            )));
        }
        let voxels = self
            .resolution
            .checked_pow(3)
            .ok_or_else(|| Error::InvalidConfig("volume resolution overflows".into()))?;
        let required = voxels.saturating_mul(BYTES_PER_VOXEL);
        if required > self.memory_budget_bytes {
            return Err(Error::MemoryBudget {
                voxels,
                required,
                budget: self.memory_budget_bytes,
            });
        }
        Ok(())
    }
}

/// One frame's contribution to a voxel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VoxelUpdate {
    pub d: f64,
    pub c: Rgb,
    pub omega: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FuseStats {
    pub updated: usize,
}

/// Dense TSDF grid, x fastest. Storage is zero-initialized; a voxel with Ω = 0 reads as 𝒟 = 1.
#[derive(Clone, Debug)]
pub struct TsdfVolume {
    config: VolumeConfig,
    tsdf: Vec<f64>,
    weight: Vec<f32>,
    color: Vec<Rgb>,
    /// Per-block flag: some voxel in the block has Ω > 0.
    occupied: Vec<bool>,
}

pub fn create_volume(cfg: VolumeConfig) -> Result<TsdfVolume> {
    cfg.validate()?;
    let n = cfg.voxel_count();
    let blocks = cfg.resolution.div_ceil(BLOCK).pow(3);
    Ok(TsdfVolume {
        tsdf: vec![0.0; n],
        weight: vec![0.0; n],
        color: vec![[0; 3]; n],
        occupied: vec![false; blocks],
        config: cfg,
    })
}

impl TsdfVolume {
    pub fn config(&self) -> &VolumeConfig {
        &self.config
    }

    pub fn resolution(&self) -> usize {
        self.config.resolution
    }

    pub fn voxel_size(&self) -> f64 {
        self.config.voxel_size()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        let r = self.config.resolution;
        x + r * (y + r * z)
    }

    #[inline]
    pub fn voxel_center(&self, x: usize, y: usize, z: usize) -> Vec3 {
        self.config.origin() + Vec3::new(x as f64, y as f64, z as f64) * self.voxel_size()
    }

    #[inline]
    pub fn tsdf(&self, x: usize, y: usize, z: usize) -> f64 {
        let i = self.index(x, y, z);
        if self.weight[i] > 0.0 {
            self.tsdf[i]
        } else {
            1.0
        }
    }

    #[inline]
    pub fn weight(&self, x: usize, y: usize, z: usize) -> f64 {
        self.weight[self.index(x, y, z)] as f64
    }

    #[inline]
    pub fn color(&self, x: usize, y: usize, z: usize) -> Rgb {
        self.color[self.index(x, y, z)]
    }

    /// Number of voxels with Ω > 0.
    pub fn observed_count(&self) -> usize {
        self.weight.par_iter().filter(|&&w| w > 0.0).count()
    }

    fn blocks_per_side(&self) -> usize {
        self.config.resolution.div_ceil(BLOCK)
    }

    #[inline]
    pub(crate) fn block_occupied(&self, x: usize, y: usize, z: usize) -> bool {
        let b = self.blocks_per_side();
        self.occupied[x / BLOCK + b * (y / BLOCK + b * (z / BLOCK))]
    }

    /// Returns every voxel to the unobserved state, keeping the allocation.
    pub fn reset(&mut self) {
        let nb = self.blocks_per_side();
        let r = self.config.resolution;
        for (b, occ) in self.occupied.iter_mut().enumerate() {
            if !*occ {
                continue;
            }
            *occ = false;
            let (bx, by, bz) = (b % nb * BLOCK, b / nb % nb * BLOCK, b / (nb * nb) * BLOCK);
            for z in bz..(bz + BLOCK).min(r) {
                for y in by..(by + BLOCK).min(r) {
                    let row = r * (y + r * z);
                    let span = row + bx..row + (bx + BLOCK).min(r);
                    self.tsdf[span.clone()].fill(0.0);
                    self.weight[span.clone()].fill(0.0);
                    self.color[span].fill([0; 3]);
                }
            }
        }
    }

    /// Sets every voxel from an analytic signed distance (truncated at τ) and color, Ω = 1.
    pub fn fill_with(&mut self, f: impl Fn(&Vec3) -> (f64, Rgb) + Sync) {
        let r = self.config.resolution;
        let (origin, vs, tau) = (self.config.origin(), self.voxel_size(), self.config.tau);
        self.tsdf
            .par_chunks_mut(r * r)
            .zip(self.weight.par_chunks_mut(r * r))
            .zip(self.color.par_chunks_mut(r * r))
            .enumerate()
            .for_each(|(z, ((ts, ws), cs))| {
                for y in 0..r {
                    for x in 0..r {
                        let p = origin + Vec3::new(x as f64, y as f64, z as f64) * vs;
                        let (sdf, c) = f(&p);
                        let i = x + r * y;
                        ts[i] = (sdf / tau).clamp(-1.0, 1.0);
                        ws[i] = 1.0;
                        cs[i] = c;
                    }
                }
            });
        self.occupied.iter_mut().for_each(|o| *o = true);
    }

    /// Applies one update with the running-average rule and the weight cap.
    #[inline]
    fn apply(tsdf: &mut f64, weight: &mut f32, color: &mut Rgb, u: &VoxelUpdate, omega_max: f64) {
        let w = *weight as f64;
        *tsdf = ((*tsdf * w + u.d * u.omega) / (w + u.omega)).clamp(-1.0, 1.0);
        *color = u.c;
        *weight = (w + u.omega).min(omega_max) as f32;
    }

    /// Applies an update to one voxel directly.
    pub fn integrate_voxel(&mut self, x: usize, y: usize, z: usize, u: &VoxelUpdate) {
        let i = self.index(x, y, z);
        let b = self.blocks_per_side();
        self.occupied[x / BLOCK + b * (y / BLOCK + b * (z / BLOCK))] = true;
        Self::apply(
            &mut self.tsdf[i],
            &mut self.weight[i],
            &mut self.color[i],
            u,
            self.config.omega_max,
        );
    }
}

/// Update for a live-frame point `xt` (camera coordinates), or `None` if it gets no update.
#[inline]
fn update_at(xt: &Vec3, frame: &ObservationFrame, cfg: &VolumeConfig) -> Option<VoxelUpdate> {
    let k = &frame.intrinsics;
    if xt.z <= 0.0 {
        return None;
    }
    let (uc, vc) = (k.fx * xt.x / xt.z + k.cx, k.fy * xt.y / xt.z + k.cy);
    let (u, v) = k.pixel_of(uc, vc)?;
    let map = if cfg.fuse_raw_depth {
        &frame.raw_depth
    } else {
        &frame.depth
    };
    let nearest = map.get(u, v)?;
    let depth = if cfg.interpolate_depth {
        bilinear_depth(map, uc, vc, cfg.tau).unwrap_or(nearest)
    } else {
        nearest
    };
    let sdf = depth - xt.z;
    if cfg.behind_surface_exclusion && sdf < -cfg.tau {
        return None;
    }
    Some(VoxelUpdate {
        d: (sdf / cfg.tau).clamp(-1.0, 1.0),
        c: frame.color.get(u, v),
        omega: cfg.default_new_weight,
    })
}

fn bilinear_depth(map: &DepthMap, u: f64, v: f64, max_step: f64) -> Option<f64> {
    let (u0, v0) = (u.floor(), v.floor());
    if u0 < 0.0 || v0 < 0.0 {
        return None;
    }
    let (i, j) = (u0 as usize, v0 as usize);
    if i + 1 >= map.width() || j + 1 >= map.height() {
        return None;
    }
    let d = [
        map.get(i, j)?,
        map.get(i + 1, j)?,
        map.get(i, j + 1)?,
        map.get(i + 1, j + 1)?,
    ];
    let (lo, hi) = d
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| {
            (a.min(x), b.max(x))
        });
    if hi - lo > max_step {
        return None;
    }
    let (a, b) = (u - u0, v - v0);
    Some((d[0] * (1.0 - a) + d[1] * a) * (1.0 - b) + (d[2] * (1.0 - a) + d[3] * a) * b)
}

/// Warps a reference voxel center into the live frame and measures it against the depth.
pub fn compute_voxel_update(
    x0: &Vec3,
    graph: &DeformationGraph,
    frame: &ObservationFrame,
    cfg: &VolumeConfig,
) -> Option<VoxelUpdate> {
    let binding = compute_skinning(x0, graph, cfg.skin_nodes);
    update_at(&warp_point(x0, graph, &binding), frame, cfg)
}

/// Integrates `frame` into every voxel it observes through the current warp.
pub fn fuse_frame(
    vol: &mut TsdfVolume,
    graph: &DeformationGraph,
    frame: &ObservationFrame,
) -> FuseStats {
    let cfg = vol.config.clone();
    let r = cfg.resolution;
    let nb = vol.blocks_per_side();
    let vs = cfg.voxel_size();
    let origin = cfg.origin();

    let candidates: Vec<Vec<u32>> = (0..nb * nb * nb)
        .into_par_iter()
        .map(|b| {
            let (bx, by, bz) = (b % nb, (b / nb) % nb, b / (nb * nb));
            let lo = Vec3::new(bx as f64, by as f64, bz as f64) * (BLOCK as f64);
            let hi = (lo + Vec3::repeat(BLOCK as f64 - 1.0)).inf(&Vec3::repeat(r as f64 - 1.0));
            graph.skinning_candidates(&(origin + lo * vs), &(origin + hi * vs), cfg.skin_nodes)
        })
        .collect();

    let touched: Vec<(usize, Vec<bool>)> = vol
        .tsdf
        .par_chunks_mut(r * r)
        .zip(vol.weight.par_chunks_mut(r * r))
        .zip(vol.color.par_chunks_mut(r * r))
        .enumerate()
        .map(|(z, ((ts, ws), cs))| {
            let mut count = 0;
            let mut blocks = vec![false; nb * nb];
            for y in 0..r {
                for x in 0..r {
                    let x0 = origin + Vec3::new(x as f64, y as f64, z as f64) * vs;
                    let b2 = x / BLOCK + nb * (y / BLOCK);
                    let cand = &candidates[b2 + nb * nb * (z / BLOCK)];
                    let binding = compute_skinning_among(&x0, graph, cfg.skin_nodes, cand);
                    if let Some(u) = update_at(&warp_point(&x0, graph, &binding), frame, &cfg) {
                        let i = x + r * y;
                        TsdfVolume::apply(&mut ts[i], &mut ws[i], &mut cs[i], &u, cfg.omega_max);
                        blocks[b2] = true;
                        count += 1;
                    }
                }
            }
            (count, blocks)
        })
        .collect();

    let mut stats = FuseStats::default();
    for (z, (count, blocks)) in touched.into_iter().enumerate() {
        stats.updated += count;
        for (b2, hit) in blocks.into_iter().enumerate() {
            if hit {
                vol.occupied[b2 + nb * nb * (z / BLOCK)] = true;
            }
        }
    }
    stats
}
