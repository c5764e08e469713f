use std::fs;
use std::path::Path;
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::frame::{build_frame, ObservationFrame};
use crate::geometry::TriangleMesh;
use crate::graph::{
    build_graph, compute_bindings, extend_graph, sample_nodes, warp_mesh_with_bindings,
    DeformationGraph, SkinningBinding,
};
use crate::ply::write_ply;
use crate::tracker::track_frame;
use crate::tsdf::{create_volume, extract_reference_mesh, fuse_frame, TsdfVolume};

use super::config::ExperimentConfig;
use super::corrupt::CorruptionSpec;
use super::metrics::{alignment_error, surface_error};
use super::source::{FrameSource, SourceFrame, SyntheticSource};

/// One row of a run report. Absent metrics are `None` and serialize as empty fields.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame: usize,
    /// Point-to-plane sum against the uncorrupted frame, m².
    pub alignment_error: Option<f64>,
    pub alignment_rms: Option<f64>,
    pub surface_rms: Option<f64>,
    pub surface_max: Option<f64>,
    pub correspondences: usize,
    pub track_seconds: f64,
    pub fuse_seconds: f64,
    pub extract_seconds: f64,
    pub vertex_count: usize,
    pub lost: bool,
    /// Mesh file, relative to the report.
    pub mesh: Option<String>,
}

pub const REPORT_HEADER: [&str; 12] = [
    "frame",
    "alignment_error",
    "alignment_rms",
    "surface_rms",
    "surface_max",
    "correspondences",
    "track_seconds",
    "fuse_seconds",
    "extract_seconds",
    "vertex_count",
    "lost",
    "mesh",
];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunReport {
    pub records: Vec<FrameRecord>,
    /// Single-frame reconstructions, when requested.
    pub baseline: Vec<FrameRecord>,
    pub lost_frames: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExperimentReport {
    pub run: RunReport,
    /// The same sequence without corruption.
    pub control: Option<RunReport>,
}

pub fn write_report(records: &[FrameRecord], path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    w.write_record(REPORT_HEADER)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<Vec<FrameRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize()
        .collect::<std::result::Result<Vec<FrameRecord>, _>>()?)
}

fn timed<T>(on: bool, f: impl FnOnce() -> T) -> (T, f64) {
    let start = Instant::now();
    let out = f();
    (
        out,
        if on {
            start.elapsed().as_secs_f64()
        } else {
            0.0
        },
    )
}

/// Tracking and fusion state carried between frames.
struct Engine<'a> {
    cfg: &'a ExperimentConfig,
    volume: TsdfVolume,
    graph: DeformationGraph,
    /// Reference mesh the tracker aligns.
    mesh0: TriangleMesh,
    bindings: Vec<SkinningBinding>,
}

impl Engine<'_> {
    fn rebind(&mut self) {
        self.bindings =
            compute_bindings(&self.mesh0.vertices, &self.graph, self.cfg.graph.skin_nodes);
    }

    /// Fuses with the current graph and rebuilds the graph from scratch over the extracted mesh.
    fn bootstrap(&mut self, frame: &ObservationFrame, timings: bool) -> (f64, f64) {
        let (_, fuse_s) = timed(timings, || fuse_frame(&mut self.volume, &self.graph, frame));
        let (mesh, extract_s) = timed(timings, || extract_reference_mesh(&self.volume));
        let g = &self.cfg.graph;
        let mut graph = build_graph(
            &sample_nodes(&mesh, g.sampling_radius),
            g.n_neighbors,
            g.sigma(),
        );
        graph.rigid = self.graph.rigid.clone();
        self.graph = graph;
        self.mesh0 = mesh;
        self.rebind();
        (fuse_s, extract_s)
    }

    /// Takes a newly extracted reference mesh: warps it with the current graph, then grows the graph over it.
    fn adopt(&mut self, mesh: TriangleMesh) -> Result<TriangleMesh> {
        self.mesh0 = mesh;
        self.rebind();
        let live = warp_mesh_with_bindings(&self.mesh0, &self.graph, &self.bindings)?;
        let g = &self.cfg.graph;
        if g.extend {
            let before = self.graph.node_count();
            self.graph = extend_graph(
                &self.graph,
                &self.mesh0,
                g.sampling_radius,
                g.n_neighbors,
                g.skin_nodes,
            );
            if self.graph.node_count() != before {
                self.rebind();
            }
        }
        Ok(live)
    }
}

/// Metrics for a mesh against the uncorrupted frame and the ground truth.
fn measure(
    frame: usize,
    mesh: &TriangleMesh,
    clean: &ObservationFrame,
    src: &SourceFrame,
    cfg: &ExperimentConfig,
) -> FrameRecord {
    let align = alignment_error(mesh, clean, &cfg.tracker);
    let surface = src
        .ground_truth
        .as_ref()
        .and_then(|gt| surface_error(mesh, gt).ok());
    FrameRecord {
        frame,
        alignment_error: align.map(|a| a.sum),
        alignment_rms: align.map(|a| a.rms),
        surface_rms: surface.map(|s| s.rms),
        surface_max: surface.map(|s| s.max),
        vertex_count: mesh.vertex_count(),
        ..FrameRecord::default()
    }
}

fn save_mesh(out: Option<&Path>, name: String, mesh: &TriangleMesh) -> Result<Option<String>> {
    match out {
        Some(dir) => {
            write_ply(&dir.join(&name), mesh)?;
            Ok(Some(name))
        }
        None => Ok(None),
    }
}

/// Engine state after a frame, handed to a [`run_pipeline_observed`] callback.
/// `live` is `reference` warped by `graph`, vertex for vertex.
pub struct FrameState<'a> {
    pub frame: usize,
    pub reference: &'a TriangleMesh,
    pub live: &'a TriangleMesh,
    pub graph: &'a DeformationGraph,
}

/// Processes every frame of `source`. With `out` set (and mesh writing enabled) the live
/// meshes go to `mesh_%05d.ply` and the baseline meshes to `baseline_%05d.ply`.
pub fn run_pipeline(
    cfg: &ExperimentConfig,
    source: &dyn FrameSource,
    out: Option<&Path>,
) -> Result<RunReport> {
    run_pipeline_observed(cfg, source, out, &mut |_| {})
}

/// [`run_pipeline`], calling `observe` once per frame after the live mesh is built.
pub fn run_pipeline_observed(
    cfg: &ExperimentConfig,
    source: &dyn FrameSource,
    out: Option<&Path>,
    observe: &mut dyn FnMut(FrameState<'_>),
) -> Result<RunReport> {
    cfg.validate()?;
    let k = *source.intrinsics();
    let opts = &cfg.pipeline;
    let timings = opts.record_timings;
    let mesh_dir = if opts.write_meshes { out } else { None };
    if let Some(dir) = mesh_dir {
        fs::create_dir_all(dir)?;
    }

    let mut engine = Engine {
        cfg,
        volume: create_volume(cfg.volume.clone())?,
        graph: DeformationGraph::default(),
        mesh0: TriangleMesh::default(),
        bindings: Vec::new(),
    };
    let mut baseline_volume = if opts.baseline {
        Some(create_volume(cfg.volume.clone())?)
    } else {
        None
    };
    let mut report = RunReport::default();
    // pipelined mode: a tracked frame waiting to be fused, with the graph it was tracked to
    let mut pending: Option<(ObservationFrame, DeformationGraph)> = None;

    for t in 0..source.frame_count() {
        let src = source.frame(t)?;
        let frame = build_frame(t, &src.depth, src.color.clone(), &k, &cfg.filter)?;
        let clean = match &src.clean {
            Some((d, c)) => build_frame(t, d, c.clone(), &k, &cfg.filter)?,
            None => frame.clone(),
        };

        let mut rec;
        let live;
        if engine.mesh0.is_empty() {
            // nothing to track yet: (re)bootstrap from this frame
            if let Some((f, g)) = pending.take() {
                engine.graph = g;
                fuse_frame(&mut engine.volume, &engine.graph, &f);
            }
            let (fuse_s, extract_s) = engine.bootstrap(&frame, timings);
            live = warp_mesh_with_bindings(&engine.mesh0, &engine.graph, &engine.bindings)?;
            rec = measure(t, &live, &clean, &src, cfg);
            rec.fuse_seconds = fuse_s;
            rec.extract_seconds = extract_s;
        } else {
            let (fused, tracked) = if opts.pipelined {
                let Engine {
                    volume,
                    mesh0,
                    bindings,
                    graph,
                    ..
                } = &mut engine;
                let (mesh0, bindings, graph) = (&*mesh0, &*bindings, &*graph);
                rayon::join(
                    || {
                        pending.take().map(|(f, g)| {
                            let (_, fs) = timed(timings, || fuse_frame(volume, &g, &f));
                            let (m, es) = timed(timings, || extract_reference_mesh(volume));
                            (m, fs, es)
                        })
                    },
                    || {
                        timed(timings, || {
                            track_frame(graph, mesh0, bindings, &frame, &cfg.tracker)
                        })
                    },
                )
            } else {
                (
                    None,
                    timed(timings, || {
                        track_frame(
                            &engine.graph,
                            &engine.mesh0,
                            &engine.bindings,
                            &frame,
                            &cfg.tracker,
                        )
                    }),
                )
            };
            let ((graph, diag), track_s) = (tracked.0?, tracked.1);
            let lost = diag.lost;
            if lost {
                warn!("frame {t}: tracking lost, keeping the previous deformation");
                report.lost_frames.push(t);
            } else {
                engine.graph = graph;
            }

            let (mut fuse_s, mut extract_s) = (0.0, 0.0);
            let new_mesh = if opts.pipelined {
                fused.map(|(m, fs, es)| {
                    (fuse_s, extract_s) = (fs, es);
                    m
                })
            } else if !lost {
                fuse_s = timed(timings, || {
                    fuse_frame(&mut engine.volume, &engine.graph, &frame)
                })
                .1;
                let (m, es) = timed(timings, || extract_reference_mesh(&engine.volume));
                extract_s = es;
                Some(m)
            } else {
                None
            };
            live = match new_mesh {
                Some(m) => engine.adopt(m)?,
                None => warp_mesh_with_bindings(&engine.mesh0, &engine.graph, &engine.bindings)?,
            };
            if opts.pipelined && !lost {
                pending = Some((frame.clone(), engine.graph.clone()));
            }

            rec = measure(t, &live, &clean, &src, cfg);
            rec.correspondences = diag.correspondences();
            rec.lost = lost;
            rec.track_seconds = track_s;
            rec.fuse_seconds = fuse_s;
            rec.extract_seconds = extract_s;
        }
        rec.mesh = save_mesh(mesh_dir, format!("mesh_{t:05}.ply"), &live)?;
        observe(FrameState {
            frame: t,
            reference: &engine.mesh0,
            live: &live,
            graph: &engine.graph,
        });
        info!(
            "frame {t}: {} vertices, {} nodes, surface rms {:?}, alignment rms {:?}",
            rec.vertex_count,
            engine.graph.node_count(),
            rec.surface_rms,
            rec.alignment_rms
        );
        report.records.push(rec);

        if let Some(vol) = baseline_volume.as_mut() {
            vol.reset();
            let (_, fuse_s) = timed(timings, || {
                fuse_frame(vol, &DeformationGraph::default(), &frame)
            });
            let (mesh, extract_s) = timed(timings, || extract_reference_mesh(vol));
            let mut b = measure(t, &mesh, &clean, &src, cfg);
            b.fuse_seconds = fuse_s;
            b.extract_seconds = extract_s;
            b.mesh = save_mesh(mesh_dir, format!("baseline_{t:05}.ply"), &mesh)?;
            report.baseline.push(b);
        }
    }
    Ok(report)
}

/// Writes `report.csv`, `baseline_report.csv` (when the baseline ran) and `config_used.txt`.
pub fn write_run_outputs(cfg: &ExperimentConfig, report: &RunReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    cfg.save(&dir.join("config_used.txt"))?;
    write_report(&report.records, &dir.join("report.csv"))?;
    if cfg.pipeline.baseline {
        write_report(&report.baseline, &dir.join("baseline_report.csv"))?;
    }
    Ok(())
}

/// Runs the configured synthetic scene and, for corrupted input, the clean control run.
/// Control outputs go to `out/control/` and `out/control_report.csv`.
pub fn run_experiment(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<ExperimentReport> {
    let source = SyntheticSource::new(cfg.scene.clone(), cfg.corruption.clone(), cfg.camera)?;
    let run = run_pipeline(cfg, &source, out)?;
    if let Some(dir) = out {
        write_run_outputs(cfg, &run, dir)?;
    }
    let control = if cfg.pipeline.control_run && !cfg.corruption.is_clean() {
        let clean_cfg = ExperimentConfig {
            corruption: CorruptionSpec::default(),
            pipeline: super::config::PipelineOptions {
                baseline: false,
                ..cfg.pipeline.clone()
            },
            ..cfg.clone()
        };
        let clean_source = SyntheticSource::new(
            clean_cfg.scene.clone(),
            CorruptionSpec::default(),
            cfg.camera,
        )?;
        let control_dir = out.map(|d| d.join("control"));
        let control = run_pipeline(&clean_cfg, &clean_source, control_dir.as_deref())?;
        if let Some(dir) = out {
            write_report(&control.records, &dir.join("control_report.csv"))?;
        }
        Some(control)
    } else {
        None
    };
    Ok(ExperimentReport { run, control })
}

/// Recomputes metrics for the `mesh_%05d.ply` files of a finished synthetic run.
/// Frames without a mesh file are skipped; timings and correspondence counts are zero.
pub fn rederive_report(cfg: &ExperimentConfig, run_dir: &Path) -> Result<Vec<FrameRecord>> {
    let source = SyntheticSource::new(cfg.scene.clone(), cfg.corruption.clone(), cfg.camera)?;
    let mut records = Vec::new();
    for t in 0..source.frame_count() {
        let name = format!("mesh_{t:05}.ply");
        let path = run_dir.join(&name);
        if !path.is_file() {
            continue;
        }
        let mesh = crate::ply::read_ply(&path)?;
        let src = source.frame(t)?;
        let (d, c) = src.clean_images();
        let clean = build_frame(t, d, c.clone(), &cfg.camera, &cfg.filter)?;
        let mut rec = measure(t, &mesh, &clean, &src, cfg);
        rec.mesh = Some(name);
        records.push(rec);
    }
    Ok(records)
}
