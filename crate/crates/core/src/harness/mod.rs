//! Synthetic experiments: ground-truth scenes, a ray-cast renderer, seeded corruption,
//! metrics and the frame-by-frame orchestrator.

pub mod config;
pub mod corrupt;
pub mod metrics;
pub mod pipeline;
pub mod render;
pub mod scene;
pub mod source;

pub use config::{desk_volume, ExperimentConfig, PipelineOptions, DESK_LAMBDA_REG};
pub use corrupt::{corrupt_frame, CorruptionSpec, OcclusionBox};
pub use metrics::{
    alignment_error, brute_force_distance, surface_error, AlignmentError, MeshDistance,
    SurfaceError,
};
pub use pipeline::{
    read_report, rederive_report, run_experiment, run_pipeline, run_pipeline_observed,
    write_report, write_run_outputs, ExperimentReport, FrameRecord, FrameState, RunReport,
};
pub use render::render_frame;
pub use scene::{generate_ground_truth, ground_truth_in_camera, SceneKind, SceneSpec};
pub use source::{write_sequence, DiskSource, FrameSource, SourceFrame, SyntheticSource};
