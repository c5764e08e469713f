use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use deformfusion::frame::build_frame;
use deformfusion::graph::DeformationGraph;
use deformfusion::harness::{
    rederive_report, run_experiment, run_pipeline, write_report, write_run_outputs, write_sequence,
    DiskSource, ExperimentConfig, FrameSource, RunReport, SyntheticSource,
};
use deformfusion::ply::write_ply;
use deformfusion::tsdf::{create_volume, extract_reference_mesh, fuse_frame};
use deformfusion::Result;

#[derive(Parser)]
#[command(
    name = "deformfusion",
    version,
    about = "Non-rigid tracking and TSDF reconstruction of deforming surfaces"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML experiment configuration; omitted sections use the desk-scale defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration value, e.g. `--set scene.frames=10`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Seed for the corruption noise.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Disable graph extension and behind-surface exclusion.
    #[arg(long, global = true)]
    strict_paper: bool,
    /// Exit with status 2 if tracking was lost on any frame.
    #[arg(long, global = true)]
    fail_on_lost: bool,
    /// Write zero stage timings, making reports byte-identical across runs.
    #[arg(long, global = true)]
    no_timings: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Track and fuse a sequence; synthetic unless --input is given.
    Run {
        /// Directory with depth_%05d.png, color_%05d.png and intrinsics.txt.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Render the synthetic sequence (with corruption) to disk.
    Render,
    /// Fuse every frame with the identity deformation and extract one mesh.
    Fuse {
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Recompute metrics from the meshes of a finished synthetic run.
    Report {
        /// Output directory of the run; its config_used.txt is used unless --config is given.
        #[arg(long)]
        run_dir: PathBuf,
    },
}

fn load_config(cli: &Cli, fallback: Option<&Path>) -> Result<ExperimentConfig> {
    let mut cfg = match (&cli.config, fallback) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, Some(path)) if path.is_file() => ExperimentConfig::load(path)?,
        _ => ExperimentConfig::default(),
    };
    for o in &cli.overrides {
        cfg.set(o)?;
    }
    if let Some(seed) = cli.seed {
        cfg.corruption.seed = seed;
    }
    if cli.strict_paper {
        cfg.strict_paper();
    }
    if cli.no_timings {
        cfg.pipeline.record_timings = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn summarize(label: &str, report: &RunReport) {
    let Some(last) = report.records.last() else {
        println!("{label}: no frames");
        return;
    };
    let fmt = |x: Option<f64>| x.map_or("n/a".to_string(), |v| format!("{:.3} mm", v * 1e3));
    println!(
        "{label}: {} frames, final mesh {} vertices, surface rms {}, alignment rms {}, lost frames {}",
        report.records.len(),
        last.vertex_count,
        fmt(last.surface_rms),
        fmt(last.alignment_rms),
        report.lost_frames.len()
    );
}

fn execute(cli: &Cli) -> Result<Vec<usize>> {
    let out = cli.out_dir.as_path();
    match &cli.command {
        Command::Run { input: Some(dir) } => {
            let cfg = load_config(cli, None)?;
            let source = DiskSource::open(dir)?;
            let report = run_pipeline(&cfg, &source, Some(out))?;
            write_run_outputs(&cfg, &report, out)?;
            summarize("run", &report);
            Ok(report.lost_frames)
        }
        Command::Run { input: None } => {
            let cfg = load_config(cli, None)?;
            let report = run_experiment(&cfg, Some(out))?;
            summarize("run", &report.run);
            if cfg.pipeline.baseline {
                let baseline = RunReport {
                    records: report.run.baseline.clone(),
                    ..RunReport::default()
                };
                summarize("single-frame baseline", &baseline);
            }
            if let Some(control) = &report.control {
                summarize("clean control", control);
            }
            Ok(report.run.lost_frames)
        }
        Command::Render => {
            let cfg = load_config(cli, None)?;
            let source =
                SyntheticSource::new(cfg.scene.clone(), cfg.corruption.clone(), cfg.camera)?;
            write_sequence(&source, out)?;
            cfg.save(&out.join("config_used.txt"))?;
            println!("wrote {} frames to {}", source.frame_count(), out.display());
            Ok(Vec::new())
        }
        Command::Fuse { input } => {
            let cfg = load_config(cli, None)?;
            let source: Box<dyn FrameSource> = match input {
                Some(dir) => Box::new(DiskSource::open(dir)?),
                None => Box::new(SyntheticSource::new(
                    cfg.scene.clone(),
                    cfg.corruption.clone(),
                    cfg.camera,
                )?),
            };
            let mut volume = create_volume(cfg.volume.clone())?;
            let identity = DeformationGraph::default();
            for t in 0..source.frame_count() {
                let f = source.frame(t)?;
                let frame = build_frame(t, &f.depth, f.color, source.intrinsics(), &cfg.filter)?;
                fuse_frame(&mut volume, &identity, &frame);
            }
            let mesh = extract_reference_mesh(&volume);
            std::fs::create_dir_all(out)?;
            write_ply(&out.join("fused.ply"), &mesh)?;
            cfg.save(&out.join("config_used.txt"))?;
            println!(
                "fused {} frames: {} vertices, {} triangles",
                source.frame_count(),
                mesh.vertex_count(),
                mesh.triangles.len()
            );
            Ok(Vec::new())
        }
        Command::Report { run_dir } => {
            let cfg = load_config(cli, Some(&run_dir.join("config_used.txt")))?;
            let records = rederive_report(&cfg, run_dir)?;
            std::fs::create_dir_all(out)?;
            write_report(&records, &out.join("rederived_report.csv"))?;
            summarize(
                "rederived",
                &RunReport {
                    records,
                    ..RunReport::default()
                },
            );
            Ok(Vec::new())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(lost) if cli.fail_on_lost && !lost.is_empty() => {
            eprintln!("error: tracking lost on frames {lost:?}");
            ExitCode::from(2)
        }
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
