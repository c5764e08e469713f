use std::path::Path;
use std::process::{Command, Output};

use deformfusion::harness::read_report;
use deformfusion::ply::read_ply;

const SMALL: [&str; 6] = ["--set", "scene.frames=3", "--set", "volume.resolution=64", "--set", "pipeline.baseline=false"];

fn cli(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deformfusion")).args(args).arg("--out-dir").arg(out).output().unwrap()
}

fn ok(o: Output) -> String {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

#[test]
fn render_then_run_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    let seq = dir.path().join("seq");
    ok(cli(&[&["render"], &SMALL[..]].concat(), &seq));
    for f in ["intrinsics.txt", "depth_00002.png", "color_00002.png", "gt_00002.ply", "config_used.txt"] {
        assert!(seq.join(f).is_file(), "{f}");
    }
    let out = dir.path().join("run");
    let stdout = ok(cli(&["run", "--input", seq.to_str().unwrap(), "--no-timings", "--set", "volume.resolution=64"], &out));
    assert!(stdout.contains("3 frames"));
    let records = read_report(&out.join("report.csv")).unwrap();
    assert_eq!(records.len(), 3);
    // recorded sequences carry no ground truth
    assert!(records.iter().all(|r| r.surface_rms.is_none() && r.alignment_rms.is_some()));
    assert!(read_ply(&out.join("mesh_00002.ply")).unwrap().vertex_count() > 0);
}

#[test]
fn fuse_writes_one_mesh() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(cli(&[&["fuse"], &SMALL[..]].concat(), dir.path()));
    assert!(stdout.starts_with("fused 3 frames"));
    assert!(read_ply(&dir.path().join("fused.ply")).unwrap().vertex_count() > 0);
}

#[test]
fn report_rederives_the_run_metrics() {
    let dir = tempfile::tempdir().unwrap();
    ok(cli(&[&["run", "--no-timings"], &SMALL[..]].concat(), dir.path()));
    ok(cli(&["report", "--run-dir", dir.path().to_str().unwrap()], dir.path()));
    let run = read_report(&dir.path().join("report.csv")).unwrap();
    let again = read_report(&dir.path().join("rederived_report.csv")).unwrap();
    assert_eq!(run.len(), again.len());
    for (a, b) in run.iter().zip(&again) {
        assert_eq!((a.frame, a.vertex_count, &a.mesh), (b.frame, b.vertex_count, &b.mesh));
        // PLY stores f32 coordinates
        assert!((a.surface_rms.unwrap() - b.surface_rms.unwrap()).abs() < 1e-6);
    }
}

#[test]
fn bad_input_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let o = cli(&["run", "--set", "scene.nonsense=1"], dir.path());
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown key"));
    let o = cli(&["run", "--input", dir.path().join("missing").to_str().unwrap()], dir.path());
    assert!(!o.status.success());
}

#[test]
fn fail_on_lost_sets_the_exit_status() {
    let dir = tempfile::tempdir().unwrap();
    let blank = "corruption.occlusions=[{u0=0,v0=0,u1=320,v1=240,first=1,last=1}]";
    let args = [&["run", "--fail-on-lost", "--set", blank], &SMALL[..]].concat();
    let o = cli(&args, dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    let o = cli(&[&["run", "--fail-on-lost"], &SMALL[..]].concat(), dir.path());
    assert!(o.status.success());
}
