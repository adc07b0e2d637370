use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use msfm_core::io::state::{load_state, Stage};

const SCENE: &str = r#"{
  "rooms": [{"n_frames": 48, "n_wall_lines": 40, "n_floor_lines": 10}],
  "width": 320, "height": 200, "fx": 150.0, "fy": 150.0, "seed": 5
}"#;

/// Adjacent frames of the scene above are 7.5° apart.
const PIPELINE: &str = r#"{"tracking": {"pair_angle_deg": 8.0}}"#;

fn msfm(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msfm"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A temporary directory holding the two configuration files and a
/// synthesized dataset in `data/`.
fn workspace(extra: &[&str]) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("scene.json"), SCENE).unwrap();
    std::fs::write(dir.path().join("pipeline.json"), PIPELINE).unwrap();
    let mut args = vec!["synth", "--config", "scene.json", "--out", "data"];
    args.extend_from_slice(extra);
    let o = msfm(&args, dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    dir
}

fn file(dir: &Path, name: &str) -> PathBuf {
    let p = dir.join(name);
    assert!(p.exists(), "{} missing", p.display());
    p
}

#[test]
fn synth_writes_dataset_and_ground_truth() {
    let dir = workspace(&[]);
    let data = dir.path().join("data");
    for name in [
        "manifest.json",
        "segments.csv",
        "ground_truth.json",
        "normals_00000.pfm",
        "normals_00047.pfm",
    ] {
        file(&data, name);
    }
    let ds = msfm_core::Dataset::load(&data).unwrap();
    assert_eq!(ds.frames.len(), 48);
}

#[test]
fn run_writes_every_output() {
    let dir = workspace(&[]);
    let o = msfm(
        &["run", "--dataset", "data", "--out", "out", "--config", "pipeline.json"],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = dir.path().join("out");
    for name in [
        "segments_preprocessed.csv",
        "rotation_cost.csv",
        "tracks.csv",
        "relations.csv",
        "solution.json",
        "ba_cost.csv",
        "model.ply",
        "model.json",
        "state.msfm",
        "state.timings.json",
    ] {
        file(&out, name);
    }
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(file(&out, "report.json")).unwrap()).unwrap();
    assert_eq!(report["registered_ratio"], 1.0);
    assert!(report["translation"]["rmse_percent_diameter"].as_f64().unwrap() < 1e-4);
    assert_eq!(report["timings"].as_array().unwrap().len(), 7);
    let ply = std::fs::read_to_string(out.join("model.ply")).unwrap();
    assert!(ply.starts_with("ply\nformat ascii 1.0\n"));
}

#[test]
fn stage_by_stage_matches_run() {
    let dir = workspace(&[]);
    let p = dir.path();
    let o = msfm(
        &[
            "run",
            "--dataset",
            "data",
            "--out",
            "whole",
            "--config",
            "pipeline.json",
        ],
        p,
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let state = ["--state", "steps/state.msfm"];
    let o = msfm(
        &[
            &["preprocess", "--dataset", "data", "--config", "pipeline.json"][..],
            &state,
        ]
        .concat(),
        p,
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for stage in ["frame", "refine-rotations", "track", "coplanarity", "solve", "ba"] {
        let o = msfm(&[&[stage][..], &state].concat(), p);
        assert_eq!(code(&o), 0, "{stage}: {}", stderr(&o));
    }
    assert_eq!(
        std::fs::read(p.join("steps/state.msfm")).unwrap(),
        std::fs::read(p.join("whole/state.msfm")).unwrap()
    );
    let o = msfm(&[&["export", "--out", "steps"][..], &state].concat(), p);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(
        std::fs::read(p.join("steps/model.ply")).unwrap(),
        std::fs::read(p.join("whole/model.ply")).unwrap()
    );
    let o = msfm(
        &[
            &[
                "evaluate",
                "--ground-truth",
                "data/ground_truth.json",
                "--out",
                "steps/report.json",
            ][..],
            &state,
        ]
        .concat(),
        p,
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(p.join("steps/report.json")).unwrap()).unwrap();
    assert_eq!(report["timings"].as_array().unwrap().len(), 7);
}

#[test]
fn ba_phase_flag_limits_phases() {
    let dir = workspace(&[]);
    let p = dir.path();
    let state = ["--state", "s.msfm"];
    msfm(
        &[
            &["preprocess", "--dataset", "data", "--config", "pipeline.json"][..],
            &state,
        ]
        .concat(),
        p,
    );
    for stage in ["frame", "refine-rotations", "track", "coplanarity", "solve"] {
        assert_eq!(code(&msfm(&[&[stage][..], &state].concat(), p)), 0);
    }
    let o = msfm(&[&["ba", "--phase", "1"][..], &state].concat(), p);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let s = load_state(&p.join("s.msfm")).unwrap();
    let phases: Vec<u8> = s.ba.unwrap().phases.iter().map(|ph| ph.phase).collect();
    assert_eq!(phases, [1]);
}

#[test]
fn missing_normal_maps_fail_at_coplanarity_with_data_error() {
    let dir = workspace(&["--no-normal-maps"]);
    let o = msfm(
        &["run", "--dataset", "data", "--out", "out", "--config", "pipeline.json"],
        dir.path(),
    );
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("stage `coplanarity` failed"), "{}", stderr(&o));
    let s = load_state(&dir.path().join("out/state.msfm")).unwrap();
    assert_eq!(s.completed(), Some(Stage::Track));
}

#[test]
fn unconstrained_solve_is_a_numeric_failure() {
    // with the default 2° pairing angle no frames of this scene are paired
    let dir = workspace(&[]);
    let o = msfm(&["run", "--dataset", "data", "--out", "out"], dir.path());
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("stage `solve` failed"));
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["bogus"][..],
        &["ba", "--phase", "4"],
        &["preprocess"],
        &["export", "--format", "obj"],
    ] {
        assert_eq!(code(&msfm(args, dir.path())), 1, "{args:?}");
    }
    assert_eq!(code(&msfm(&["--help"], dir.path())), 0);
}

#[test]
fn data_errors_exit_with_two() {
    let dir = workspace(&[]);
    let p = dir.path();
    // no state yet
    assert_eq!(code(&msfm(&["frame"], p)), 2);
    std::fs::write(p.join("bad.json"), r#"{"tracking": {"pair_angle": 3}}"#).unwrap();
    let o = msfm(&["preprocess", "--dataset", "data", "--config", "bad.json"], p);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("configuration"), "{}", stderr(&o));
    assert_eq!(code(&msfm(&["preprocess", "--dataset", "nowhere"], p)), 2);
    // stage run out of order
    assert_eq!(code(&msfm(&["preprocess", "--dataset", "data"], p)), 0);
    let o = msfm(&["solve"], p);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("missing stage output"), "{}", stderr(&o));
    // nothing to export yet
    assert_eq!(code(&msfm(&["export"], p)), 2);
}
