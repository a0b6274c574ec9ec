use std::fs;
use std::io::BufReader;
use std::path::Path;
use std::process::{Command, Output};

use fragrecon::pipeline::{eval_views, evaluate, Dataset, EvalConfig, EvalReport};
use fragrecon::priors::DEFAULT_CONFIDENCE_DECAY;
use fragrecon::surface::{read_ply, Mesh};

fn fragrecon(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fragrecon"))
        .args(args)
        .output()
        .expect("spawn fragrecon")
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

fn mesh(path: &Path) -> Mesh {
    read_ply(&mut BufReader::new(fs::File::open(path).unwrap())).unwrap()
}

/// Small capture so each run stays under a few seconds.
fn synth(dir: &Path) -> std::path::PathBuf {
    let cfg = dir.join("capture.json");
    fs::write(&cfg, r#"{"frames": 6, "width": 32, "height": 24, "fx": 24.0, "fy": 24.0}"#).unwrap();
    let data = dir.join("data");
    let out = fragrecon(&["synth-gen", "--config", p(&cfg), "--seed", "3", "--out", p(&data)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    data
}

#[test]
fn synth_run_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path());
    for f in ["intrinsics.txt", "gt_mesh.ply", "scene.json"] {
        assert!(data.join(f).exists(), "missing {f}");
    }

    let run_dir = tmp.path().join("run");
    let out = fragrecon(&["run", "--dataset", p(&data), "--mode", "classical-oracle", "--out", p(&run_dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let timing: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(timing["frames"], 6);
    for f in ["mesh.ply", "tsdf_level2.sstv", "timing.json", "fragments.json"] {
        assert!(run_dir.join(f).exists(), "missing {f}");
    }

    let report_path = tmp.path().join("report.json");
    let pred = run_dir.join("mesh.ply");
    let out = fragrecon(&[
        "eval",
        "--pred",
        p(&pred),
        "--dataset",
        p(&data),
        "--tau",
        "0.04",
        "--out",
        p(&report_path),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: EvalReport = serde_json::from_str(&fs::read_to_string(&report_path).unwrap()).unwrap();
    assert!(report.metrics_3d.fscore > 0.8, "F {}", report.metrics_3d.fscore);

    // the CLI report is the library evaluation of the files on disk
    let dataset = Dataset::load(&data, DEFAULT_CONFIDENCE_DECAY).unwrap();
    let cfg = EvalConfig {
        tau_m: 0.04,
        ..EvalConfig::default()
    };
    let direct = evaluate(&mesh(&pred), &mesh(&data.join("gt_mesh.ply")), &eval_views(&dataset), &cfg).unwrap();
    let stdout: EvalReport = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report, direct);
    assert_eq!(stdout, direct);
}

#[test]
fn learned_runs_are_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path());
    let mut meshes = Vec::new();
    for i in 0..2 {
        let dir = tmp.path().join(format!("run{i}"));
        let out = fragrecon(&["run", "--dataset", p(&data), "--seed", "5", "--fragment-size", "3", "--out", p(&dir)]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        assert!(dir.join("weights.sstw").exists());
        meshes.push((fs::read(dir.join("mesh.ply")).unwrap(), fs::read(dir.join("tsdf_level0.sstv")).unwrap()));
    }
    assert_eq!(meshes[0], meshes[1]);

    // reloading the saved weights reproduces the run
    let dir = tmp.path().join("reloaded");
    let weights = tmp.path().join("run0").join("weights.sstw");
    let out = fragrecon(&[
        "run",
        "--dataset",
        p(&data),
        "--weights",
        p(&weights),
        "--fragment-size",
        "3",
        "--out",
        p(&dir),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read(dir.join("tsdf_level0.sstv")).unwrap(), meshes[0].1);
}

#[test]
fn bad_input_exits_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope");
    let cases: Vec<Vec<&str>> = vec![
        vec!["run", "--dataset", p(&missing)],
        vec!["run", "--dataset", p(&missing), "--mode", "telepathy"],
        vec!["run", "--dataset", p(&missing), "--fragment-size", "0"],
        vec!["eval", "--pred", p(&missing)],
        vec!["synth-gen", "--frames", "0", "--out", p(&missing)],
        vec!["no-such-command"],
    ];
    for args in cases {
        let out = fragrecon(&args);
        assert_eq!(out.status.code(), Some(1), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(!out.stderr.is_empty());
    }
}

#[test]
fn help_and_version_succeed() {
    for args in [["--help"], ["--version"]] {
        let out = fragrecon(&args);
        assert_eq!(out.status.code(), Some(0));
        assert!(!out.stdout.is_empty());
    }
}

#[test]
fn malformed_config_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.json");
    fs::write(&cfg, r#"{"fragment_size": 4, "unknown_knob": true}"#).unwrap();
    let out = fragrecon(&["run", "--config", p(&cfg)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown_knob"));
}
