//! End-to-end tests of the command-line surface: file outputs, exit codes,
//! determinism and the graph dump format.

use std::path::Path;
use std::process::Command;

fn gateloc() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gateloc"))
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}

/// A fast config: short track, one lap.
const TINY: &str = "\
track.shape = ellipse
track.a = 6
track.b = 4
track.gates = 3
track.laps = 1
noise.det_range = 6
";

fn write_tiny_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("tiny.conf");
    std::fs::write(&path, TINY).unwrap();
    path
}

#[test]
fn simulate_writes_four_files_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = write_tiny_config(tmp.path());
    for out in ["a", "b"] {
        let status = gateloc()
            .args(["simulate", "--config"])
            .arg(&conf)
            .args(["--seeds", "1", "--out"])
            .arg(tmp.path().join(out))
            .status()
            .unwrap();
        assert!(status.success());
    }
    let dir_a = tmp.path().join("a/seed-1");
    let names = [
        "odometry.jsonl",
        "detections.jsonl",
        "gates.json",
        "groundtruth.tum",
    ];
    let entries: Vec<String> = std::fs::read_dir(&dir_a)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert_eq!(entries.len(), 4, "exactly four files: {entries:?}");
    for name in names {
        let a = read(&dir_a.join(name));
        let b = read(&tmp.path().join("b/seed-1").join(name));
        assert_eq!(a, b, "{name} differs between identical runs");
    }
}

#[test]
fn simulate_multiple_seeds_make_multiple_directories() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = write_tiny_config(tmp.path());
    let status = gateloc()
        .args(["simulate", "--config"])
        .arg(&conf)
        .args(["--seeds", "1,2", "--out"])
        .arg(tmp.path().join("runs"))
        .status()
        .unwrap();
    assert!(status.success());
    assert!(tmp.path().join("runs/seed-1").is_dir());
    assert!(tmp.path().join("runs/seed-2").is_dir());
}

#[test]
fn invalid_config_exits_2() {
    let status = gateloc()
        .args([
            "simulate",
            "-s",
            "dual.d_temp=9.0",
            "--out",
            "/tmp/unused-gateloc",
        ])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn missing_input_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let status = gateloc()
        .args(["run", "--odometry", "/definitely/missing.jsonl"])
        .args(["--detections", "x", "--gates", "y", "--out"])
        .arg(tmp.path())
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(3));
}

#[test]
fn malformed_stream_exits_3_with_line_number() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(
        tmp.path().join("odometry.jsonl"),
        "{\"t\":0.0,\"p\":[0,0,0],\"q\":[0,0,0,1]}\ngarbage\n",
    )
    .unwrap();
    std::fs::write(tmp.path().join("detections.jsonl"), "").unwrap();
    std::fs::write(
        tmp.path().join("gates.json"),
        "[{\"id\":0,\"p\":[1,0,0],\"q\":[0,0,0,1]}]",
    )
    .unwrap();
    let out = gateloc()
        .args(["run", "--odometry"])
        .arg(tmp.path().join("odometry.jsonl"))
        .arg("--detections")
        .arg(tmp.path().join("detections.jsonl"))
        .arg("--gates")
        .arg(tmp.path().join("gates.json"))
        .arg("--out")
        .arg(tmp.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 2"), "stderr: {err}");
}

fn simulate_and_run(tmp: &Path, extra_run_args: &[&str]) -> std::path::PathBuf {
    let conf = write_tiny_config(tmp);
    assert!(gateloc()
        .args(["simulate", "--config"])
        .arg(&conf)
        .args(["--seeds", "3", "--out"])
        .arg(tmp.join("sim"))
        .status()
        .unwrap()
        .success());
    let seed_dir = tmp.join("sim/seed-3");
    let out_dir = tmp.join("out");
    let mut cmd = gateloc();
    cmd.args(["run", "--config"])
        .arg(&conf)
        .arg("--odometry")
        .arg(seed_dir.join("odometry.jsonl"))
        .arg("--detections")
        .arg(seed_dir.join("detections.jsonl"))
        .arg("--gates")
        .arg(seed_dir.join("gates.json"))
        .arg("--groundtruth")
        .arg(seed_dir.join("groundtruth.tum"))
        .arg("--out")
        .arg(&out_dir);
    cmd.args(extra_run_args);
    assert!(cmd.status().unwrap().success());
    out_dir
}

#[test]
fn run_produces_expected_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let out = simulate_and_run(tmp.path(), &[]);
    for name in [
        "corrected.tum",
        "raw.tum",
        "diagnostics.jsonl",
        "metrics.json",
        "main_graph.txt",
    ] {
        assert!(out.join(name).exists(), "{name} missing");
    }
    let metrics: serde_json::Value =
        serde_json::from_str(&read(&out.join("metrics.json"))).unwrap();
    assert!(metrics["ate_trans"].is_number());
    assert!(metrics["opt_ms_p95"].is_number());
    // each diagnostics line parses as JSON
    for line in read(&out.join("diagnostics.jsonl")).lines() {
        let _: serde_json::Value = serde_json::from_str(line).unwrap();
    }
}

#[test]
fn single_graph_flag_changes_edge_count() {
    let tmp = tempfile::tempdir().unwrap();
    let dual = simulate_and_run(tmp.path(), &[]);
    let dual_metrics: serde_json::Value =
        serde_json::from_str(&read(&dual.join("metrics.json"))).unwrap();

    let tmp2 = tempfile::tempdir().unwrap();
    let single = simulate_and_run(tmp2.path(), &["--single-graph"]);
    let single_metrics: serde_json::Value =
        serde_json::from_str(&read(&single.join("metrics.json"))).unwrap();

    let d = dual_metrics["main_detection_edges"].as_u64().unwrap();
    let s = single_metrics["main_detection_edges"].as_u64().unwrap();
    let accepted = single_metrics["accepted_detections"].as_u64().unwrap();
    assert_eq!(s, accepted, "single mode keeps every accepted detection");
    assert!(d < s, "dual compresses: {d} vs {s}");
}

#[test]
fn plot_data_full_and_gt_free() {
    let tmp = tempfile::tempdir().unwrap();
    let out = simulate_and_run(tmp.path(), &[]);
    // colocate map and ground truth with the run artifacts
    let seed_dir = tmp.path().join("sim/seed-3");
    std::fs::copy(seed_dir.join("gates.json"), out.join("gates.json")).unwrap();
    std::fs::copy(
        seed_dir.join("groundtruth.tum"),
        out.join("groundtruth.tum"),
    )
    .unwrap();

    let plots = tmp.path().join("plots");
    assert!(gateloc()
        .args(["plot-data", "--run"])
        .arg(&out)
        .arg("--out")
        .arg(&plots)
        .status()
        .unwrap()
        .success());
    for name in ["xy_gt.csv", "xy_raw.csv", "xy_corrected.csv", "gates.csv"] {
        assert!(plots.join(name).exists(), "{name} missing");
    }
    // one gate row per gate
    let gates_csv = read(&plots.join("gates.csv"));
    assert_eq!(gates_csv.lines().count(), 1 + 3);

    // without ground truth only the raw/corrected series appear
    std::fs::remove_file(out.join("groundtruth.tum")).unwrap();
    std::fs::remove_file(out.join("gates.json")).unwrap();
    let plots2 = tmp.path().join("plots2");
    assert!(gateloc()
        .args(["plot-data", "--run"])
        .arg(&out)
        .arg("--out")
        .arg(&plots2)
        .status()
        .unwrap()
        .success());
    assert!(plots2.join("xy_raw.csv").exists());
    assert!(plots2.join("xy_corrected.csv").exists());
    assert!(!plots2.join("xy_gt.csv").exists());
}

#[test]
fn ablate_six_variant_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = write_tiny_config(tmp.path());
    let out = tmp.path().join("ablation");
    assert!(gateloc()
        .args(["ablate", "--config"])
        .arg(&conf)
        .args([
            "--grid",
            "dual:2.0:0.5,dual:2.0:0.1,dual:0.5:0.1,single:2.0,single:0.5,single:0.1",
            "--seeds",
            "1,2",
            "--jobs",
            "2",
            "--out",
        ])
        .arg(&out)
        .status()
        .unwrap()
        .success());
    let summary = read(&out.join("ablation.csv"));
    assert_eq!(summary.lines().count(), 1 + 6, "summary:\n{summary}");
    assert!(summary.starts_with("graph,d_main,d_temp,ate_m,nodes,edges,opt_p95_ms"));
    let detail = read(&out.join("ablation_detail.csv"));
    assert_eq!(detail.lines().count(), 1 + 12, "detail:\n{detail}");
}

#[test]
fn ablate_empty_grid_is_config_error() {
    let status = gateloc()
        .args([
            "ablate",
            "--grid",
            "",
            "--out",
            "/tmp/unused-gateloc-ablate",
        ])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn dump_graph_output_parses() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = write_tiny_config(tmp.path());
    assert!(gateloc()
        .args(["simulate", "--config"])
        .arg(&conf)
        .args(["--seeds", "5", "--out"])
        .arg(tmp.path().join("sim"))
        .status()
        .unwrap()
        .success());
    let seed_dir = tmp.path().join("sim/seed-5");
    let out = gateloc()
        .args(["dump-graph", "--config"])
        .arg(&conf)
        .arg("--odometry")
        .arg(seed_dir.join("odometry.jsonl"))
        .arg("--detections")
        .arg(seed_dir.join("detections.jsonl"))
        .arg("--gates")
        .arg(seed_dir.join("gates.json"))
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let graph = gateloc_core::io::parse_graph(&text).unwrap();
    assert!(graph.num_nodes() > 3);
    assert_eq!(gateloc_core::io::dump_graph(&graph), text);
}
