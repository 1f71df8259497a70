//! Browser demo bindings: parameter-explorable localization runs rendered
//! by the static page in `www/`. All functions exchange JSON strings so the
//! page needs no generated types.

use gateloc_core::dual::{DistillInfoMode, DualGraphConfig, LandmarkKind};
use gateloc_core::eval::{ate, gate_crossing_correction};
use gateloc_core::geometry::Vec3;
use gateloc_core::io::gates_to_landmark_map;
use gateloc_core::pipeline::{replay_localization, ReplayOutput};
use gateloc_core::sim::{simulate, thin_detections_by_distance, NoiseModel, SimRun, TrackSpec};
use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

#[derive(Deserialize)]
#[serde(default)]
pub struct DemoParams {
    pub track: String,
    pub seed: u64,
    pub laps: usize,
    pub gates: usize,
    pub d_main: f64,
    pub d_temp: f64,
    pub single_graph: bool,
    pub landmark_kind: String,
    pub distill_info: String,
    pub odom_bias: f64,
    pub odom_trans_sigma: f64,
    pub odom_rot_sigma: f64,
    pub det_pos_sigma: f64,
    pub det_range: f64,
    pub det_dropout: f64,
    /// Optional minimum travel spacing between detection frames, m.
    pub det_thin: f64,
}

impl Default for DemoParams {
    fn default() -> Self {
        let noise = NoiseModel::default();
        DemoParams {
            track: "ellipse".into(),
            seed: 1,
            laps: 2,
            gates: 7,
            d_main: 2.0,
            d_temp: 0.1,
            single_graph: false,
            landmark_kind: "pose".into(),
            distill_info: "schur".into(),
            odom_bias: noise.odom_bias_drift,
            odom_trans_sigma: noise.odom_trans_sigma,
            odom_rot_sigma: noise.odom_rot_sigma,
            det_pos_sigma: noise.det_pos_sigma,
            det_range: noise.det_range,
            det_dropout: noise.det_dropout,
            det_thin: 0.0,
        }
    }
}

fn track_spec(p: &DemoParams) -> TrackSpec {
    let mut spec = match p.track.as_str() {
        "lemniscate" => TrackSpec::lemniscate_default(),
        _ => TrackSpec::default(),
    };
    spec.lap_count = p.laps.clamp(1, 5);
    spec.gate_count = p.gates.clamp(2, 15);
    spec
}

fn noise_model(p: &DemoParams) -> NoiseModel {
    NoiseModel {
        odom_bias_drift: p.odom_bias,
        odom_trans_sigma: p.odom_trans_sigma,
        odom_rot_sigma: p.odom_rot_sigma,
        det_pos_sigma: p.det_pos_sigma,
        det_range: p.det_range,
        det_dropout: p.det_dropout,
        ..NoiseModel::default()
    }
}

fn dual_config(p: &DemoParams) -> Result<DualGraphConfig, String> {
    let config = DualGraphConfig {
        d_main: p.d_main,
        d_temp: p.d_temp.min(p.d_main),
        single_graph_mode: p.single_graph,
        landmark_kind: match p.landmark_kind.as_str() {
            "point" => LandmarkKind::Point,
            _ => LandmarkKind::Pose,
        },
        distill_info: match p.distill_info.as_str() {
            "sum" => DistillInfoMode::EdgeInfoSum,
            _ => DistillInfoMode::SchurMarginal,
        },
        ..DualGraphConfig::default()
    };
    config.validate().map_err(|e| e.to_string())?;
    Ok(config)
}

#[derive(Serialize)]
struct GateOut {
    id: u32,
    x: f64,
    y: f64,
    yaw: f64,
}

fn gates_out(run: &SimRun) -> Vec<GateOut> {
    run.gates
        .iter()
        .map(|g| GateOut {
            id: g.id,
            x: g.pose.translation.x,
            y: g.pose.translation.y,
            yaw: gateloc_core::assoc::yaw_of(&g.pose.rotation),
        })
        .collect()
}

fn xy(traj: &[(f64, gateloc_core::Pose)]) -> Vec<[f64; 2]> {
    traj.iter()
        .map(|(_, p)| [p.translation.x, p.translation.y])
        .collect()
}

#[derive(Serialize)]
struct RunMetrics {
    raw_ate: f64,
    corrected_ate: f64,
    keyframes: usize,
    nodes: usize,
    edges: usize,
    detection_edges: usize,
    accepted_detections: usize,
    opt_p95_ms: f64,
    lap_corrections: Vec<f64>,
}

fn run_metrics(run: &SimRun, out: &ReplayOutput) -> Result<RunMetrics, String> {
    let corrected_ate = ate(&out.corrected, &run.ground_truth, 0.02)
        .map_err(|e| e.to_string())?
        .trans_rmse;
    let raw_ate = ate(&out.raw, &run.ground_truth, 0.02)
        .map_err(|e| e.to_string())?
        .trans_rmse;
    let gates: Vec<Vec3> = run.gates.iter().map(|g| g.pose.translation).collect();
    let correction = gate_crossing_correction(
        &out.corrected,
        &out.raw,
        &gates,
        &run.lap_stamps,
        NoiseModel::default().det_range,
    )
    .map_err(|e| e.to_string())?;
    let times: Vec<f64> = out
        .diagnostics
        .iter()
        .map(|d| d.opt_wall_ms + d.compress_wall_ms)
        .collect();
    Ok(RunMetrics {
        raw_ate,
        corrected_ate,
        keyframes: out.keyframes,
        nodes: out.main_graph.num_nodes(),
        edges: out.main_graph.num_edges(),
        detection_edges: out.main_graph.num_detection_edges(),
        accepted_detections: out.accepted_detections,
        opt_p95_ms: gateloc_core::eval::percentile_nearest_rank(&times, 95.0),
        lap_corrections: correction.per_lap.iter().map(|l| l.mean).collect(),
    })
}

fn execute(p: &DemoParams) -> Result<(SimRun, ReplayOutput), String> {
    let spec = track_spec(p);
    let noise = noise_model(p);
    noise.validate()?;
    let config = dual_config(p)?;
    let run = simulate(&spec, &noise, p.seed);
    let detections = if p.det_thin > 0.0 {
        thin_detections_by_distance(&run.detections, &run.odometry, p.det_thin)
    } else {
        run.detections.clone()
    };
    let map = gates_to_landmark_map(&run.gates);
    let out =
        replay_localization(&run.odometry, &detections, &map, config).map_err(|e| e.to_string())?;
    Ok((run, out))
}

fn parse_params(json: &str) -> Result<DemoParams, String> {
    if json.trim().is_empty() {
        return Ok(DemoParams::default());
    }
    serde_json::from_str(json).map_err(|e| format!("bad parameters: {e}"))
}

fn err_json(message: String) -> String {
    serde_json::json!({ "error": message }).to_string()
}

/// Fast preview of the track layout: ground-truth XY and gate poses only,
/// no noise and no optimization.
#[wasm_bindgen]
pub fn simulate_preview(params_json: &str) -> String {
    match parse_params(params_json) {
        Ok(p) => {
            let run = simulate(&track_spec(&p), &noise_model(&p), p.seed);
            serde_json::json!({
                "gt": xy(&run.ground_truth),
                "gates": gates_out(&run),
            })
            .to_string()
        }
        Err(e) => err_json(e),
    }
}

/// Full localization run: simulates the streams, replays them through the
/// pipeline, and returns the XY series plus run metrics.
#[wasm_bindgen]
pub fn run_localization(params_json: &str) -> String {
    let inner = |p: &DemoParams| -> Result<String, String> {
        let (run, out) = execute(p)?;
        let metrics = run_metrics(&run, &out)?;
        Ok(serde_json::json!({
            "gt": xy(&run.ground_truth),
            "raw": xy(&out.raw),
            "corrected": xy(&out.corrected),
            "gates": gates_out(&run),
            "metrics": metrics,
        })
        .to_string())
    };
    match parse_params(params_json).and_then(|p| inner(&p)) {
        Ok(s) => s,
        Err(e) => err_json(e),
    }
}

/// Runs the same seed in dual and single-graph mode and returns both metric
/// sets side by side.
#[wasm_bindgen]
pub fn compare_modes(params_json: &str) -> String {
    let inner = |p: DemoParams| -> Result<String, String> {
        let dual = DemoParams {
            single_graph: false,
            ..p
        };
        let (run_d, out_d) = execute(&dual)?;
        let single = DemoParams {
            single_graph: true,
            ..dual
        };
        let (_, out_s) = execute(&single)?;
        Ok(serde_json::json!({
            "dual": run_metrics(&run_d, &out_d)?,
            "single": run_metrics(&run_d, &out_s)?,
        })
        .to_string())
    };
    match parse_params(params_json).and_then(inner) {
        Ok(s) => s,
        Err(e) => err_json(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preview_returns_track_and_gates() {
        let out = simulate_preview("{}");
        let v: serde_json::Value = serde_json::from_str(&out).unwrap();
        assert!(v["gt"].as_array().unwrap().len() > 100);
        assert_eq!(v["gates"].as_array().unwrap().len(), 7);
    }

    #[test]
    fn localization_improves_over_raw() {
        let out = run_localization(r#"{"seed": 3, "laps": 1}"#);
        let v: serde_json::Value = serde_json::from_str(&out).unwrap();
        assert!(v["error"].is_null(), "{out}");
        let m = &v["metrics"];
        assert!(m["corrected_ate"].as_f64().unwrap() < m["raw_ate"].as_f64().unwrap());
        assert_eq!(
            v["raw"].as_array().unwrap().len(),
            v["corrected"].as_array().unwrap().len()
        );
    }

    #[test]
    fn compare_reports_both_modes() {
        let out = compare_modes(r#"{"seed": 2, "laps": 1, "det_thin": 1.6}"#);
        let v: serde_json::Value = serde_json::from_str(&out).unwrap();
        assert!(v["error"].is_null(), "{out}");
        let dual_edges = v["dual"]["detection_edges"].as_u64().unwrap();
        let single_edges = v["single"]["detection_edges"].as_u64().unwrap();
        assert!(dual_edges <= single_edges);
    }

    #[test]
    fn bad_parameters_report_error() {
        let out = run_localization(r#"{"seed": "nope"}"#);
        let v: serde_json::Value = serde_json::from_str(&out).unwrap();
        assert!(v["error"].is_string());
        let out2 = run_localization(r#"{"det_dropout": 2.0}"#);
        let v2: serde_json::Value = serde_json::from_str(&out2).unwrap();
        assert!(v2["error"].is_string());
    }
}
