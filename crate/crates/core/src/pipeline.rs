//! Stream replay: feeds odometry samples and detection frames through the
//! dual-graph manager in global stamp order and collects the outputs the
//! evaluation layer needs.

use crate::dual::{DualError, DualGraphConfig, DualGraphState, KeyframeDiagnostics};
use crate::eval::{self, MetricsReport};
use crate::geometry::Pose;
use crate::graph::{GateId, Graph};
use crate::sim::DetectionFrame;

/// Everything a localization replay produces.
pub struct ReplayOutput {
    /// Corrected pose per odometry sample.
    pub corrected: Vec<(f64, Pose)>,
    /// The raw odometry echoed at the same stamps.
    pub raw: Vec<(f64, Pose)>,
    pub diagnostics: Vec<KeyframeDiagnostics>,
    pub keyframes: usize,
    pub landmarks: usize,
    pub accepted_detections: usize,
    pub main_graph: Graph,
    /// Detection frames dropped because they preceded the first odometry
    /// sample.
    pub skipped_detection_frames: usize,
}

/// Replays the two streams in stamp order (odometry first at equal stamps,
/// so detections see the pose at their own stamp).
pub fn replay_localization(
    odometry: &[(f64, Pose)],
    detections: &[DetectionFrame],
    landmark_map: &[(GateId, Pose)],
    config: DualGraphConfig,
) -> Result<ReplayOutput, DualError> {
    let mut state = DualGraphState::init(config, landmark_map)?;
    let mut corrected = Vec::with_capacity(odometry.len());
    let mut raw = Vec::with_capacity(odometry.len());
    let mut skipped = 0usize;

    let mut det_iter = detections.iter().peekable();
    for &(stamp, pose) in odometry {
        let c = state.process_odometry(stamp, pose)?;
        corrected.push((stamp, c));
        raw.push((stamp, pose));
        while let Some(frame) = det_iter.peek() {
            if frame.stamp <= stamp {
                state.process_detections(frame.stamp, &frame.detections)?;
                det_iter.next();
            } else {
                break;
            }
        }
    }
    // frames after the last odometry sample still see the latest pose
    for frame in det_iter {
        if state
            .process_detections(frame.stamp, &frame.detections)
            .is_err()
        {
            skipped += 1;
        }
    }
    state.finalize()?;

    let diagnostics = state.drain_diagnostics();
    Ok(ReplayOutput {
        corrected,
        raw,
        keyframes: state.keyframe_count(),
        landmarks: state.landmark_count(),
        accepted_detections: state.accepted_detections(),
        diagnostics,
        main_graph: state.main_graph().clone(),
        skipped_detection_frames: skipped,
    })
}

/// Builds the run summary. ATE fields are filled when ground truth is
/// given; correction statistics when lap stamps are.
pub fn summarize_run(
    output: &ReplayOutput,
    ground_truth: Option<&[(f64, Pose)]>,
    gates: &[crate::geometry::Vec3],
    lap_stamps: Option<&[f64]>,
    approach_range: f64,
    stamp_tolerance: f64,
    config_hash: String,
    seed: u64,
) -> MetricsReport {
    let (ate_trans, ate_rot, raw_ate_trans, raw_ate_rot) = match ground_truth {
        Some(gt) => {
            let corr = eval::ate(&output.corrected, gt, stamp_tolerance).ok();
            let raw = eval::ate(&output.raw, gt, stamp_tolerance).ok();
            (
                corr.map(|a| a.trans_rmse),
                corr.map(|a| a.rot_rmse_deg),
                raw.map(|a| a.trans_rmse),
                raw.map(|a| a.rot_rmse_deg),
            )
        }
        None => (None, None, None, None),
    };
    let correction = lap_stamps.and_then(|laps| {
        eval::gate_crossing_correction(&output.corrected, &output.raw, gates, laps, approach_range)
            .ok()
    });
    let opt_times: Vec<f64> = output.diagnostics.iter().map(|d| d.opt_wall_ms).collect();
    let mut rejections = crate::assoc::RejectionCounts::default();
    for d in &output.diagnostics {
        rejections.add(&d.rejections);
    }
    MetricsReport {
        ate_trans,
        ate_rot_deg: ate_rot,
        raw_ate_trans,
        raw_ate_rot_deg: raw_ate_rot,
        correction,
        keyframes: output.keyframes,
        landmarks: output.landmarks,
        main_nodes: output.main_graph.num_nodes(),
        main_edges: output.main_graph.num_edges(),
        main_detection_edges: output.main_graph.num_detection_edges(),
        accepted_detections: output.accepted_detections,
        rejections,
        opt_ms_p50: eval::percentile_nearest_rank(&opt_times, 50.0),
        opt_ms_p95: eval::percentile_nearest_rank(&opt_times, 95.0),
        opt_count: opt_times.len(),
        config_hash,
        seed,
    }
}
