//! Trajectory evaluation: SE(3)-aligned absolute trajectory error,
//! per-lap gate-crossing correction magnitude, and run statistics.

use nalgebra::{Matrix3, Vector3};
use serde::Serialize;
use thiserror::Error;

use crate::assoc::RejectionCounts;
use crate::geometry::{rotational_distance, Pose, Rotation, Vec3};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("need at least {needed} stamp-associated poses, found {found}")]
    InsufficientCorrespondences { needed: usize, found: usize },
    #[error("correspondences are collinear; alignment is degenerate")]
    DegenerateGeometry,
    #[error("trajectories do not cover lap {0}")]
    LapNotCovered(usize),
}

/// Pairs indices of two stamped sequences by nearest stamp within
/// `tolerance`, each sample used at most once, two-pointer scan.
pub fn associate_stamps(
    a: &[(f64, Pose)],
    b: &[(f64, Pose)],
    tolerance: f64,
) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    let mut j = 0usize;
    for (i, (ta, _)) in a.iter().enumerate() {
        while j + 1 < b.len() && (b[j + 1].0 - ta).abs() <= (b[j].0 - ta).abs() {
            j += 1;
        }
        if j < b.len() && (b[j].0 - ta).abs() <= tolerance {
            pairs.push((i, j));
            j += 1;
        }
        if j >= b.len() {
            break;
        }
    }
    pairs
}

/// Closed-form least-squares rigid alignment (Kabsch, no scale): the pose
/// `T` minimizing `sum || T . est_i - gt_i ||^2` over the associated
/// positions.
pub fn align_se3(
    est: &[(f64, Pose)],
    gt: &[(f64, Pose)],
    stamp_tolerance: f64,
) -> Result<Pose, EvalError> {
    let pairs = associate_stamps(est, gt, stamp_tolerance);
    if pairs.len() < 3 {
        return Err(EvalError::InsufficientCorrespondences {
            needed: 3,
            found: pairs.len(),
        });
    }
    let inv_n = 1.0 / pairs.len() as f64;
    let mut c_est = Vector3::zeros();
    let mut c_gt = Vector3::zeros();
    for &(i, j) in &pairs {
        c_est += est[i].1.translation;
        c_gt += gt[j].1.translation;
    }
    c_est *= inv_n;
    c_gt *= inv_n;

    let mut h = Matrix3::<f64>::zeros();
    for &(i, j) in &pairs {
        let x = est[i].1.translation - c_est;
        let y = gt[j].1.translation - c_gt;
        h += x * y.transpose();
    }
    let svd = nalgebra::SVD::new(h, true, true);
    let sv = svd.singular_values;
    // collinear points leave only one significant singular value
    if sv[1] <= 1e-9 * sv[0].max(1e-300) {
        return Err(EvalError::DegenerateGeometry);
    }
    let u = svd.u.ok_or(EvalError::DegenerateGeometry)?;
    let v_t = svd.v_t.ok_or(EvalError::DegenerateGeometry)?;
    let d = (v_t.transpose() * u.transpose()).determinant().signum();
    let r = v_t.transpose() * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * u.transpose();
    let t = c_gt - r * c_est;
    let q = nalgebra::UnitQuaternion::from_matrix(&r);
    let qv = q.quaternion();
    Ok(Pose::new(
        Rotation::from_quaternion_xyzw(qv.i, qv.j, qv.k, qv.w),
        t,
    ))
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct AteResult {
    /// RMSE of translational distances after alignment, m.
    pub trans_rmse: f64,
    /// RMSE of rotational geodesic angles after alignment, degrees.
    pub rot_rmse_deg: f64,
    pub matched_poses: usize,
}

/// Absolute trajectory error after SE(3) alignment.
pub fn ate(
    est: &[(f64, Pose)],
    gt: &[(f64, Pose)],
    stamp_tolerance: f64,
) -> Result<AteResult, EvalError> {
    let t = align_se3(est, gt, stamp_tolerance)?;
    let pairs = associate_stamps(est, gt, stamp_tolerance);
    let mut sq_trans = 0.0;
    let mut sq_rot = 0.0;
    for &(i, j) in &pairs {
        let aligned = t * est[i].1;
        sq_trans += (aligned.translation - gt[j].1.translation).norm_squared();
        let ang = rotational_distance(&aligned.rotation, &gt[j].1.rotation);
        sq_rot += ang * ang;
    }
    let n = pairs.len() as f64;
    Ok(AteResult {
        trans_rmse: (sq_trans / n).sqrt(),
        rot_rmse_deg: (sq_rot / n).sqrt().to_degrees(),
        matched_poses: pairs.len(),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct LapCorrection {
    pub lap: usize,
    pub mean: f64,
    pub std: f64,
    pub gates_evaluated: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct CorrectionStats {
    pub per_lap: Vec<LapCorrection>,
    pub overall_mean: f64,
    pub overall_std: f64,
    /// Gates never approached within range, excluded from the statistics.
    pub gates_excluded: usize,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64;
    (mean, var.sqrt())
}

/// Correction magnitude at gate crossings: for each gate and lap, the
/// corrected-trajectory point nearest the gate center is found and the
/// Euclidean distance between the corrected and raw poses at that stamp is
/// recorded. Gates never approached within `approach_range` are excluded.
///
/// `corrected` and `raw` must be sampled at the same stamps (the pipeline
/// emits both per odometry sample). `lap_stamps` holds lap boundaries
/// including start and end.
pub fn gate_crossing_correction(
    corrected: &[(f64, Pose)],
    raw: &[(f64, Pose)],
    gates: &[Vec3],
    lap_stamps: &[f64],
    approach_range: f64,
) -> Result<CorrectionStats, EvalError> {
    assert_eq!(
        corrected.len(),
        raw.len(),
        "corrected and raw trajectories must share stamps"
    );
    if lap_stamps.len() < 2 {
        return Err(EvalError::LapNotCovered(0));
    }
    let mut per_lap = Vec::new();
    let mut all = Vec::new();
    let mut excluded = 0usize;
    for lap in 0..lap_stamps.len() - 1 {
        let (t0, t1) = (lap_stamps[lap], lap_stamps[lap + 1]);
        let window: Vec<usize> = (0..corrected.len())
            .filter(|&i| corrected[i].0 >= t0 && corrected[i].0 <= t1)
            .collect();
        if window.is_empty() {
            return Err(EvalError::LapNotCovered(lap));
        }
        let mut corrections = Vec::new();
        for gate in gates {
            let nearest = window
                .iter()
                .copied()
                .min_by(|&a, &b| {
                    let da = (corrected[a].1.translation - gate).norm();
                    let db = (corrected[b].1.translation - gate).norm();
                    da.partial_cmp(&db).unwrap()
                })
                .expect("window is non-empty");
            let dist = (corrected[nearest].1.translation - gate).norm();
            if dist > approach_range {
                excluded += 1;
                continue;
            }
            let c = (corrected[nearest].1.translation - raw[nearest].1.translation).norm();
            corrections.push(c);
        }
        let (mean, std) = mean_std(&corrections);
        all.extend_from_slice(&corrections);
        per_lap.push(LapCorrection {
            lap,
            mean,
            std,
            gates_evaluated: corrections.len(),
        });
    }
    let (overall_mean, overall_std) = mean_std(&all);
    Ok(CorrectionStats {
        per_lap,
        overall_mean,
        overall_std,
        gates_excluded: excluded,
    })
}

/// Recovers lap boundary stamps from a closed-loop trajectory by finding
/// local minima of the distance to the start position. Used when replaying
/// file streams that carry no explicit lap markers.
pub fn infer_lap_stamps(traj: &[(f64, Pose)]) -> Vec<f64> {
    if traj.len() < 3 {
        return vec![
            traj.first().map(|p| p.0).unwrap_or(0.0),
            traj.last().map(|p| p.0).unwrap_or(0.0),
        ];
    }
    let start = traj[0].1.translation;
    let mut extent: f64 = 0.0;
    for (_, p) in traj {
        extent = extent.max((p.translation - start).norm());
    }
    let near = extent * 0.2;
    let d = |i: usize| (traj[i].1.translation - start).norm();
    let mut stamps = vec![traj[0].0];
    let mut last_boundary = traj[0].0;
    for i in 1..traj.len() - 1 {
        // suppress minima too close in time to the previous boundary
        if d(i) < near
            && d(i) <= d(i - 1)
            && d(i) < d(i + 1)
            && traj[i].0 - last_boundary > (traj.last().unwrap().0 - traj[0].0) * 0.1
        {
            stamps.push(traj[i].0);
            last_boundary = traj[i].0;
        }
    }
    stamps.push(traj.last().unwrap().0);
    stamps
}

/// Nearest-rank percentile of a sample, `p` in (0, 100].
pub fn percentile_nearest_rank(values: &[f64], p: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Run summary serialized to `metrics.json` and the ablation tables.
#[derive(Clone, Debug, Serialize)]
pub struct MetricsReport {
    pub ate_trans: Option<f64>,
    pub ate_rot_deg: Option<f64>,
    pub raw_ate_trans: Option<f64>,
    pub raw_ate_rot_deg: Option<f64>,
    pub correction: Option<CorrectionStats>,
    pub keyframes: usize,
    pub landmarks: usize,
    pub main_nodes: usize,
    pub main_edges: usize,
    pub main_detection_edges: usize,
    pub accepted_detections: usize,
    pub rejections: RejectionCounts,
    pub opt_ms_p50: f64,
    pub opt_ms_p95: f64,
    pub opt_count: usize,
    pub config_hash: String,
    pub seed: u64,
}

/// FNV-1a over the canonical config text, for run provenance.
pub fn config_hash(canonical: &str) -> String {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in canonical.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    format!("{h:016x}")
}
