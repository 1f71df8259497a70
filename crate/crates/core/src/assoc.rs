//! Data association between gate detections and the known landmark map:
//! global-frame projection, Hungarian assignment on Euclidean distance,
//! distance gating, and orientation checks with reverse-observation
//! handling.

use serde::Serialize;

use crate::geometry::{compose, Mat3, Mat6, Pose, Rotation, Vec3};
use crate::graph::GateId;

/// Cost assigned to disallowed pairs and synthetic padding in the
/// assignment matrix.
pub const COST_SENTINEL: f64 = 1e12;

#[derive(Clone, Debug, Serialize)]
pub struct AssociationConfig {
    /// Maximum Euclidean distance between a projected detection and the gate
    /// position it is assigned to.
    pub max_match_distance: f64,
    /// Maximum yaw difference between a pose detection and the gate's map
    /// orientation.
    pub max_yaw_error: f64,
    /// Accept detections that only pass the yaw check after a 180-degree
    /// flip, as produced when a gate is seen from its far side.
    pub allow_reverse: bool,
}

impl Default for AssociationConfig {
    fn default() -> Self {
        AssociationConfig {
            max_match_distance: 1.5,
            max_yaw_error: 0.6,
            allow_reverse: true,
        }
    }
}

impl AssociationConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.max_match_distance > 0.0) {
            return Err("max_match_distance must be positive".into());
        }
        if !(self.max_yaw_error > 0.0) {
            return Err("max_yaw_error must be positive".into());
        }
        Ok(())
    }
}

/// Body-frame measurement payload of one detection.
#[derive(Clone, Copy, Debug)]
pub enum DetectionBody {
    Se3(Pose),
    Point(Vec3),
}

impl DetectionBody {
    pub fn position(&self) -> Vec3 {
        match self {
            DetectionBody::Se3(p) => p.translation,
            DetectionBody::Point(p) => *p,
        }
    }
}

/// One raw gate detection in the observing body frame.
#[derive(Clone, Debug)]
pub struct RawDetection {
    pub stamp: f64,
    pub measurement: DetectionBody,
    /// Measurement information override; the pipeline default applies when
    /// absent.
    pub information_se3: Option<Mat6>,
    pub information_point: Option<Mat3>,
}

impl RawDetection {
    pub fn se3(stamp: f64, pose: Pose) -> Self {
        RawDetection {
            stamp,
            measurement: DetectionBody::Se3(pose),
            information_se3: None,
            information_point: None,
        }
    }

    pub fn point(stamp: f64, p: Vec3) -> Self {
        RawDetection {
            stamp,
            measurement: DetectionBody::Point(p),
            information_se3: None,
            information_point: None,
        }
    }
}

/// A detection matched to a map gate. `measurement` is the body-frame
/// measurement after any reverse flip.
#[derive(Clone, Debug)]
pub struct AssociatedDetection {
    pub gate: GateId,
    pub measurement: DetectionBody,
    pub global: DetectionBody,
    pub reversed: bool,
    pub information_se3: Option<Mat6>,
    pub information_point: Option<Mat3>,
}

/// Rejection counters by cause, accumulated into the diagnostics stream.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct RejectionCounts {
    pub distance: u64,
    pub yaw: u64,
    /// Lost the assignment to another detection competing for the same
    /// gates (matched against sentinel padding).
    pub duplicate: u64,
}

impl RejectionCounts {
    pub fn total(&self) -> u64 {
        self.distance + self.yaw + self.duplicate
    }

    pub fn add(&mut self, other: &RejectionCounts) {
        self.distance += other.distance;
        self.yaw += other.yaw;
        self.duplicate += other.duplicate;
    }
}

/// A known gate the associator can match against.
#[derive(Clone, Copy, Debug)]
pub struct RegistryEntry {
    pub gate: GateId,
    pub pose: Pose,
}

/// Projects a body-frame detection into the global frame through the drone
/// pose.
pub fn to_global(drone_pose: &Pose, det: &DetectionBody) -> DetectionBody {
    match det {
        DetectionBody::Se3(m) => DetectionBody::Se3(compose(drone_pose, m)),
        DetectionBody::Point(p) => DetectionBody::Point(drone_pose.transform_point(p)),
    }
}

/// Minimum-cost assignment of `min(n, m)` row-column pairs by the Hungarian
/// algorithm with potentials, O(n^2 m). Costs must be finite; use
/// [`COST_SENTINEL`] for disallowed pairs. Returns pairs sorted by row.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<(usize, usize)> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let m = cost[0].len();
    if m == 0 {
        return Vec::new();
    }
    // the potentials formulation needs rows <= cols: transpose if not
    if n > m {
        let t: Vec<Vec<f64>> = (0..m)
            .map(|j| (0..n).map(|i| cost[i][j]).collect())
            .collect();
        let mut pairs: Vec<(usize, usize)> =
            hungarian(&t).into_iter().map(|(r, c)| (c, r)).collect();
        pairs.sort_unstable();
        return pairs;
    }

    // 1-indexed arrays, p[j] = row assigned to column j
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=m)
        .filter(|&j| p[j] != 0)
        .map(|j| (p[j] - 1, j - 1))
        .collect();
    pairs.sort_unstable();
    pairs
}

/// Heading of a pose's forward (+x) axis projected to the horizontal plane.
/// Racing gates stand upright, so the forward axis is the gate normal.
pub fn yaw_of(rotation: &Rotation) -> f64 {
    let fwd = rotation.rotate(&Vec3::x());
    fwd.y.atan2(fwd.x)
}

pub fn wrap_angle(a: f64) -> f64 {
    let mut x = a % std::f64::consts::TAU;
    if x > std::f64::consts::PI {
        x -= std::f64::consts::TAU;
    } else if x < -std::f64::consts::PI {
        x += std::f64::consts::TAU;
    }
    x
}

fn flip_pose(p: &Pose) -> Pose {
    Pose::new(
        p.rotation * Rotation::from_yaw(std::f64::consts::PI),
        p.translation,
    )
}

/// Matches a frame of detections against the gate registry.
///
/// Builds a cost matrix of Euclidean distances between globally projected
/// detection positions and registry gate positions, solves the assignment,
/// then gates by distance and (for pose detections) by yaw against the
/// gate's map orientation. A detection whose yaw only fits after a
/// 180-degree flip is flipped and flagged `reversed` when the config allows
/// it.
pub fn associate(
    drone_pose: &Pose,
    detections: &[RawDetection],
    registry: &[RegistryEntry],
    config: &AssociationConfig,
) -> (Vec<AssociatedDetection>, RejectionCounts) {
    let mut accepted = Vec::new();
    let mut rejects = RejectionCounts::default();
    if detections.is_empty() || registry.is_empty() {
        return (accepted, rejects);
    }
    let globals: Vec<DetectionBody> = detections
        .iter()
        .map(|d| to_global(drone_pose, &d.measurement))
        .collect();
    let cost: Vec<Vec<f64>> = globals
        .iter()
        .map(|g| {
            registry
                .iter()
                .map(|r| {
                    let d = (g.position() - r.pose.translation).norm();
                    if d > config.max_match_distance {
                        COST_SENTINEL
                    } else {
                        d
                    }
                })
                .collect()
        })
        .collect();
    let assignment = hungarian(&cost);
    let mut matched = vec![false; detections.len()];
    for (row, col) in assignment {
        matched[row] = true;
        if cost[row][col] >= COST_SENTINEL {
            // only sentinel pairs were left for this detection
            rejects.distance += 1;
            continue;
        }
        let entry = &registry[col];
        let det = &detections[row];
        match (&det.measurement, &globals[row]) {
            (DetectionBody::Se3(body), DetectionBody::Se3(global)) => {
                let gate_yaw = yaw_of(&entry.pose.rotation);
                let det_yaw = yaw_of(&global.rotation);
                let err = wrap_angle(det_yaw - gate_yaw).abs();
                if err <= config.max_yaw_error {
                    accepted.push(AssociatedDetection {
                        gate: entry.gate,
                        measurement: DetectionBody::Se3(*body),
                        global: DetectionBody::Se3(*global),
                        reversed: false,
                        information_se3: det.information_se3,
                        information_point: det.information_point,
                    });
                } else if config.allow_reverse {
                    let flipped_err = wrap_angle(det_yaw + std::f64::consts::PI - gate_yaw).abs();
                    if flipped_err <= config.max_yaw_error {
                        accepted.push(AssociatedDetection {
                            gate: entry.gate,
                            measurement: DetectionBody::Se3(flip_pose(body)),
                            global: DetectionBody::Se3(flip_pose(global)),
                            reversed: true,
                            information_se3: det.information_se3,
                            information_point: det.information_point,
                        });
                    } else {
                        rejects.yaw += 1;
                    }
                } else {
                    rejects.yaw += 1;
                }
            }
            (DetectionBody::Point(body), DetectionBody::Point(global)) => {
                accepted.push(AssociatedDetection {
                    gate: entry.gate,
                    measurement: DetectionBody::Point(*body),
                    global: DetectionBody::Point(*global),
                    reversed: false,
                    information_se3: det.information_se3,
                    information_point: det.information_point,
                });
            }
            _ => unreachable!("projection preserves the measurement kind"),
        }
    }
    rejects.duplicate += matched.iter().filter(|&&m| !m).count() as u64;
    (accepted, rejects)
}
