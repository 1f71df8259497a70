//! Deterministic racing-scenario generator: gate maps and ground-truth
//! trajectories on ellipse or lemniscate tracks, dead-reckoned odometry with
//! seeded drift, and noisy body-frame gate detections.
//!
//! Body frame convention: x forward, y left, z up; the camera looks along
//! +x. Everything is seeded and reproducible: the same seed always yields
//! byte-identical streams.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::assoc::RawDetection;
use crate::geometry::{relative, Pose, Rotation, Twist, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "lowercase")]
pub enum TrackShape {
    Ellipse { a: f64, b: f64 },
    Lemniscate { a: f64 },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrackSpec {
    pub shape: TrackShape,
    pub gate_count: usize,
    pub lap_count: usize,
    /// Constant ground speed, m/s.
    pub speed: f64,
    /// Trajectory and odometry sample rate, Hz.
    pub sample_rate: f64,
    /// Height of the gate centers and of the flight path, m.
    pub gate_height: f64,
}

impl Default for TrackSpec {
    fn default() -> Self {
        TrackSpec {
            shape: TrackShape::Ellipse { a: 25.0, b: 15.0 },
            gate_count: 7,
            lap_count: 2,
            speed: 8.0,
            sample_rate: 30.0,
            gate_height: 1.5,
        }
    }
}

impl TrackSpec {
    pub fn lemniscate_default() -> Self {
        TrackSpec {
            shape: TrackShape::Lemniscate { a: 30.0 },
            ..TrackSpec::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        match self.shape {
            TrackShape::Ellipse { a, b } => {
                if !(a > 0.0 && b > 0.0) {
                    return Err("ellipse semi-axes must be positive".into());
                }
            }
            TrackShape::Lemniscate { a } => {
                if !(a > 0.0) {
                    return Err("lemniscate parameter must be positive".into());
                }
            }
        }
        if self.gate_count < 2 {
            return Err("gate_count must be >= 2".into());
        }
        if self.lap_count < 1 {
            return Err("lap_count must be >= 1".into());
        }
        if !(self.speed > 0.0) {
            return Err("speed must be positive".into());
        }
        if self.sample_rate < 10.0 {
            return Err("sample_rate must be >= 10 Hz".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NoiseModel {
    /// Odometry translation random walk, m per sqrt(m) traveled.
    pub odom_trans_sigma: f64,
    /// Odometry rotation random walk, rad per sqrt(m) traveled.
    pub odom_rot_sigma: f64,
    /// Constant-velocity drift of the odometry frame, m/s. The dominant
    /// drift term; its direction is drawn once per seed.
    pub odom_bias_drift: f64,
    /// Detection position noise, m.
    pub det_pos_sigma: f64,
    /// Detection orientation noise, rad.
    pub det_rot_sigma: f64,
    /// Maximum gate detection range, m.
    pub det_range: f64,
    /// Horizontal field of view of the forward camera, rad.
    pub det_fov: f64,
    /// Probability that a geometrically visible gate is missed.
    pub det_dropout: f64,
    pub seed: u64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel {
            odom_trans_sigma: 0.02,
            odom_rot_sigma: 0.001,
            odom_bias_drift: 0.12,
            det_pos_sigma: 0.08,
            det_rot_sigma: 0.03,
            det_range: 10.0,
            det_fov: 1.4,
            det_dropout: 0.2,
            seed: 1,
        }
    }
}

impl NoiseModel {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("odom_trans_sigma", self.odom_trans_sigma),
            ("odom_rot_sigma", self.odom_rot_sigma),
            ("odom_bias_drift", self.odom_bias_drift),
            ("det_pos_sigma", self.det_pos_sigma),
            ("det_rot_sigma", self.det_rot_sigma),
        ] {
            if v < 0.0 {
                return Err(format!("{name} must be >= 0"));
            }
        }
        if !(self.det_range > 0.0) {
            return Err("det_range must be positive".into());
        }
        if !(self.det_fov > 0.0) {
            return Err("det_fov must be positive".into());
        }
        if !(0.0..1.0).contains(&self.det_dropout) {
            return Err("det_dropout must be in [0, 1)".into());
        }
        Ok(())
    }
}

/// A gate in the map: semantic id and world pose, forward axis along the
/// direction of travel.
#[derive(Clone, Copy, Debug)]
pub struct Gate {
    pub id: u32,
    pub pose: Pose,
}

/// A stamped detection frame: all gates seen at one trajectory sample.
#[derive(Clone, Debug)]
pub struct DetectionFrame {
    pub stamp: f64,
    pub detections: Vec<RawDetection>,
}

/// One seeded experiment: ground truth, map, odometry and detection streams.
#[derive(Clone, Debug)]
pub struct SimRun {
    pub ground_truth: Vec<(f64, Pose)>,
    pub gates: Vec<Gate>,
    pub odometry: Vec<(f64, Pose)>,
    pub detections: Vec<DetectionFrame>,
    /// Stamps of lap boundaries, including start and end: `lap_count + 1`
    /// entries.
    pub lap_stamps: Vec<f64>,
}

/// Arc-length lookup table over one closed lap of the track curve.
struct ArcTable {
    /// cumulative arc length at each parameter sample
    cumlen: Vec<f64>,
    points: Vec<(f64, f64)>,
}

const ARC_SAMPLES: usize = 200_000;

fn curve_point(shape: &TrackShape, t: f64) -> (f64, f64) {
    match shape {
        TrackShape::Ellipse { a, b } => (a * t.cos(), b * t.sin()),
        TrackShape::Lemniscate { a } => {
            let s = t.sin();
            let denom = 1.0 + s * s;
            (a * t.cos() / denom, a * s * t.cos() / denom)
        }
    }
}

impl ArcTable {
    fn build(shape: &TrackShape) -> ArcTable {
        let mut cumlen = Vec::with_capacity(ARC_SAMPLES + 1);
        let mut points = Vec::with_capacity(ARC_SAMPLES + 1);
        let mut acc = 0.0;
        let mut prev = curve_point(shape, 0.0);
        for i in 0..=ARC_SAMPLES {
            let t = i as f64 / ARC_SAMPLES as f64 * std::f64::consts::TAU;
            let p = curve_point(shape, t);
            if i > 0 {
                acc += ((p.0 - prev.0).powi(2) + (p.1 - prev.1).powi(2)).sqrt();
            }
            cumlen.push(acc);
            points.push(p);
            prev = p;
        }
        ArcTable { cumlen, points }
    }

    fn total(&self) -> f64 {
        *self.cumlen.last().unwrap()
    }

    /// Point and tangent heading at arc length `s` (wrapped to one lap).
    fn at(&self, s: f64) -> (f64, f64, f64) {
        let total = self.total();
        let mut s = s % total;
        if s < 0.0 {
            s += total;
        }
        let idx = self
            .cumlen
            .partition_point(|&c| c < s)
            .clamp(1, self.cumlen.len() - 1);
        let (c0, c1) = (self.cumlen[idx - 1], self.cumlen[idx]);
        let frac = if c1 > c0 { (s - c0) / (c1 - c0) } else { 0.0 };
        let (p0, p1) = (self.points[idx - 1], self.points[idx]);
        let x = p0.0 + frac * (p1.0 - p0.0);
        let y = p0.1 + frac * (p1.1 - p0.1);
        // tangent from the local chord; table resolution makes this accurate
        let yaw = (p1.1 - p0.1).atan2(p1.0 - p0.0);
        (x, y, yaw)
    }
}

/// Places gates at equal arc-length spacing (offset by half a spacing so the
/// start pose sits between gates) and samples the trajectory at constant
/// speed with yaw following the tangent.
pub fn generate_track(spec: &TrackSpec) -> (Vec<Gate>, Vec<(f64, Pose)>, Vec<f64>) {
    let table = ArcTable::build(&spec.shape);
    let lap_len = table.total();

    let gates: Vec<Gate> = (0..spec.gate_count)
        .map(|k| {
            let s = (k as f64 + 0.5) * lap_len / spec.gate_count as f64;
            let (x, y, yaw) = table.at(s);
            Gate {
                id: k as u32,
                pose: Pose::new(Rotation::from_yaw(yaw), Vec3::new(x, y, spec.gate_height)),
            }
        })
        .collect();

    let total_time = spec.lap_count as f64 * lap_len / spec.speed;
    let n_samples = (total_time * spec.sample_rate).floor() as usize;
    let trajectory: Vec<(f64, Pose)> = (0..=n_samples)
        .map(|i| {
            let t = i as f64 / spec.sample_rate;
            let (x, y, yaw) = table.at(spec.speed * t);
            (
                t,
                Pose::new(Rotation::from_yaw(yaw), Vec3::new(x, y, spec.gate_height)),
            )
        })
        .collect();

    let lap_stamps: Vec<f64> = (0..=spec.lap_count)
        .map(|k| k as f64 * lap_len / spec.speed)
        .collect();

    (gates, trajectory, lap_stamps)
}

fn normal(rng: &mut ChaCha12Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Integrates ground-truth relative poses corrupted by per-step Gaussian
/// noise scaled with sqrt(step length), plus a constant-velocity drift of
/// the odometry frame. Zero noise reproduces the ground truth exactly.
pub fn simulate_odometry(
    ground_truth: &[(f64, Pose)],
    noise: &NoiseModel,
    seed: u64,
) -> Vec<(f64, Pose)> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(1);
    // drift direction drawn once per run, horizontal
    let theta = rng.random_range(0.0..std::f64::consts::TAU);
    let bias_dir = Vec3::new(theta.cos(), theta.sin(), 0.0);

    let mut out = Vec::with_capacity(ground_truth.len());
    if ground_truth.is_empty() {
        return out;
    }
    out.push(ground_truth[0]);
    let mut pose = ground_truth[0].1;
    for w in ground_truth.windows(2) {
        let (t0, a) = w[0];
        let (t1, b) = w[1];
        let dt = t1 - t0;
        let delta = relative(&a, &b);
        let ds = delta.translation.norm();
        let scale = ds.sqrt();
        let rho = Vec3::new(
            normal(&mut rng) * noise.odom_trans_sigma * scale,
            normal(&mut rng) * noise.odom_trans_sigma * scale,
            normal(&mut rng) * noise.odom_trans_sigma * scale,
        );
        let phi = Vec3::new(
            normal(&mut rng) * noise.odom_rot_sigma * scale,
            normal(&mut rng) * noise.odom_rot_sigma * scale,
            normal(&mut rng) * noise.odom_rot_sigma * scale,
        );
        let noisy_delta = delta * Pose::exp(&Twist::new(rho, phi));
        pose = pose * noisy_delta;
        pose.translation += bias_dir * (noise.odom_bias_drift * dt);
        out.push((t1, pose));
    }
    out
}

/// Emits body-frame gate detections at trajectory samples. A gate is
/// detectable when inside `det_range` and the horizontal field of view of
/// the forward camera; a gate seen from its far side is reported with its
/// orientation flipped 180 degrees, as a square-gate PnP pipeline would.
pub fn simulate_detections(
    ground_truth: &[(f64, Pose)],
    gates: &[Gate],
    noise: &NoiseModel,
    seed: u64,
) -> Vec<DetectionFrame> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let mut frames = Vec::new();
    for &(t, drone) in ground_truth {
        let mut dets = Vec::new();
        for gate in gates {
            let r_world = gate.pose.translation - drone.translation;
            let range = r_world.norm();
            if range > noise.det_range {
                continue;
            }
            let body = drone.rotation.inverse().rotate(&r_world);
            if body.x <= 0.0 {
                continue;
            }
            let bearing = body.y.abs().atan2(body.x);
            if bearing > noise.det_fov / 2.0 {
                continue;
            }
            if noise.det_dropout > 0.0 && rng.random_range(0.0..1.0) < noise.det_dropout {
                continue;
            }
            // seen from the far side: the detector reports the flipped pose
            let normal_w = gate.pose.rotation.rotate(&Vec3::x());
            let reported = if normal_w.dot(&(drone.translation - gate.pose.translation)) > 0.0 {
                Pose::new(
                    gate.pose.rotation * Rotation::from_yaw(std::f64::consts::PI),
                    gate.pose.translation,
                )
            } else {
                gate.pose
            };
            let mut m = relative(&drone, &reported);
            m.translation += Vec3::new(
                normal(&mut rng) * noise.det_pos_sigma,
                normal(&mut rng) * noise.det_pos_sigma,
                normal(&mut rng) * noise.det_pos_sigma,
            );
            m.rotation = m.rotation
                * Rotation::exp(&Vec3::new(
                    normal(&mut rng) * noise.det_rot_sigma,
                    normal(&mut rng) * noise.det_rot_sigma,
                    normal(&mut rng) * noise.det_rot_sigma,
                ));
            dets.push(RawDetection::se3(t, m));
        }
        if !dets.is_empty() {
            frames.push(DetectionFrame {
                stamp: t,
                detections: dets,
            });
        }
    }
    frames
}

/// Builds a complete seeded run.
pub fn simulate(spec: &TrackSpec, noise: &NoiseModel, seed: u64) -> SimRun {
    let (gates, ground_truth, lap_stamps) = generate_track(spec);
    let odometry = simulate_odometry(&ground_truth, noise, seed);
    let detections = simulate_detections(&ground_truth, &gates, noise, seed);
    SimRun {
        ground_truth,
        gates,
        odometry,
        detections,
        lap_stamps,
    }
}

/// Thins detection frames so that consecutive kept frames are at least
/// `min_distance` apart in traveled odometry distance. Used by the ablation
/// harness and the single-observation equivalence checks.
pub fn thin_detections_by_distance(
    frames: &[DetectionFrame],
    odometry: &[(f64, Pose)],
    min_distance: f64,
) -> Vec<DetectionFrame> {
    let mut kept = Vec::new();
    let mut cursor = 0usize;
    let mut traveled = 0.0;
    let mut last_kept: Option<f64> = None;
    for frame in frames {
        while cursor + 1 < odometry.len() && odometry[cursor + 1].0 <= frame.stamp {
            traveled +=
                (odometry[cursor + 1].1.translation - odometry[cursor].1.translation).norm();
            cursor += 1;
        }
        match last_kept {
            Some(prev) if traveled - prev < min_distance => {}
            _ => {
                kept.push(frame.clone());
                last_kept = Some(traveled);
            }
        }
    }
    kept
}
