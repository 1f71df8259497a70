//! Experiment configuration: a key-value text file plus command-line
//! overrides, validated before any run.
//!
//! File format: one `key = value` per line, `#` comments. Keys:
//!
//! ```text
//! track.shape = ellipse          # ellipse | lemniscate
//! track.a = 25.0                 # ellipse semi-axis / lemniscate size, m
//! track.b = 15.0                 # ellipse only
//! track.gates = 7
//! track.laps = 2
//! track.speed = 8.0              # m/s
//! track.rate = 30.0              # Hz
//! track.gate_height = 1.5        # m
//! noise.odom_trans_sigma = 0.02  # m per sqrt(m)
//! noise.odom_rot_sigma = 0.001   # rad per sqrt(m)
//! noise.odom_bias = 0.12         # m/s odometry-frame drift
//! noise.det_pos_sigma = 0.08     # m
//! noise.det_rot_sigma = 0.03     # rad
//! noise.det_range = 10.0         # m
//! noise.det_fov = 1.4            # rad
//! noise.det_dropout = 0.2
//! dual.d_main = 2.0              # m
//! dual.d_temp = 0.1              # m
//! dual.single_graph = false
//! dual.landmark_kind = pose      # pose | point
//! dual.distill_info = schur      # schur | sum
//! dual.temp_max_iterations = 10
//! dual.main_max_iterations = 15
//! assoc.max_match_distance = 1.5 # m
//! assoc.max_yaw_error = 0.6      # rad
//! assoc.allow_reverse = true
//! seeds = 1..20                  # range or comma list
//! ```

use std::fmt::Write as _;
use std::path::Path;

use gateloc_core::dual::{DistillInfoMode, DualGraphConfig, LandmarkKind};
use gateloc_core::sim::{NoiseModel, TrackShape, TrackSpec};
use thiserror::Error;

#[derive(Debug, Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub track: TrackSpec,
    pub noise: NoiseModel,
    pub dual: DualGraphConfig,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            track: TrackSpec::default(),
            noise: NoiseModel::default(),
            dual: DualGraphConfig::default(),
            seeds: vec![1],
        }
    }
}

pub fn parse_seeds(s: &str) -> Result<Vec<u64>, ConfigError> {
    let s = s.trim();
    if let Some((a, b)) = s.split_once("..") {
        let lo: u64 = a
            .trim()
            .parse()
            .map_err(|e| ConfigError(format!("bad seed range start {a:?}: {e}")))?;
        let hi: u64 = b
            .trim()
            .parse()
            .map_err(|e| ConfigError(format!("bad seed range end {b:?}: {e}")))?;
        if hi < lo {
            return Err(ConfigError(format!("empty seed range {s:?}")));
        }
        Ok((lo..=hi).collect())
    } else {
        s.split(',')
            .map(|f| {
                f.trim()
                    .parse()
                    .map_err(|e| ConfigError(format!("bad seed {f:?}: {e}")))
            })
            .collect()
    }
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
        let mut config = ExperimentConfig::default();
        config.apply_text(&text)?;
        Ok(config)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ConfigError(format!("line {}: expected key = value", i + 1)))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| ConfigError(format!("line {}: {}", i + 1, e.0)))?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let f = |v: &str| -> Result<f64, ConfigError> {
            v.parse()
                .map_err(|e| ConfigError(format!("bad number {v:?}: {e}")))
        };
        let b = |v: &str| -> Result<bool, ConfigError> {
            v.parse()
                .map_err(|e| ConfigError(format!("bad boolean {v:?}: {e}")))
        };
        let u = |v: &str| -> Result<usize, ConfigError> {
            v.parse()
                .map_err(|e| ConfigError(format!("bad integer {v:?}: {e}")))
        };
        match key {
            "track.shape" => {
                self.track.shape = match value {
                    "ellipse" => {
                        let (a, b) = match self.track.shape {
                            TrackShape::Ellipse { a, b } => (a, b),
                            _ => (25.0, 15.0),
                        };
                        TrackShape::Ellipse { a, b }
                    }
                    "lemniscate" => {
                        let a = match self.track.shape {
                            TrackShape::Lemniscate { a } => a,
                            _ => 30.0,
                        };
                        TrackShape::Lemniscate { a }
                    }
                    other => return Err(ConfigError(format!("unknown track shape {other:?}"))),
                }
            }
            "track.a" => {
                self.track.shape = match self.track.shape {
                    TrackShape::Ellipse { b, .. } => TrackShape::Ellipse { a: f(value)?, b },
                    TrackShape::Lemniscate { .. } => TrackShape::Lemniscate { a: f(value)? },
                }
            }
            "track.b" => {
                self.track.shape = match self.track.shape {
                    TrackShape::Ellipse { a, .. } => TrackShape::Ellipse { a, b: f(value)? },
                    other => other,
                }
            }
            "track.gates" => self.track.gate_count = u(value)?,
            "track.laps" => self.track.lap_count = u(value)?,
            "track.speed" => self.track.speed = f(value)?,
            "track.rate" => self.track.sample_rate = f(value)?,
            "track.gate_height" => self.track.gate_height = f(value)?,
            "noise.odom_trans_sigma" => self.noise.odom_trans_sigma = f(value)?,
            "noise.odom_rot_sigma" => self.noise.odom_rot_sigma = f(value)?,
            "noise.odom_bias" => self.noise.odom_bias_drift = f(value)?,
            "noise.det_pos_sigma" => self.noise.det_pos_sigma = f(value)?,
            "noise.det_rot_sigma" => self.noise.det_rot_sigma = f(value)?,
            "noise.det_range" => self.noise.det_range = f(value)?,
            "noise.det_fov" => self.noise.det_fov = f(value)?,
            "noise.det_dropout" => self.noise.det_dropout = f(value)?,
            "dual.d_main" => self.dual.d_main = f(value)?,
            "dual.d_temp" => self.dual.d_temp = f(value)?,
            "dual.single_graph" => self.dual.single_graph_mode = b(value)?,
            "dual.landmark_kind" => {
                self.dual.landmark_kind = match value {
                    "pose" => LandmarkKind::Pose,
                    "point" => LandmarkKind::Point,
                    other => return Err(ConfigError(format!("unknown landmark kind {other:?}"))),
                }
            }
            "dual.distill_info" => {
                self.dual.distill_info = match value {
                    "schur" => DistillInfoMode::SchurMarginal,
                    "sum" => DistillInfoMode::EdgeInfoSum,
                    other => return Err(ConfigError(format!("unknown distill mode {other:?}"))),
                }
            }
            "dual.temp_max_iterations" => self.dual.temp_solver.max_iterations = u(value)?,
            "dual.main_max_iterations" => self.dual.main_solver.max_iterations = u(value)?,
            "assoc.max_match_distance" => self.dual.association.max_match_distance = f(value)?,
            "assoc.max_yaw_error" => self.dual.association.max_yaw_error = f(value)?,
            "assoc.allow_reverse" => self.dual.association.allow_reverse = b(value)?,
            "seeds" => self.seeds = parse_seeds(value)?,
            other => return Err(ConfigError(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.track.validate().map_err(ConfigError)?;
        self.noise.validate().map_err(ConfigError)?;
        self.dual
            .validate()
            .map_err(|e| ConfigError(e.to_string()))?;
        if self.seeds.is_empty() {
            return Err(ConfigError("seed list is empty".into()));
        }
        Ok(())
    }

    /// Canonical text for the run-provenance hash: every key in file order.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        match self.track.shape {
            TrackShape::Ellipse { a, b } => {
                let _ = writeln!(s, "track.shape = ellipse");
                let _ = writeln!(s, "track.a = {a}");
                let _ = writeln!(s, "track.b = {b}");
            }
            TrackShape::Lemniscate { a } => {
                let _ = writeln!(s, "track.shape = lemniscate");
                let _ = writeln!(s, "track.a = {a}");
            }
        }
        let _ = writeln!(s, "track.gates = {}", self.track.gate_count);
        let _ = writeln!(s, "track.laps = {}", self.track.lap_count);
        let _ = writeln!(s, "track.speed = {}", self.track.speed);
        let _ = writeln!(s, "track.rate = {}", self.track.sample_rate);
        let _ = writeln!(s, "track.gate_height = {}", self.track.gate_height);
        let _ = writeln!(
            s,
            "noise.odom_trans_sigma = {}",
            self.noise.odom_trans_sigma
        );
        let _ = writeln!(s, "noise.odom_rot_sigma = {}", self.noise.odom_rot_sigma);
        let _ = writeln!(s, "noise.odom_bias = {}", self.noise.odom_bias_drift);
        let _ = writeln!(s, "noise.det_pos_sigma = {}", self.noise.det_pos_sigma);
        let _ = writeln!(s, "noise.det_rot_sigma = {}", self.noise.det_rot_sigma);
        let _ = writeln!(s, "noise.det_range = {}", self.noise.det_range);
        let _ = writeln!(s, "noise.det_fov = {}", self.noise.det_fov);
        let _ = writeln!(s, "noise.det_dropout = {}", self.noise.det_dropout);
        let _ = writeln!(s, "dual.d_main = {}", self.dual.d_main);
        let _ = writeln!(s, "dual.d_temp = {}", self.dual.d_temp);
        let _ = writeln!(s, "dual.single_graph = {}", self.dual.single_graph_mode);
        let _ = writeln!(
            s,
            "dual.landmark_kind = {}",
            match self.dual.landmark_kind {
                LandmarkKind::Pose => "pose",
                LandmarkKind::Point => "point",
            }
        );
        let _ = writeln!(
            s,
            "dual.distill_info = {}",
            match self.dual.distill_info {
                DistillInfoMode::SchurMarginal => "schur",
                DistillInfoMode::EdgeInfoSum => "sum",
            }
        );
        let _ = writeln!(
            s,
            "dual.temp_max_iterations = {}",
            self.dual.temp_solver.max_iterations
        );
        let _ = writeln!(
            s,
            "dual.main_max_iterations = {}",
            self.dual.main_solver.max_iterations
        );
        let _ = writeln!(
            s,
            "assoc.max_match_distance = {}",
            self.dual.association.max_match_distance
        );
        let _ = writeln!(
            s,
            "assoc.max_yaw_error = {}",
            self.dual.association.max_yaw_error
        );
        let _ = writeln!(
            s,
            "assoc.allow_reverse = {}",
            self.dual.association.allow_reverse
        );
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_overrides() {
        let mut c = ExperimentConfig::default();
        c.apply_text(
            "# comment\ntrack.shape = lemniscate\ntrack.a = 40\ndual.d_main = 3.0\nseeds = 2..4\n",
        )
        .unwrap();
        assert_eq!(c.track.shape, TrackShape::Lemniscate { a: 40.0 });
        assert_eq!(c.dual.d_main, 3.0);
        assert_eq!(c.seeds, vec![2, 3, 4]);
        c.set("dual.d_main", "2.5").unwrap();
        assert_eq!(c.dual.d_main, 2.5);
    }

    #[test]
    fn rejects_unknown_key() {
        let mut c = ExperimentConfig::default();
        assert!(c.apply_text("nope = 1\n").is_err());
    }

    #[test]
    fn cross_field_validation() {
        let mut c = ExperimentConfig::default();
        c.set("dual.d_temp", "5.0").unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn seed_lists() {
        assert_eq!(parse_seeds("7").unwrap(), vec![7]);
        assert_eq!(parse_seeds("1,3,5").unwrap(), vec![1, 3, 5]);
        assert_eq!(parse_seeds("1..3").unwrap(), vec![1, 2, 3]);
        assert!(parse_seeds("5..1").is_err());
    }

    #[test]
    fn canonical_text_differs_on_changes() {
        let a = ExperimentConfig::default().canonical();
        let mut c = ExperimentConfig::default();
        c.set("dual.d_temp", "0.5").unwrap();
        assert_ne!(a, c.canonical());
    }
}
