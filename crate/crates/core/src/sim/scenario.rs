//! Scenario files and stream export.
//!
//! A scenario is a TOML document with four optional parts; anything left
//! out takes its default:
//!
//! ```toml
//! name = "racetrack"
//! seed = 1
//!
//! [trajectory]           # TrajectorySpec
//! straight_length = 100.0
//! turn_radius = 28.64788975654116
//! speed = 10.0
//! duration = 75.0
//! altitude = 2.0
//!
//! [sensors]              # SensorConfig, with [sensors.imu_noise],
//! imu_rate = 100.0       # [sensors.camera] and [sensors.landmarks]
//! cam_rate = 30.0
//! gps_rate = 1.0
//!
//! [filter]               # FilterConfig
//! keyframe_interval = 5.0
//! r_local = 34.0
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::sensors::{
    camera_frame_index, place_landmarks, synthesize_camera, synthesize_gps, synthesize_imu,
    SensorConfig,
};
use super::trajectory::{generate_trajectory, GroundTruth, TrajectorySpec};

/// Estimator settings shared by every back-end.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    /// Seconds between keyframes.
    pub keyframe_interval: f64,
    /// Keyframes within this distance of the local center are local, m.
    pub r_local: f64,
    /// Re-center once the vehicle is this far from the local center, m.
    /// Defaults to `r_local / 2`.
    pub r_recenter: Option<f64>,
    pub n_clones: usize,
    /// Initialize keyframes with their full cross-covariance.
    pub keyframe_init_cov: bool,
    /// A keyframe observation is used for a loop closure only once the
    /// keyframe is at least this old, s.
    pub loop_min_age: f64,
    /// Initial 1σ of attitude (rad), velocity (m/s) and position (m).
    pub init_attitude_sigma: f64,
    pub init_velocity_sigma: f64,
    pub init_position_sigma: f64,
    /// Upper bound on feature tracks linearized per frame.
    pub max_tracks_per_frame: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            keyframe_interval: 5.0,
            r_local: 34.0,
            r_recenter: None,
            n_clones: 10,
            keyframe_init_cov: true,
            loop_min_age: 10.0,
            init_attitude_sigma: 0.01,
            init_velocity_sigma: 0.05,
            init_position_sigma: 0.1,
            max_tracks_per_frame: 40,
        }
    }
}

impl FilterConfig {
    pub fn r_recenter(&self) -> f64 {
        self.r_recenter.unwrap_or(self.r_local / 2.0)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("keyframe_interval", self.keyframe_interval),
            ("r_local", self.r_local),
            ("r_recenter", self.r_recenter()),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::ConfigError(format!("{name} must be positive, got {v}")));
            }
        }
        if self.n_clones < 2 {
            return Err(Error::ConfigError("n_clones must be at least 2".into()));
        }
        let sigmas = [self.init_attitude_sigma, self.init_velocity_sigma, self.init_position_sigma];
        if sigmas.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::ConfigError("initial sigmas must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub trajectory: TrajectorySpec,
    pub sensors: SensorConfig,
    pub filter: FilterConfig,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            name: "racetrack".into(),
            seed: 1,
            trajectory: TrajectorySpec::default(),
            sensors: SensorConfig::default(),
            filter: FilterConfig::default(),
        }
    }
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self> {
        let s: Scenario = toml::from_str(text).map_err(|e| Error::ConfigError(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::ConfigError(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.trajectory.validate()?;
        self.sensors.validate()?;
        self.filter.validate()
    }

    /// Ground truth with landmarks for `seed`.
    pub fn ground_truth(&self, seed: u64) -> Result<GroundTruth> {
        let mut gt = generate_trajectory(&self.trajectory, self.sensors.imu_period())?;
        place_landmarks(&mut gt, &self.sensors, seed);
        Ok(gt)
    }

    /// Camera frame times `k / cam_rate` strictly before the end of the run.
    pub fn camera_times(&self) -> Vec<f64> {
        let n = (self.trajectory.duration * self.sensors.cam_rate - 1e-9).ceil() as u64;
        (0..n).map(|k| k as f64 / self.sensors.cam_rate).collect()
    }

    /// True when camera time `t` also carries a GPS fix.
    pub fn is_gps_time(&self, t: f64) -> bool {
        let x = t * self.sensors.gps_rate;
        (x - x.round()).abs() < 1e-9 * x.abs().max(1.0)
    }
}

/// Writes `truth.csv`, `imu.csv`, `camera.csv`, `gps.csv` and
/// `landmarks.csv` to `dir`.
///
/// Columns: `truth.csv` is `t,qw,qx,qy,qz,px,py,pz,vx,vy,vz`; `imu.csv` is
/// `t,ax,ay,az,wx,wy,wz`; `camera.csv` is `t,frame,feature_id,u,v`;
/// `gps.csv` is `t,px,py,pz,vx,vy,vz`; `landmarks.csv` is `id,x,y,z`.
pub fn export_streams(scenario: &Scenario, seed: u64, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let gt = scenario.ground_truth(seed)?;
    let cfg = &scenario.sensors;
    let imu = synthesize_imu(&gt, cfg, seed);

    let mut w = csv::Writer::from_path(dir.join("imu.csv"))?;
    w.write_record(["t", "ax", "ay", "az", "wx", "wy", "wz"])?;
    for s in &imu.samples {
        let row = [s.timestamp, s.accel.x, s.accel.y, s.accel.z, s.gyro.x, s.gyro.y, s.gyro.z];
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("truth.csv"))?;
    w.write_record(["t", "qw", "qx", "qy", "qz", "px", "py", "pz", "vx", "vy", "vz"])?;
    let mut cam = csv::Writer::from_path(dir.join("camera.csv"))?;
    cam.write_record(["t", "frame", "feature_id", "u", "v"])?;
    let mut gps = csv::Writer::from_path(dir.join("gps.csv"))?;
    gps.write_record(["t", "px", "py", "pz", "vx", "vy", "vz"])?;
    for t in scenario.camera_times() {
        let k = gt.at(t);
        let q = k.pose.orientation.wxyz();
        let p = k.pose.position;
        let v = k.velocity;
        let row = [t, q[0], q[1], q[2], q[3], p.x, p.y, p.z, v.x, v.y, v.z];
        w.write_record(row.iter().map(|v| v.to_string()))?;
        let frame = camera_frame_index(cfg, t);
        for (id, px) in synthesize_camera(&gt, cfg, seed, t) {
            cam.write_record([t.to_string(), frame.to_string(), id.to_string(), px.x.to_string(), px.y.to_string()])?;
        }
        if scenario.is_gps_time(t) {
            let f = synthesize_gps(&gt, cfg, seed, t);
            let row = [t, f.position.x, f.position.y, f.position.z, f.velocity.x, f.velocity.y, f.velocity.z];
            gps.write_record(row.iter().map(|v| v.to_string()))?;
        }
    }
    w.flush()?;
    cam.flush()?;
    gps.flush()?;

    let mut w = csv::Writer::from_path(dir.join("landmarks.csv"))?;
    w.write_record(["id", "x", "y", "z"])?;
    for l in &gt.landmarks {
        w.write_record([l.id.to_string(), l.position.x.to_string(), l.position.y.to_string(), l.position.z.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
