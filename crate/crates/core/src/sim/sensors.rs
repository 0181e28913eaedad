//! Seeded sensor synthesis.
//!
//! Every sensor draws from its own ChaCha8 stream derived from the run
//! seed, so adding or removing one sensor never changes another's noise.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Pose, UnitQuaternion, Vec3};
use crate::propagation::{ImuNoiseParams, ImuSample, GRAVITY};
use crate::state::{imu_idx, StateVector};
use crate::vision::{LinearizedBlock, PinholeCamera, Vec2};

use super::trajectory::{GroundTruth, Landmark, Motion};

const IMU_STREAM: u64 = 1;
const LANDMARK_STREAM: u64 = 3;
pub(crate) const INIT_STREAM: u64 = 4;
const CAMERA_STREAM_BASE: u64 = 1 << 32;
const GPS_STREAM_BASE: u64 = 2 << 32;

pub(crate) fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

pub(crate) fn gaussian3(rng: &mut impl Rng, sigma: f64) -> Vec3 {
    let mut n = || -> f64 { rng.sample(StandardNormal) };
    Vec3::new(n(), n(), n()) * sigma
}

/// Camera intrinsics and mounting as written in scenario files.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraConfig {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    /// Rotation vector of `q_CI` (body to camera).
    pub rotation: [f64; 3],
    /// Camera origin in the body frame, m.
    pub translation: [f64; 3],
}

impl CameraConfig {
    pub fn pinhole(&self) -> PinholeCamera {
        PinholeCamera {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            extrinsics: Pose::new(
                UnitQuaternion::exp(&Vec3::from(self.rotation)),
                Vec3::from(self.translation),
            ),
            width: self.width,
            height: self.height,
        }
    }
}

impl Default for CameraConfig {
    fn default() -> Self {
        let cam = PinholeCamera::default();
        let r = cam.extrinsics.orientation.log();
        Self {
            fx: cam.fx,
            fy: cam.fy,
            cx: cam.cx,
            cy: cam.cy,
            width: cam.width,
            height: cam.height,
            rotation: [r.x, r.y, r.z],
            translation: [
                cam.extrinsics.position.x,
                cam.extrinsics.position.y,
                cam.extrinsics.position.z,
            ],
        }
    }
}

/// Landmark field: a band on both sides of the track.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LandmarkRegion {
    pub count: usize,
    /// Lateral distance from the track centerline, m.
    pub inner_offset: f64,
    pub outer_offset: f64,
    /// Landmarks lie within ± this of the flight altitude, m.
    pub height_span: f64,
    /// Visible depth range along the optical axis, m.
    pub min_depth: f64,
    pub max_depth: f64,
}

impl Default for LandmarkRegion {
    fn default() -> Self {
        Self {
            count: 800,
            inner_offset: 4.0,
            outer_offset: 20.0,
            height_span: 4.0,
            min_depth: 1.0,
            max_depth: 40.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorConfig {
    pub imu_rate: f64,
    pub cam_rate: f64,
    pub gps_rate: f64,
    pub imu_noise: ImuNoiseParams,
    /// Standard deviation of the initial biases (and of the filter prior on them).
    pub gyro_bias_sigma: f64,
    pub accel_bias_sigma: f64,
    pub pixel_sigma: f64,
    pub gps_pos_sigma: f64,
    pub gps_vel_sigma: f64,
    pub camera: CameraConfig,
    pub landmarks: LandmarkRegion,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            imu_rate: 100.0,
            cam_rate: 30.0,
            gps_rate: 1.0,
            imu_noise: ImuNoiseParams::default(),
            gyro_bias_sigma: 1e-3,
            accel_bias_sigma: 1e-2,
            pixel_sigma: 1.0,
            gps_pos_sigma: 1.0,
            gps_vel_sigma: 0.1,
            camera: CameraConfig::default(),
            landmarks: LandmarkRegion::default(),
        }
    }
}

impl SensorConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [self.imu_rate, self.cam_rate, self.gps_rate];
        if rates.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(Error::ConfigError("sensor rates must be positive".into()));
        }
        if !(self.imu_rate >= self.cam_rate && self.cam_rate >= self.gps_rate) {
            return Err(Error::ConfigError("rates must satisfy imu ≥ cam ≥ gps".into()));
        }
        let sigmas = [
            self.gyro_bias_sigma,
            self.accel_bias_sigma,
            self.pixel_sigma,
            self.gps_pos_sigma,
            self.gps_vel_sigma,
        ];
        if sigmas.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::ConfigError("noise sigmas must be non-negative".into()));
        }
        if self.pixel_sigma <= 0.0 {
            return Err(Error::ConfigError("pixel_sigma must be positive".into()));
        }
        let l = &self.landmarks;
        if !(l.inner_offset >= 0.0 && l.outer_offset > l.inner_offset && l.max_depth > l.min_depth && l.min_depth > 0.0)
        {
            return Err(Error::ConfigError("landmark region is empty".into()));
        }
        self.imu_noise.validate()?;
        self.camera.pinhole().validate()
    }

    pub fn imu_period(&self) -> f64 {
        1.0 / self.imu_rate
    }
}

/// IMU measurements plus the true bias trajectories behind them.
#[derive(Clone, Debug, PartialEq)]
pub struct ImuStream {
    pub samples: Vec<ImuSample>,
    pub gyro_bias: Vec<Vec3>,
    pub accel_bias: Vec<Vec3>,
}

/// `a_m = R_IG (a − g) + b_a + n_a`, `ω_m = ω + b_g + n_g`, one sample per
/// IMU period. Each sample holds the motion over its interval, so the
/// kinematics are evaluated at the interval midpoint.
pub fn synthesize_imu(gt: &GroundTruth, config: &SensorConfig, seed: u64) -> ImuStream {
    let mut rng = stream(seed, IMU_STREAM);
    let dt = config.imu_period();
    let n = (gt.duration() * config.imu_rate).round() as usize + 1;
    let noise = &config.imu_noise;
    let (sg, sa) = (noise.gyro_noise_density / dt.sqrt(), noise.accel_noise_density / dt.sqrt());
    let (wg, wa) = (noise.gyro_bias_walk * dt.sqrt(), noise.accel_bias_walk * dt.sqrt());

    let mut bg = gaussian3(&mut rng, config.gyro_bias_sigma);
    let mut ba = gaussian3(&mut rng, config.accel_bias_sigma);
    let mut out = ImuStream {
        samples: Vec::with_capacity(n),
        gyro_bias: Vec::with_capacity(n),
        accel_bias: Vec::with_capacity(n),
    };
    for k in 0..n {
        let t = k as f64 / config.imu_rate;
        let kin = gt.at(t + 0.5 * dt);
        let r_ig = kin.pose.orientation.to_rotation_matrix();
        let accel = r_ig * (kin.acceleration - GRAVITY) + ba + gaussian3(&mut rng, sa);
        let gyro = kin.angular_rate + bg + gaussian3(&mut rng, sg);
        out.samples.push(ImuSample { timestamp: t, accel, gyro });
        out.gyro_bias.push(bg);
        out.accel_bias.push(ba);
        bg += gaussian3(&mut rng, wg);
        ba += gaussian3(&mut rng, wa);
    }
    out
}

/// Scatters landmarks uniformly along a band flanking the track (or in a
/// box ahead of a hovering vehicle). Ids are `0..count`.
pub fn place_landmarks(gt: &mut GroundTruth, config: &SensorConfig, seed: u64) {
    let mut rng = stream(seed, LANDMARK_STREAM);
    let region = &config.landmarks;
    gt.landmarks = (0..region.count as u64)
        .map(|id| {
            let position = match gt.motion {
                Motion::Racetrack(spec) => {
                    let t = rng.random_range(0.0..spec.lap_period());
                    let kin = gt.at(t);
                    let heading = kin.velocity.normalize();
                    let left = Vec3::new(-heading.y, heading.x, 0.0);
                    let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                    let offset = rng.random_range(region.inner_offset..region.outer_offset);
                    let dz = rng.random_range(-region.height_span..=region.height_span);
                    kin.pose.position + left * side * offset + Vec3::new(0.0, 0.0, dz)
                }
                Motion::Hover { pose, .. } => {
                    let r_gi = pose.orientation.to_rotation_matrix().transpose();
                    let local = Vec3::new(
                        rng.random_range(region.min_depth + 4.0..region.max_depth),
                        rng.random_range(-10.0..10.0),
                        rng.random_range(-region.height_span..=region.height_span),
                    );
                    pose.position + r_gi * local
                }
            };
            Landmark { id, position }
        })
        .collect();
}

/// Index of the camera frame at time `t`.
pub fn camera_frame_index(config: &SensorConfig, t: f64) -> u64 {
    (t * config.cam_rate).round() as u64
}

/// Noise-free pixel of every landmark visible from the true pose at `t`.
pub fn visible_landmarks(gt: &GroundTruth, config: &SensorConfig, t: f64) -> Vec<(u64, Vec2)> {
    let camera = config.camera.pinhole();
    let pose = gt.at(t).pose;
    let region = &config.landmarks;
    gt.landmarks
        .iter()
        .filter_map(|l| {
            let p_c = camera.to_camera(&pose, &l.position);
            if p_c.z < region.min_depth || p_c.z > region.max_depth {
                return None;
            }
            let px = camera.project_camera(&p_c)?;
            camera.in_image(&px).then_some((l.id, px))
        })
        .collect()
}

/// Pixel observations at camera time `t`, ordered by landmark id.
pub fn synthesize_camera(gt: &GroundTruth, config: &SensorConfig, seed: u64, t: f64) -> Vec<(u64, Vec2)> {
    let mut rng = stream(seed, CAMERA_STREAM_BASE + camera_frame_index(config, t));
    visible_landmarks(gt, config, t)
        .into_iter()
        .map(|(id, px)| {
            let n: Vec2 = Vec2::new(rng.sample(StandardNormal), rng.sample(StandardNormal));
            (id, px + n * config.pixel_sigma)
        })
        .collect()
}

/// Loosely-coupled position and velocity fix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GpsFix {
    pub timestamp: f64,
    pub position: Vec3,
    pub velocity: Vec3,
    pub pos_sigma: f64,
    pub vel_sigma: f64,
}

pub fn synthesize_gps(gt: &GroundTruth, config: &SensorConfig, seed: u64, t: f64) -> GpsFix {
    let index = (t * config.gps_rate).round() as u64;
    let mut rng = stream(seed, GPS_STREAM_BASE + index);
    let kin = gt.at(t);
    GpsFix {
        timestamp: t,
        position: kin.pose.position + gaussian3(&mut rng, config.gps_pos_sigma),
        velocity: kin.velocity + gaussian3(&mut rng, config.gps_vel_sigma),
        pos_sigma: config.gps_pos_sigma,
        vel_sigma: config.gps_vel_sigma,
    }
}

/// Direct measurement of the IMU position and velocity, over the local
/// error state.
pub fn gps_update_block(fix: &GpsFix, state: &StateVector) -> LinearizedBlock {
    let dl = state.local_dim();
    let mut h = DMatrix::zeros(6, dl);
    for i in 0..3 {
        h[(i, imu_idx::P + i)] = 1.0;
        h[(3 + i, imu_idx::V + i)] = 1.0;
    }
    let dp = fix.position - state.imu.position;
    let dv = fix.velocity - state.imu.velocity;
    let mut noise = DMatrix::zeros(6, 6);
    for i in 0..3 {
        noise[(i, i)] = fix.pos_sigma.powi(2).max(1e-12);
        noise[(3 + i, 3 + i)] = fix.vel_sigma.powi(2).max(1e-12);
    }
    LinearizedBlock {
        h,
        residual: DVector::from_iterator(6, dp.iter().chain(dv.iter()).copied()),
        noise,
    }
}

/// Sample standard deviation of scalar draws.
#[cfg(test)]
fn sample_sigma(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}
