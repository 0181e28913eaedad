//! Analytic ground truth.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::geom::{Pose, UnitQuaternion, Vec3};
use crate::state::ImuState;

/// Racetrack: two straights joined by two semicircular left turns, flown at
/// constant speed and altitude. Starts at the origin heading along +x.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySpec {
    pub straight_length: f64,
    pub turn_radius: f64,
    pub speed: f64,
    pub duration: f64,
    pub altitude: f64,
}

impl Default for TrajectorySpec {
    /// Turns last exactly 9 s and straights 10 s, so segment junctions fall
    /// on the 100 Hz grid.
    fn default() -> Self {
        Self {
            straight_length: 100.0,
            turn_radius: 90.0 / PI,
            speed: 10.0,
            duration: 75.0,
            altitude: 2.0,
        }
    }
}

impl TrajectorySpec {
    pub fn lap_length(&self) -> f64 {
        2.0 * self.straight_length + 2.0 * PI * self.turn_radius
    }

    pub fn lap_period(&self) -> f64 {
        self.lap_length() / self.speed
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("straight_length", self.straight_length),
            ("turn_radius", self.turn_radius),
            ("speed", self.speed),
            ("duration", self.duration),
            ("altitude", self.altitude),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidSpec(format!("{name} must be positive, got {v}")));
            }
        }
        if self.duration < self.lap_period() {
            return Err(Error::InvalidSpec(format!(
                "duration {} s shorter than one lap ({:.3} s)",
                self.duration,
                self.lap_period()
            )));
        }
        Ok(())
    }
}

/// True kinematic state at one instant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Kinematics {
    pub timestamp: f64,
    pub pose: Pose,
    pub velocity: Vec3,
    /// Global-frame acceleration.
    pub acceleration: Vec3,
    /// Body-frame angular rate.
    pub angular_rate: Vec3,
}

impl Kinematics {
    /// IMU state with the given true biases.
    pub fn imu_state(&self, gyro_bias: Vec3, accel_bias: Vec3) -> ImuState {
        ImuState {
            attitude: self.pose.orientation,
            gyro_bias,
            velocity: self.velocity,
            accel_bias,
            position: self.pose.position,
        }
    }
}

/// How the vehicle moves.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Motion {
    Racetrack(TrajectorySpec),
    /// Fixed pose for `duration` seconds.
    Hover { pose: Pose, duration: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Landmark {
    pub id: u64,
    pub position: Vec3,
}

/// Ground truth: the motion model sampled on demand plus the landmark field.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub motion: Motion,
    /// IMU sampling period.
    pub dt: f64,
    pub landmarks: Vec<Landmark>,
}

fn yawed(yaw: f64, position: Vec3) -> Pose {
    // q_IG of a body yawed by `yaw` about +z.
    Pose::new(UnitQuaternion::exp(&Vec3::new(0.0, 0.0, -yaw)), position)
}

fn racetrack_at(spec: &TrajectorySpec, t: f64) -> Kinematics {
    let (l, r, v) = (spec.straight_length, spec.turn_radius, spec.speed);
    let s = (v * t).rem_euclid(spec.lap_length());
    let arc = PI * r;
    let (x, y, yaw, yaw_rate, acc) = if s < l {
        (s, 0.0, 0.0, 0.0, Vec3::zeros())
    } else if s < l + arc {
        let phi = (s - l) / r;
        let a = v * v / r;
        (
            l + r * phi.sin(),
            r - r * phi.cos(),
            phi,
            v / r,
            Vec3::new(-a * phi.sin(), a * phi.cos(), 0.0),
        )
    } else if s < 2.0 * l + arc {
        let d = s - l - arc;
        (l - d, 2.0 * r, PI, 0.0, Vec3::zeros())
    } else {
        let phi = (s - 2.0 * l - arc) / r;
        let a = v * v / r;
        (
            -r * phi.sin(),
            r + r * phi.cos(),
            PI + phi,
            v / r,
            Vec3::new(a * phi.sin(), -a * phi.cos(), 0.0),
        )
    };
    Kinematics {
        timestamp: t,
        pose: yawed(yaw, Vec3::new(x, y, spec.altitude)),
        velocity: Vec3::new(v * yaw.cos(), v * yaw.sin(), 0.0),
        acceleration: acc,
        angular_rate: Vec3::new(0.0, 0.0, yaw_rate),
    }
}

impl GroundTruth {
    pub fn duration(&self) -> f64 {
        match self.motion {
            Motion::Racetrack(spec) => spec.duration,
            Motion::Hover { duration, .. } => duration,
        }
    }

    pub fn at(&self, t: f64) -> Kinematics {
        match &self.motion {
            Motion::Racetrack(spec) => racetrack_at(spec, t),
            Motion::Hover { pose, .. } => Kinematics {
                timestamp: t,
                pose: *pose,
                velocity: Vec3::zeros(),
                acceleration: Vec3::zeros(),
                angular_rate: Vec3::zeros(),
            },
        }
    }

    /// Number of IMU samples; sample `k` is at `k·dt`.
    pub fn sample_count(&self) -> usize {
        (self.duration() / self.dt).round() as usize + 1
    }

    pub fn sample_time(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }
}

/// Samples the racetrack at period `dt` (landmarks are added separately).
pub fn generate_trajectory(spec: &TrajectorySpec, dt: f64) -> Result<GroundTruth> {
    spec.validate()?;
    if !(dt > 0.0 && dt <= 0.01) {
        return Err(Error::InvalidSpec(format!("sample period {dt} outside (0, 0.01]")));
    }
    Ok(GroundTruth {
        motion: Motion::Racetrack(*spec),
        dt,
        landmarks: Vec::new(),
    })
}
