//! Run reports and their CSV / summary export.
//!
//! `export` writes, into the output directory:
//!
//! * `steps.csv`: one row per camera step. Columns `step,t`, the estimated
//!   IMU state `qw,qx,qy,qz,bgx,bgy,bgz,vx,vy,vz,bax,bay,baz,px,py,pz`, the
//!   truth `true_qw..true_qz,true_px..true_pz,true_vx..true_vz`,
//!   `pos_err,att_err,nees`, pose 3σ `sig_th{x,y,z},sig_p{x,y,z}`,
//!   `state_dim,local_dim,global_dim,update_rows,update_flops,recovery_flops`
//!   and `events` (`|`-separated tags).
//! * `keyframes.csv`: long format, one row per keyframe per step:
//!   `step,t,keyframe_id,partition,qw,qx,qy,qz,px,py,pz`, 3σ bounds
//!   `sig_th{x,y,z},sig_p{x,y,z}` and the step's `events`. Filtering on one
//!   `keyframe_id` gives a plot-ready uncertainty series.
//! * `summary.toml`: [`RunSummary`].
//! * `timing.csv`: `step,wall_time_s`. Kept apart because wall time is the
//!   only non-deterministic output.

use std::fmt;
use std::path::Path;

use nalgebra::Matrix6;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::Backend;
use crate::geom::{Pose, Vec3, Vec6};
use crate::state::{ImuState, Partition};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Event {
    KeyframeAdded,
    Gps,
    Recovery,
    Recenter,
}

impl Event {
    pub fn as_str(&self) -> &'static str {
        match self {
            Event::KeyframeAdded => "KF_ADDED",
            Event::Gps => "GPS",
            Event::Recovery => "RECOVERY",
            Event::Recenter => "RECENTER",
        }
    }
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KeyframeSnapshot {
    pub id: u64,
    pub partition: Partition,
    pub pose: Pose,
    pub sigma3: Vec6,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRow {
    pub step: usize,
    pub timestamp: f64,
    pub estimate: ImuState,
    pub truth_pose: Pose,
    pub truth_velocity: Vec3,
    /// Covariance of the IMU pose error `[dθ, dp]`.
    pub pose_cov: Matrix6<f64>,
    pub position_error: f64,
    pub attitude_error: f64,
    pub nees: f64,
    pub keyframes: Vec<KeyframeSnapshot>,
    pub state_dim: usize,
    pub local_dim: usize,
    pub global_dim: usize,
    pub update_rows: usize,
    pub update_flops: u64,
    pub recovery_flops: u64,
    pub events: Vec<Event>,
    pub wall_time: f64,
}

impl StepRow {
    pub fn has(&self, e: Event) -> bool {
        self.events.contains(&e)
    }

    fn events_str(&self) -> String {
        self.events.iter().map(Event::as_str).collect::<Vec<_>>().join("|")
    }

    pub fn pose_sigma3(&self) -> Vec6 {
        Vec6::from_fn(|i, _| 3.0 * self.pose_cov[(i, i)].max(0.0).sqrt())
    }
}

/// Feature-processing counters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrackStats {
    /// Tracks linearized and projected.
    pub processed: usize,
    pub accepted: usize,
    pub gated_out: usize,
    /// Dropped for low parallax, divergence, negative depth or rank.
    pub dropped: usize,
    /// Ended with fewer than two observations or over the per-frame cap.
    pub skipped: usize,
    pub loop_closures: usize,
    pub global_keyframe_touched: usize,
    /// Largest `‖Nᵀ H_f‖∞` seen.
    pub max_nullspace_error: f64,
    /// Tracks whose projected row count differed from `2·obs − 3`.
    pub dimension_violations: usize,
}

/// Dense-twin comparison results.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LockstepStats {
    /// Max abs difference of the manifold mean, over every comparison.
    pub max_mean_divergence: f64,
    /// Max abs covariance entry difference.
    pub max_cov_divergence: f64,
    /// Full-state comparisons made.
    pub full_checks: usize,
    /// Steps where `P_schmidt − P_dense` had an eigenvalue below
    /// `−1e-9·trace` (Schmidt runs only).
    pub conservative_violations: usize,
    /// Smallest `min eig(P_schmidt − P_dense) / trace(P_schmidt)` sampled.
    pub min_psd_margin: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: String,
    pub scenario: String,
    pub seed: u64,
    pub steps: usize,
    pub rmse_position: f64,
    pub rmse_attitude: f64,
    pub mean_nees: f64,
    pub recoveries: usize,
    pub recenters: usize,
    /// Mean time between consecutive re-centers, s.
    pub mean_recenter_period: f64,
    pub keyframes: usize,
    pub gps_updates: usize,
    pub peak_state_dim: usize,
    pub total_update_flops: u64,
    pub total_recovery_flops: u64,
    pub tracks: TrackStats,
    /// Schmidt runs: every keyframe mean equals its initial value.
    pub keyframes_frozen: Option<bool>,
    pub lockstep: Option<LockstepStats>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub mode: Backend,
    pub rows: Vec<StepRow>,
    pub summary: RunSummary,
}

impl RunReport {
    pub fn mean_step_time(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().map(|r| r.wall_time).sum::<f64>() / self.rows.len() as f64
    }
}

/// Flat `steps.csv` record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub t: f64,
    pub qw: f64,
    pub qx: f64,
    pub qy: f64,
    pub qz: f64,
    pub bgx: f64,
    pub bgy: f64,
    pub bgz: f64,
    pub vx: f64,
    pub vy: f64,
    pub vz: f64,
    pub bax: f64,
    pub bay: f64,
    pub baz: f64,
    pub px: f64,
    pub py: f64,
    pub pz: f64,
    pub true_qw: f64,
    pub true_qx: f64,
    pub true_qy: f64,
    pub true_qz: f64,
    pub true_px: f64,
    pub true_py: f64,
    pub true_pz: f64,
    pub true_vx: f64,
    pub true_vy: f64,
    pub true_vz: f64,
    pub pos_err: f64,
    pub att_err: f64,
    pub nees: f64,
    pub sig_thx: f64,
    pub sig_thy: f64,
    pub sig_thz: f64,
    pub sig_px: f64,
    pub sig_py: f64,
    pub sig_pz: f64,
    pub state_dim: usize,
    pub local_dim: usize,
    pub global_dim: usize,
    pub update_rows: usize,
    pub update_flops: u64,
    pub recovery_flops: u64,
    pub events: String,
}

impl From<&StepRow> for StepRecord {
    fn from(r: &StepRow) -> Self {
        let q = r.estimate.attitude.wxyz();
        let tq = r.truth_pose.orientation.wxyz();
        let (bg, v, ba, p) = (r.estimate.gyro_bias, r.estimate.velocity, r.estimate.accel_bias, r.estimate.position);
        let tp = r.truth_pose.position;
        let tv = r.truth_velocity;
        let s = r.pose_sigma3();
        StepRecord {
            step: r.step,
            t: r.timestamp,
            qw: q[0],
            qx: q[1],
            qy: q[2],
            qz: q[3],
            bgx: bg.x,
            bgy: bg.y,
            bgz: bg.z,
            vx: v.x,
            vy: v.y,
            vz: v.z,
            bax: ba.x,
            bay: ba.y,
            baz: ba.z,
            px: p.x,
            py: p.y,
            pz: p.z,
            true_qw: tq[0],
            true_qx: tq[1],
            true_qy: tq[2],
            true_qz: tq[3],
            true_px: tp.x,
            true_py: tp.y,
            true_pz: tp.z,
            true_vx: tv.x,
            true_vy: tv.y,
            true_vz: tv.z,
            pos_err: r.position_error,
            att_err: r.attitude_error,
            nees: r.nees,
            sig_thx: s[0],
            sig_thy: s[1],
            sig_thz: s[2],
            sig_px: s[3],
            sig_py: s[4],
            sig_pz: s[5],
            state_dim: r.state_dim,
            local_dim: r.local_dim,
            global_dim: r.global_dim,
            update_rows: r.update_rows,
            update_flops: r.update_flops,
            recovery_flops: r.recovery_flops,
            events: r.events_str(),
        }
    }
}

/// Flat `keyframes.csv` record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeyframeRecord {
    pub step: usize,
    pub t: f64,
    pub keyframe_id: u64,
    pub partition: String,
    pub qw: f64,
    pub qx: f64,
    pub qy: f64,
    pub qz: f64,
    pub px: f64,
    pub py: f64,
    pub pz: f64,
    pub sig_thx: f64,
    pub sig_thy: f64,
    pub sig_thz: f64,
    pub sig_px: f64,
    pub sig_py: f64,
    pub sig_pz: f64,
    pub events: String,
}

pub fn keyframe_records(rows: &[StepRow]) -> Vec<KeyframeRecord> {
    rows.iter()
        .flat_map(|r| {
            let events = r.events_str();
            r.keyframes.iter().map(move |k| {
                let q = k.pose.orientation.wxyz();
                let p = k.pose.position;
                let s = k.sigma3;
                KeyframeRecord {
                    step: r.step,
                    t: r.timestamp,
                    keyframe_id: k.id,
                    partition: k.partition.as_str().to_string(),
                    qw: q[0],
                    qx: q[1],
                    qy: q[2],
                    qz: q[3],
                    px: p.x,
                    py: p.y,
                    pz: p.z,
                    sig_thx: s[0],
                    sig_thy: s[1],
                    sig_thz: s[2],
                    sig_px: s[3],
                    sig_py: s[4],
                    sig_pz: s[5],
                    events: events.clone(),
                }
            })
        })
        .collect()
}

fn write_records<T: Serialize>(path: &Path, records: &[T], header: &[&str]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(header)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn read_records<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|x| x.map_err(Error::from)).collect()
}

pub const STEP_COLUMNS: [&str; 44] = [
    "step", "t", "qw", "qx", "qy", "qz", "bgx", "bgy", "bgz", "vx", "vy", "vz", "bax", "bay", "baz",
    "px", "py", "pz", "true_qw", "true_qx", "true_qy", "true_qz", "true_px", "true_py", "true_pz",
    "true_vx", "true_vy", "true_vz", "pos_err", "att_err", "nees", "sig_thx", "sig_thy", "sig_thz",
    "sig_px", "sig_py", "sig_pz", "state_dim", "local_dim", "global_dim", "update_rows",
    "update_flops", "recovery_flops", "events",
];

pub const KEYFRAME_COLUMNS: [&str; 18] = [
    "step", "t", "keyframe_id", "partition", "qw", "qx", "qy", "qz", "px", "py", "pz", "sig_thx",
    "sig_thy", "sig_thz", "sig_px", "sig_py", "sig_pz", "events",
];

/// Output format selector for [`export`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExportFormat {
    /// `steps.csv`, `keyframes.csv` and `timing.csv`.
    Csv,
    /// `summary.toml`.
    Summary,
}

pub fn export(report: &RunReport, format: ExportFormat, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    match format {
        ExportFormat::Csv => {
            let steps: Vec<StepRecord> = report.rows.iter().map(StepRecord::from).collect();
            write_records(&dir.join("steps.csv"), &steps, &STEP_COLUMNS)?;
            write_records(&dir.join("keyframes.csv"), &keyframe_records(&report.rows), &KEYFRAME_COLUMNS)?;
            let mut w = csv::Writer::from_path(dir.join("timing.csv"))?;
            w.write_record(["step", "wall_time_s"])?;
            for r in &report.rows {
                w.write_record([r.step.to_string(), r.wall_time.to_string()])?;
            }
            w.flush()?;
        }
        ExportFormat::Summary => {
            let text = toml::to_string(&report.summary)
                .map_err(|e| Error::ConfigError(format!("summary serialization: {e}")))?;
            std::fs::write(dir.join("summary.toml"), text)?;
        }
    }
    Ok(())
}

/// Writes every format.
pub fn export_all(report: &RunReport, dir: &Path) -> Result<()> {
    export(report, ExportFormat::Csv, dir)?;
    export(report, ExportFormat::Summary, dir)
}

pub fn read_steps(path: &Path) -> Result<Vec<StepRecord>> {
    read_records(path)
}

pub fn read_keyframes(path: &Path) -> Result<Vec<KeyframeRecord>> {
    read_records(path)
}

pub fn read_summary(path: &Path) -> Result<RunSummary> {
    let text = std::fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| Error::ConfigError(e.to_string()))
}
