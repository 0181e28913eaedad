//! End-to-end runs: simulate a scenario, drive one back-end over it, score
//! the result.

mod analysis;
mod report;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{Cholesky, DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::estimator::{Backend, Filter};
use crate::geom::{attitude_error, Pose, Vec6};
use crate::sim::{
    gaussian3, gps_update_block, stream, synthesize_camera, synthesize_gps, synthesize_imu,
    GroundTruth, ImuStream, Scenario, INIT_STREAM,
};
use crate::state::{imu_idx, keyframe_sigmas, FrameRef, ImuState, Partition, IMU_DIM};
use crate::vision::{
    build_keyframe_constraint, chi2_gate, linearize_track, FeatureTrack, FeatureUpdate,
    LinearizedBlock, PinholeCamera, Vec2,
};

pub use analysis::{
    compare_backends, complexity_scaling, compute_nees, fit_power_law, monte_carlo, pose_nees,
    scaling_fixture, with_backend, Comparison, ComparisonRow, MonteCarloSummary, ScalingRow,
};
pub use report::{
    export, export_all, keyframe_records, read_keyframes, read_steps, read_summary, Event,
    ExportFormat, KeyframeRecord, KeyframeSnapshot, LockstepStats, RunReport, RunSummary,
    StepRecord, StepRow, TrackStats, KEYFRAME_COLUMNS, STEP_COLUMNS,
};

/// Everything needed to reproduce one run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub mode: Backend,
    pub scenario: Scenario,
    pub seed: u64,
    /// Drive a dense twin with the primary's linearizations and compare.
    pub lockstep: bool,
    /// When set, [`run`] also writes every export format here.
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    /// Uses the scenario's own seed.
    pub fn new(mode: Backend, scenario: Scenario) -> Self {
        Self { mode, seed: scenario.seed, scenario, lockstep: false, out_dir: None }
    }

    pub fn from_file(mode: Backend, path: &Path) -> Result<Self> {
        Ok(Self::new(mode, Scenario::load(path)?))
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_lockstep(mut self, on: bool) -> Self {
        self.lockstep = on;
        self
    }

    pub fn with_keyframe_interval(mut self, seconds: f64) -> Self {
        self.scenario.filter.keyframe_interval = seconds;
        self
    }

    pub fn with_out_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.out_dir = Some(dir.into());
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        if let Some(dir) = &self.out_dir {
            if dir.exists() && !dir.is_dir() {
                return Err(Error::ConfigError(format!("{} is not a directory", dir.display())));
            }
        }
        Ok(())
    }
}

/// Initial estimate and covariance: the true state perturbed by a draw
/// from the initial covariance, with zero bias estimates.
pub fn initial_conditions(
    scenario: &Scenario,
    gt: &GroundTruth,
    imu: &ImuStream,
    seed: u64,
) -> (ImuState, DMatrix<f64>) {
    let f = &scenario.filter;
    let s = &scenario.sensors;
    let truth = gt.at(0.0).imu_state(imu.gyro_bias[0], imu.accel_bias[0]);
    let mut rng = stream(seed, INIT_STREAM);
    let dtheta = gaussian3(&mut rng, f.init_attitude_sigma);
    let dv = gaussian3(&mut rng, f.init_velocity_sigma);
    let dp = gaussian3(&mut rng, f.init_position_sigma);
    let mut est = truth;
    est.attitude = crate::geom::quat_compose(&crate::geom::UnitQuaternion::exp(&dtheta), &truth.attitude);
    est.velocity += dv;
    est.position += dp;
    est.gyro_bias = Default::default();
    est.accel_bias = Default::default();

    let mut p0 = DMatrix::zeros(IMU_DIM, IMU_DIM);
    let var = [
        (imu_idx::THETA, f.init_attitude_sigma),
        (imu_idx::BG, s.gyro_bias_sigma),
        (imu_idx::V, f.init_velocity_sigma),
        (imu_idx::BA, s.accel_bias_sigma),
        (imu_idx::P, f.init_position_sigma),
    ];
    for (o, sigma) in var {
        for i in 0..3 {
            p0[(o + i, o + i)] = (sigma * sigma).max(1e-12);
        }
    }
    (est, p0)
}

/// Pixels seen from a keyframe, kept for later loop closures.
struct KeyframeView {
    timestamp: f64,
    pixels: BTreeMap<u64, Vec2>,
}

struct Runner<'a> {
    scenario: &'a Scenario,
    seed: u64,
    gt: GroundTruth,
    imu: ImuStream,
    camera: PinholeCamera,
    filter: Filter,
    twin: Option<Filter>,
    tracks: BTreeMap<u64, FeatureTrack>,
    views: BTreeMap<u64, KeyframeView>,
    keyframe_origin: BTreeMap<u64, Pose>,
    keyframes_frozen: bool,
    stats: TrackStats,
    lock: LockstepStats,
    t_prev: f64,
}

impl<'a> Runner<'a> {
    fn new(config: &'a RunConfig) -> Result<Self> {
        let scenario = &config.scenario;
        let gt = scenario.ground_truth(config.seed)?;
        let imu = synthesize_imu(&gt, &scenario.sensors, config.seed);
        let camera = scenario.sensors.camera.pinhole();
        camera.validate()?;
        let (x0, p0) = initial_conditions(scenario, &gt, &imu, config.seed);
        let filter = Filter::new(config.mode, x0, p0, 0.0, scenario.filter, scenario.sensors.imu_noise)?;
        let twin = config.lockstep.then(|| match config.mode {
            Backend::Compressed => filter.dense_twin(),
            _ => {
                let mut t = filter.clone();
                t.backend = Backend::Full;
                t
            }
        });
        Ok(Self {
            scenario,
            seed: config.seed,
            gt,
            imu,
            camera,
            filter,
            twin,
            tracks: BTreeMap::new(),
            views: BTreeMap::new(),
            keyframe_origin: BTreeMap::new(),
            keyframes_frozen: true,
            stats: TrackStats::default(),
            lock: LockstepStats { min_psd_margin: f64::INFINITY, ..LockstepStats::default() },
            t_prev: 0.0,
        })
    }

    fn both(&mut self, mut op: impl FnMut(&mut Filter) -> Result<()>) -> Result<()> {
        op(&mut self.filter)?;
        if let Some(twin) = self.twin.as_mut() {
            op(twin)?;
        }
        Ok(())
    }

    /// Zero-order hold over IMU samples, split at sample boundaries.
    fn propagate_to(&mut self, t: f64) -> Result<()> {
        let rate = self.scenario.sensors.imu_rate;
        while self.t_prev < t - 1e-12 {
            let k = ((self.t_prev + 1e-9) * rate).floor() as usize;
            let mut next = ((k + 1) as f64 / rate).min(t);
            if t - next < 1e-9 {
                next = t;
            }
            let dt = next - self.t_prev;
            let sample = self.imu.samples[k.min(self.imu.samples.len() - 1)];
            let tb = self.filter.propagate(&sample, dt)?;
            if let Some(twin) = self.twin.as_mut() {
                twin.apply_transition(&sample, dt, &tb)?;
            }
            self.t_prev = next;
        }
        Ok(())
    }

    /// Tracks that must be used now: lost, full length, or anchored on the
    /// clone about to leave the window.
    fn take_finished_tracks(&mut self, seen: &BTreeSet<u64>) -> Vec<FeatureTrack> {
        let clones = &self.filter.state.clones;
        let capacity = clones.capacity();
        let oldest = (clones.len() == capacity)
            .then(|| clones.oldest().map(|c| FrameRef::Clone(c.id)))
            .flatten();
        let ids: Vec<u64> = self
            .tracks
            .iter()
            .filter(|(id, tr)| {
                !seen.contains(id)
                    || tr.len() >= capacity
                    || oldest.is_some_and(|o| tr.observations.first().is_some_and(|(f, _)| *f == o))
            })
            .map(|(id, _)| *id)
            .collect();
        ids.iter().filter_map(|id| self.tracks.remove(id)).collect()
    }

    /// Adds old keyframe observations of the same landmark. Returns the
    /// keyframes used.
    fn attach_loop_closures(&self, track: &mut FeatureTrack, t: f64) -> Vec<u64> {
        let min_age = self.scenario.filter.loop_min_age;
        let mut used = Vec::new();
        for (&kf, view) in &self.views {
            if t - view.timestamp + 1e-9 < min_age {
                continue;
            }
            if let Some(px) = view.pixels.get(&track.feature_id) {
                track.observations.push((FrameRef::Keyframe(kf), *px));
                used.push(kf);
            }
        }
        used
    }

    fn linearize(&mut self, track: &mut FeatureTrack, used: &mut Vec<u64>) -> Result<FeatureUpdate> {
        loop {
            let state = &self.filter.state;
            let result = if used.is_empty() {
                linearize_track(track, state, &self.camera)
            } else {
                build_keyframe_constraint(track, state, &self.camera)
                    .map(|u| u.expect("track has clone and keyframe observations"))
            };
            match result {
                // Keep the observation for when its keyframe is local again.
                Err(Error::GlobalKeyframeTouched(_)) => {
                    self.stats.global_keyframe_touched += 1;
                    track.observations.retain(|(f, _)| state.partition_of(*f) != Some(Partition::Global));
                    used.retain(|kf| state.partition_of(FrameRef::Keyframe(*kf)) != Some(Partition::Global));
                }
                other => return other,
            }
        }
    }

    fn vision_blocks(&mut self, t: f64, new_keyframe: Option<u64>, clone_id: u64) -> Result<Vec<LinearizedBlock>> {
        let sensors = &self.scenario.sensors;
        let obs = synthesize_camera(&self.gt, sensors, self.seed, t);
        let seen: BTreeSet<u64> = obs.iter().map(|(id, _)| *id).collect();
        if let Some(kf) = new_keyframe {
            self.views.insert(kf, KeyframeView { timestamp: t, pixels: obs.into_iter().collect() });
        } else {
            for (id, px) in obs {
                self.tracks
                    .entry(id)
                    .or_insert_with(|| FeatureTrack::new(id, sensors.pixel_sigma))
                    .observations
                    .push((FrameRef::Clone(clone_id), px));
            }
        }

        let mut candidates: Vec<(FeatureTrack, Vec<u64>)> = Vec::new();
        for mut track in self.take_finished_tracks(&seen) {
            let used = self.attach_loop_closures(&mut track, t);
            if track.len() < 2 {
                self.stats.skipped += 1;
            } else {
                candidates.push((track, used));
            }
        }
        candidates.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then(a.0.feature_id.cmp(&b.0.feature_id)));
        let cap = self.scenario.filter.max_tracks_per_frame;
        if candidates.len() > cap {
            self.stats.skipped += candidates.len() - cap;
            candidates.truncate(cap);
        }

        let mut blocks = Vec::new();
        for (mut track, mut used) in candidates {
            let upd = match self.linearize(&mut track, &mut used) {
                Ok(u) => u,
                Err(Error::LowParallax(_) | Error::Diverged | Error::BehindCamera | Error::RankDeficientFeature) => {
                    self.stats.dropped += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            self.stats.processed += 1;
            self.stats.max_nullspace_error = self.stats.max_nullspace_error.max(upd.nullspace_error);
            if upd.block.rows() + 3 != 2 * track.len() {
                self.stats.dimension_violations += 1;
            }
            if chi2_gate(&upd.block, &self.filter.cov.ll) {
                self.stats.accepted += 1;
                if !used.is_empty() {
                    self.stats.loop_closures += 1;
                }
                for kf in used {
                    if let Some(v) = self.views.get_mut(&kf) {
                        v.pixels.remove(&track.feature_id);
                    }
                }
                blocks.push(upd.block);
            } else {
                self.stats.gated_out += 1;
            }
        }
        Ok(blocks)
    }

    /// Drops the oldest clone and any clone no live track refers to.
    fn marginalize(&mut self) -> Result<()> {
        let clones = &self.filter.state.clones;
        if clones.len() < clones.capacity() {
            return Ok(());
        }
        let referenced: BTreeSet<FrameRef> = self
            .tracks
            .values()
            .flat_map(|t| t.observations.iter().map(|(f, _)| *f))
            .collect();
        let newest = clones.newest().map(|c| c.id);
        let ids: Vec<u64> = clones
            .iter()
            .enumerate()
            .filter(|(i, c)| *i == 0 || (Some(c.id) != newest && !referenced.contains(&FrameRef::Clone(c.id))))
            .map(|(_, c)| c.id)
            .collect();
        self.both(|f| f.marginalize(&ids))
    }

    fn check_lockstep(&mut self) {
        let Some(twin) = self.twin.as_ref() else { return };
        let f = &self.filter;
        match f.backend {
            Backend::Schmidt => {
                let ps = f.cov.full();
                let pd = twin.cov.full();
                let trace = ps.trace();
                let diff = &ps - &pd;
                let shifted = &diff + DMatrix::identity(diff.nrows(), diff.ncols()) * (1e-9 * trace);
                if Cholesky::new(shifted).is_none() {
                    self.lock.conservative_violations += 1;
                }
                self.lock.full_checks += 1;
                if self.lock.full_checks % 30 == 1 && trace > 0.0 {
                    let e = SymmetricEigen::new(diff).eigenvalues.min();
                    self.lock.min_psd_margin = self.lock.min_psd_margin.min(e / trace);
                }
            }
            _ => {
                let dx = f.state.boxminus(&twin.state).amax();
                self.lock.max_mean_divergence = self.lock.max_mean_divergence.max(dx);
                let dp = if f.is_synchronized() {
                    self.lock.full_checks += 1;
                    (f.cov.full() - twin.cov.full()).amax()
                } else {
                    (&f.cov.ll - &twin.cov.ll).amax()
                };
                self.lock.max_cov_divergence = self.lock.max_cov_divergence.max(dp);
            }
        }
    }

    fn check_keyframes_frozen(&mut self) {
        for k in self.filter.state.keyframes.iter() {
            if self.keyframe_origin.get(&k.id).is_some_and(|p| *p != k.pose) {
                self.keyframes_frozen = false;
            }
        }
    }

    fn step(&mut self, step: usize, t: f64) -> Result<StepRow> {
        let wall = Instant::now();
        self.propagate_to(t)?;
        let mut events = Vec::new();

        let clone_id = self.filter.augment_clone(t)?;
        if let Some(twin) = self.twin.as_mut() {
            twin.augment_clone(t)?;
        }
        let mut new_keyframe = None;
        if self.filter.keyframe_due(t) {
            let id = self.filter.augment_keyframe(t)?;
            if let Some(twin) = self.twin.as_mut() {
                twin.augment_keyframe(t)?;
            }
            let pose = self.filter.state.pose_of(FrameRef::Keyframe(id)).expect("keyframe just added");
            self.keyframe_origin.insert(id, pose);
            events.push(Event::KeyframeAdded);
            new_keyframe = Some(id);
        }

        let mut blocks = self.vision_blocks(t, new_keyframe, clone_id)?;
        if self.scenario.is_gps_time(t) {
            let fix = synthesize_gps(&self.gt, &self.scenario.sensors, self.seed, t);
            blocks.push(gps_update_block(&fix, &self.filter.state));
            events.push(Event::Gps);
        }
        let mut update_rows = 0;
        let mut update_flops = 0;
        if !blocks.is_empty() {
            let block = LinearizedBlock::stack(&blocks)?;
            update_rows = block.rows();
            update_flops = self.filter.update(&block)?.flops;
            if let Some(twin) = self.twin.as_mut() {
                twin.update(&block)?;
                // A Schmidt twin only tracks covariance; sharing the mean
                // keeps both on the same partition.
                if self.filter.backend == Backend::Schmidt {
                    twin.state = self.filter.state.clone();
                }
            }
        }

        let mut recovery_flops = 0;
        if self.filter.needs_recentering() {
            recovery_flops = self.filter.recover()?;
            if let Some(twin) = self.twin.as_mut() {
                twin.recover()?;
            }
            if self.filter.backend == Backend::Compressed {
                events.push(Event::Recovery);
                self.check_lockstep();
            }
            let center = self.filter.state.imu.position;
            self.both(|f| f.repartition(center).map(|_| ()))?;
            events.push(Event::Recenter);
        }

        self.marginalize()?;
        self.check_lockstep();
        if self.filter.backend == Backend::Schmidt {
            self.check_keyframes_frozen();
        }
        self.row(step, t, events, update_rows, update_flops, recovery_flops, wall)
    }

    #[allow(clippy::too_many_arguments)]
    fn row(
        &self,
        step: usize,
        t: f64,
        events: Vec<Event>,
        update_rows: usize,
        update_flops: u64,
        recovery_flops: u64,
        wall: Instant,
    ) -> Result<StepRow> {
        let f = &self.filter;
        let truth = self.gt.at(t);
        let estimate = f.state.imu;
        let pose_cov = f.pose_covariance();
        let nees = pose_nees(&estimate.pose(), &truth.pose, &pose_cov)?;
        let keyframes = keyframe_sigmas(&f.state, &f.cov)
            .into_iter()
            .map(|(id, partition, sigma3)| KeyframeSnapshot {
                id,
                partition,
                pose: f.state.pose_of(FrameRef::Keyframe(id)).expect("listed keyframe"),
                sigma3,
            })
            .collect();
        Ok(StepRow {
            step,
            timestamp: t,
            estimate,
            truth_pose: truth.pose,
            truth_velocity: truth.velocity,
            pose_cov,
            position_error: (truth.pose.position - estimate.position).norm(),
            attitude_error: attitude_error(&truth.pose.orientation, &estimate.attitude).norm(),
            nees,
            keyframes,
            state_dim: f.state.dim(),
            local_dim: f.state.local_dim(),
            global_dim: f.state.global_dim(),
            update_rows,
            update_flops,
            recovery_flops,
            events,
            wall_time: wall.elapsed().as_secs_f64(),
        })
    }

    fn finish(&mut self, rows: &mut [StepRow]) -> Result<()> {
        let flops = self.filter.recover()?;
        if let Some(twin) = self.twin.as_mut() {
            twin.recover()?;
        }
        if flops > 0 {
            if let Some(last) = rows.last_mut() {
                last.events.push(Event::Recovery);
                last.recovery_flops += flops;
                last.keyframes = keyframe_sigmas(&self.filter.state, &self.filter.cov)
                    .into_iter()
                    .map(|(id, partition, sigma3)| KeyframeSnapshot {
                        id,
                        partition,
                        pose: self.filter.state.pose_of(FrameRef::Keyframe(id)).expect("listed keyframe"),
                        sigma3,
                    })
                    .collect();
            }
        }
        self.check_lockstep();
        Ok(())
    }
}

fn summarize(config: &RunConfig, runner: &Runner<'_>, rows: &[StepRow]) -> RunSummary {
    let n = rows.len().max(1) as f64;
    let rms = |f: &dyn Fn(&StepRow) -> f64| (rows.iter().map(|r| f(r).powi(2)).sum::<f64>() / n).sqrt();
    let recenter_times: Vec<f64> = rows.iter().filter(|r| r.has(Event::Recenter)).map(|r| r.timestamp).collect();
    let mean_recenter_period = match recenter_times.len() {
        0 => 0.0,
        1 => recenter_times[0],
        k => (recenter_times[k - 1] - recenter_times[0]) / (k - 1) as f64,
    };
    let mut lock = runner.lock.clone();
    if !lock.min_psd_margin.is_finite() {
        lock.min_psd_margin = 0.0;
    }
    RunSummary {
        mode: config.mode.to_string(),
        scenario: config.scenario.name.clone(),
        seed: config.seed,
        steps: rows.len(),
        rmse_position: rms(&|r| r.position_error),
        rmse_attitude: rms(&|r| r.attitude_error),
        mean_nees: rows.iter().map(|r| r.nees).sum::<f64>() / n,
        recoveries: rows.iter().filter(|r| r.has(Event::Recovery)).count(),
        recenters: recenter_times.len(),
        mean_recenter_period,
        keyframes: rows.iter().filter(|r| r.has(Event::KeyframeAdded)).count(),
        gps_updates: rows.iter().filter(|r| r.has(Event::Gps)).count(),
        peak_state_dim: rows.iter().map(|r| r.state_dim).max().unwrap_or(0),
        total_update_flops: rows.iter().map(|r| r.update_flops).sum(),
        total_recovery_flops: rows.iter().map(|r| r.recovery_flops).sum(),
        tracks: runner.stats.clone(),
        keyframes_frozen: (config.mode == Backend::Schmidt).then_some(runner.keyframes_frozen),
        lockstep: runner.twin.is_some().then_some(lock),
    }
}

/// Simulates the scenario and runs one back-end over it. Errors carry the
/// step at which they occurred.
pub fn run(config: &RunConfig) -> Result<RunReport> {
    config.validate()?;
    let mut runner = Runner::new(config)?;
    let times = config.scenario.camera_times();
    let mut rows = Vec::with_capacity(times.len());
    for (step, &t) in times.iter().enumerate() {
        rows.push(runner.step(step, t).map_err(|e| e.at_step(step))?);
    }
    runner.finish(&mut rows).map_err(|e| e.at_step(times.len().saturating_sub(1)))?;
    let summary = summarize(config, &runner, &rows);
    let report = RunReport { mode: config.mode, rows, summary };
    if let Some(dir) = &config.out_dir {
        export_all(&report, dir)?;
    }
    Ok(report)
}

/// Pose-only 6-vector `truth ⊟ estimate`.
pub fn pose_error(estimate: &Pose, truth: &Pose) -> Vec6 {
    crate::geom::boxminus(truth, estimate)
}
