//! Cross-run analysis: NEES, back-end comparison, Monte Carlo and the
//! update-cost sweep.

use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, Matrix6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::estimator::{Backend, Filter};
use crate::geom::{boxminus, Pose, UnitQuaternion, Vec3};
use crate::propagation::ImuNoiseParams;
use crate::sim::{FilterConfig, GroundTruth};
use crate::state::{symmetrize, ImuState, PartitionedCovariance, IMU_DIM};
use crate::update::CompressedAccumulator;
use crate::vision::LinearizedBlock;

use super::report::{RunReport, StepRow};
use super::{run, RunConfig};

/// `eᵀ P⁻¹ e` with `e = truth ⊟ estimate` over `[dθ, dp]`.
pub fn pose_nees(estimate: &Pose, truth: &Pose, cov: &Matrix6<f64>) -> Result<f64> {
    let e = boxminus(truth, estimate);
    let chol = cov.cholesky().ok_or(Error::SingularMarginal)?;
    Ok(e.dot(&chol.solve(&e)))
}

/// Per-step pose NEES of a run against the ground truth.
pub fn compute_nees(rows: &[StepRow], gt: &GroundTruth) -> Result<Vec<f64>> {
    rows.iter()
        .map(|r| pose_nees(&r.estimate.pose(), &gt.at(r.timestamp).pose, &r.pose_cov))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub mode: Backend,
    pub rmse_position: f64,
    pub rmse_attitude: f64,
    pub mean_nees: f64,
    pub mean_step_time: f64,
    pub peak_state_dim: usize,
    pub total_update_flops: u64,
}

#[derive(Clone, Debug)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    pub reports: Vec<RunReport>,
}

impl Comparison {
    pub fn report(&self, mode: Backend) -> Option<&RunReport> {
        self.reports.iter().find(|r| r.mode == mode)
    }

    /// Fraction of steps at which every position 3σ of `a` is at least the
    /// matching bound of `b`, up to a relative `slack`.
    pub fn envelope_dominance(&self, a: Backend, b: Backend, slack: f64) -> Option<f64> {
        let (ra, rb) = (self.report(a)?, self.report(b)?);
        let n = ra.rows.len().min(rb.rows.len());
        if n == 0 {
            return None;
        }
        let hits = ra.rows.iter().zip(&rb.rows).filter(|(x, y)| {
            let (sx, sy) = (x.pose_sigma3(), y.pose_sigma3());
            (3..6).all(|i| sx[i] >= sy[i] * (1.0 - slack))
        });
        Some(hits.count() as f64 / n as f64)
    }

    /// `|RMSE_a − RMSE_b|` in position.
    pub fn rmse_gap(&self, a: Backend, b: Backend) -> Option<f64> {
        let find = |m| self.rows.iter().find(|r| r.mode == m);
        Some((find(a)?.rmse_position - find(b)?.rmse_position).abs())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "mode",
            "rmse_position",
            "rmse_attitude",
            "mean_nees",
            "mean_step_time_s",
            "peak_state_dim",
            "total_update_flops",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.mode.to_string(),
                r.rmse_position.to_string(),
                r.rmse_attitude.to_string(),
                r.mean_nees.to_string(),
                r.mean_step_time.to_string(),
                r.peak_state_dim.to_string(),
                r.total_update_flops.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs each configuration and tabulates the results. All configurations
/// must share scenario and seed.
pub fn compare_backends(configs: &[RunConfig]) -> Result<Comparison> {
    let first = configs.first().ok_or(Error::MismatchedScenarios)?;
    if configs.iter().any(|c| c.scenario != first.scenario || c.seed != first.seed) {
        return Err(Error::MismatchedScenarios);
    }
    let reports: Vec<RunReport> = configs.par_iter().map(run).collect::<Result<_>>()?;
    let rows = reports
        .iter()
        .map(|r| ComparisonRow {
            mode: r.mode,
            rmse_position: r.summary.rmse_position,
            rmse_attitude: r.summary.rmse_attitude,
            mean_nees: r.summary.mean_nees,
            mean_step_time: r.mean_step_time(),
            peak_state_dim: r.summary.peak_state_dim,
            total_update_flops: r.summary.total_update_flops,
        })
        .collect();
    Ok(Comparison { rows, reports })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MonteCarloSummary {
    pub mode: Backend,
    pub seeds: Vec<u64>,
    /// Mean pose NEES of each run.
    pub run_nees: Vec<f64>,
    pub run_rmse: Vec<f64>,
}

impl MonteCarloSummary {
    pub fn mean_nees(&self) -> f64 {
        self.run_nees.iter().sum::<f64>() / self.run_nees.len().max(1) as f64
    }

    pub fn mean_rmse(&self) -> f64 {
        self.run_rmse.iter().sum::<f64>() / self.run_rmse.len().max(1) as f64
    }
}

/// Repeats `base` over `seeds`.
pub fn monte_carlo(base: &RunConfig, seeds: &[u64]) -> Result<MonteCarloSummary> {
    let results: Vec<(f64, f64)> = seeds
        .par_iter()
        .map(|&seed| {
            let cfg = RunConfig { seed, out_dir: None, lockstep: false, ..base.clone() };
            run(&cfg).map(|r| (r.summary.mean_nees, r.summary.rmse_position))
        })
        .collect::<Result<_>>()?;
    Ok(MonteCarloSummary {
        mode: base.mode,
        seeds: seeds.to_vec(),
        run_nees: results.iter().map(|r| r.0).collect(),
        run_rmse: results.iter().map(|r| r.1).collect(),
    })
}

/// Least-squares fit of `log y = a·log x + b`. Returns `(a, b)`.
pub fn fit_power_law(x: &[f64], y: &[f64]) -> (f64, f64) {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    let a = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    (a, my - a * mx)
}

/// One point of the update-cost sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalingRow {
    pub global_keyframes: usize,
    pub state_dim: usize,
    pub local_dim: usize,
    pub rows: usize,
    pub compressed_flops: u64,
    pub dense_flops: u64,
    pub schmidt_flops: u64,
    /// Flops of the recovery that closes an epoch of one update.
    pub recovery_flops: u64,
    /// Median wall time of one update, s.
    pub compressed_time: f64,
    pub dense_time: f64,
    pub schmidt_time: f64,
}

/// Full-mode filter with ten clones, two local keyframes and `n_global`
/// global ones over a random SPD covariance, plus a dense `rows`-row block
/// over its local states.
pub fn scaling_fixture(n_global: usize, rows: usize, seed: u64) -> Result<(Filter, LinearizedBlock)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = FilterConfig { keyframe_interval: 1.0, r_local: 45.0, ..FilterConfig::default() };
    let imu = ImuState { velocity: Vec3::new(20.0, 0.0, 0.0), ..ImuState::default() };
    let mut f = Filter::new(
        Backend::Full,
        imu,
        DMatrix::identity(IMU_DIM, IMU_DIM) * 1e-2,
        0.0,
        config,
        ImuNoiseParams::default(),
    )?;
    let mut t = 0.0;
    for _ in 0..n_global + 2 {
        t += 1.0;
        f.state.imu.position.x += 20.0;
        f.augment_keyframe(t)?;
    }
    for _ in 0..config.n_clones {
        t += 0.1;
        f.state.imu.position.x += 2.0;
        f.state.imu.attitude = UnitQuaternion::exp(&Vec3::new(0.0, 0.0, rng.random_range(-0.1..0.1)));
        f.augment_clone(t)?;
    }
    f.repartition(f.state.imu.position)?;
    let d = f.state.dim();
    let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
    let mut p = &a * a.transpose() / d as f64 + DMatrix::identity(d, d) * 1e-2;
    symmetrize(&mut p);
    let dl = f.state.local_dim();
    f.cov = PartitionedCovariance::from_full(&p, dl);
    let block = LinearizedBlock {
        h: DMatrix::from_fn(rows, dl, |_, _| rng.random_range(-1.0..1.0)),
        residual: DVector::from_fn(rows, |_, _| rng.random_range(-0.1..0.1)),
        noise: DMatrix::identity(rows, rows),
    };
    Ok((f, block))
}

/// Copy of a full-mode filter running under another back-end.
pub fn with_backend(filter: &Filter, backend: Backend) -> Filter {
    let mut f = filter.clone();
    f.backend = backend;
    f.acc = (backend == Backend::Compressed).then(|| CompressedAccumulator::new(f.state.local_dim()));
    f
}

/// Update flops and median wall time, each rep on a fresh copy.
fn time_update(reps: usize, filter: &Filter, block: &LinearizedBlock) -> Result<(u64, f64)> {
    let mut times = Vec::with_capacity(reps);
    let mut flops = 0;
    for _ in 0..reps.max(1) {
        let mut f = filter.clone();
        let start = Instant::now();
        flops = f.update(block)?.flops;
        times.push(start.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    Ok((flops, times[times.len() / 2]))
}

/// Cost of one `rows`-row update as the global keyframe count grows, local
/// size held fixed.
pub fn complexity_scaling(global_counts: &[usize], rows: usize, reps: usize, seed: u64) -> Result<Vec<ScalingRow>> {
    let mut out = Vec::with_capacity(global_counts.len());
    for (i, &n) in global_counts.iter().enumerate() {
        let (dense, block) = scaling_fixture(n, rows, seed.wrapping_add(i as u64))?;
        let dl = dense.state.local_dim();
        let compressed = with_backend(&dense, Backend::Compressed);
        let schmidt = with_backend(&dense, Backend::Schmidt);

        let (compressed_flops, compressed_time) = time_update(reps, &compressed, &block)?;
        let (dense_flops, dense_time) = time_update(reps, &dense, &block)?;
        let (schmidt_flops, schmidt_time) = time_update(reps, &schmidt, &block)?;
        let mut epoch = compressed.clone();
        epoch.update(&block)?;
        let recovery_flops = epoch.recover()?;
        out.push(ScalingRow {
            global_keyframes: dense.state.keyframes.global_count(),
            state_dim: dense.state.dim(),
            local_dim: dl,
            rows,
            compressed_flops,
            dense_flops,
            schmidt_flops,
            recovery_flops,
            compressed_time,
            dense_time,
            schmidt_time,
        });
    }
    Ok(out)
}
