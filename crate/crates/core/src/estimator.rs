//! A filter unit: state, covariance and (for the compressed back-end) the
//! accumulator, behind one interface shared by all three back-ends.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, Matrix6};

use crate::error::{Error, Result};
use crate::propagation::{
    compute_transition, propagate_covariance, propagate_mean, ImuNoiseParams, ImuSample,
    TransitionBlock, GRAVITY,
};
use crate::sim::FilterConfig;
use crate::state::{
    augment_clone, augment_keyframe, marginalize_clones, repartition, ImuState,
    PartitionedCovariance, RepartitionSummary, StateVector, IMU_DIM, IMU_POSE_INDICES,
};
use crate::update::{
    compressed_update, dense_update, recover_global, schmidt_update, CompressedAccumulator,
    UpdateReport,
};
use crate::vision::LinearizedBlock;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Backend {
    Full,
    Schmidt,
    Compressed,
}

impl Backend {
    pub const ALL: [Backend; 3] = [Backend::Full, Backend::Schmidt, Backend::Compressed];

    pub fn as_str(&self) -> &'static str {
        match self {
            Backend::Full => "full",
            Backend::Schmidt => "schmidt",
            Backend::Compressed => "compressed",
        }
    }
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Backend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(Backend::Full),
            "schmidt" => Ok(Backend::Schmidt),
            "compressed" => Ok(Backend::Compressed),
            other => Err(Error::ConfigError(format!("unknown mode {other:?}"))),
        }
    }
}

/// One estimator instance. Owns everything it mutates.
#[derive(Clone, Debug)]
pub struct Filter {
    pub backend: Backend,
    pub state: StateVector,
    pub cov: PartitionedCovariance,
    pub acc: Option<CompressedAccumulator>,
    config: FilterConfig,
    noise: ImuNoiseParams,
    /// Global corrections held back until the next [`Filter::recover`].
    /// Used by a dense twin so its global means move exactly when the
    /// compressed filter's do.
    pending_global: Option<DVector<f64>>,
}

impl Filter {
    pub fn new(
        backend: Backend,
        imu: ImuState,
        initial_cov: DMatrix<f64>,
        start_time: f64,
        config: FilterConfig,
        noise: ImuNoiseParams,
    ) -> Result<Self> {
        if initial_cov.shape() != (IMU_DIM, IMU_DIM) {
            return Err(Error::DimensionMismatch(format!(
                "initial covariance is {:?}, expected 15×15",
                initial_cov.shape()
            )));
        }
        config.validate()?;
        noise.validate()?;
        let acc = (backend == Backend::Compressed).then(|| CompressedAccumulator::new(IMU_DIM));
        Ok(Self {
            backend,
            state: StateVector::new(imu, config.n_clones, start_time),
            cov: PartitionedCovariance::new(
                initial_cov,
                DMatrix::zeros(IMU_DIM, 0),
                DMatrix::zeros(0, 0),
            ),
            acc,
            config,
            noise,
            pending_global: None,
        })
    }

    /// Dense filter that defers its global mean corrections to
    /// [`Filter::recover`]; the covariance is still updated densely.
    pub fn dense_twin(&self) -> Self {
        let mut twin = self.clone();
        twin.backend = Backend::Full;
        twin.acc = None;
        twin.pending_global = Some(DVector::zeros(self.state.global_dim()));
        twin
    }

    pub fn config(&self) -> &FilterConfig {
        &self.config
    }

    pub fn transition(&self, sample: &ImuSample, dt: f64) -> Result<TransitionBlock> {
        compute_transition(&self.state.imu, sample, dt, &self.noise)
    }

    /// Mean and covariance time update with a precomputed transition.
    pub fn apply_transition(&mut self, sample: &ImuSample, dt: f64, tb: &TransitionBlock) -> Result<()> {
        self.state.imu = propagate_mean(&self.state.imu, sample, dt, &GRAVITY)?;
        if self.acc.is_none() && self.cov.lg.nrows() != self.cov.ll.nrows() {
            return Err(Error::StaleAccumulator);
        }
        propagate_covariance(&mut self.cov, tb, self.acc.as_mut())
    }

    pub fn propagate(&mut self, sample: &ImuSample, dt: f64) -> Result<TransitionBlock> {
        let tb = self.transition(sample, dt)?;
        self.apply_transition(sample, dt, &tb)?;
        Ok(tb)
    }

    pub fn augment_clone(&mut self, t: f64) -> Result<u64> {
        augment_clone(&mut self.state, &mut self.cov, self.acc.as_mut(), t)
    }

    pub fn augment_keyframe(&mut self, t: f64) -> Result<u64> {
        augment_keyframe(
            &mut self.state,
            &mut self.cov,
            self.acc.as_mut(),
            t,
            self.config.keyframe_interval,
            self.config.keyframe_init_cov,
        )
    }

    pub fn keyframe_due(&self, t: f64) -> bool {
        t - self.state.last_keyframe_time >= self.config.keyframe_interval - 1e-9
    }

    pub fn marginalize(&mut self, ids: &[u64]) -> Result<()> {
        marginalize_clones(&mut self.state, &mut self.cov, self.acc.as_mut(), ids)
    }

    pub fn update(&mut self, block: &LinearizedBlock) -> Result<UpdateReport> {
        match self.backend {
            Backend::Full => {
                let (dx, report) = dense_update(&mut self.cov, block)?;
                let dl = self.state.local_dim();
                self.state.apply_local_correction(&dx.rows(0, dl).into_owned());
                let dxg = dx.rows(dl, dx.len() - dl).into_owned();
                match self.pending_global.as_mut() {
                    Some(p) => *p += dxg,
                    None => self.state.apply_global_correction(&dxg),
                }
                Ok(report)
            }
            Backend::Schmidt => schmidt_update(&mut self.state, &mut self.cov, block),
            Backend::Compressed => {
                let acc = self.acc.as_mut().expect("compressed filter has an accumulator");
                compressed_update(&mut self.state, &mut self.cov.ll, block, acc)
            }
        }
    }

    /// Applies deferred global corrections. Returns the flop count.
    pub fn recover(&mut self) -> Result<u64> {
        if let Some(acc) = self.acc.as_mut() {
            return recover_global(&mut self.state, &mut self.cov, acc);
        }
        if let Some(p) = self.pending_global.as_mut() {
            if p.iter().any(|&v| v != 0.0) {
                self.state.apply_global_correction(p);
            }
            *p = DVector::zeros(self.state.global_dim());
        }
        Ok(0)
    }

    pub fn repartition(&mut self, center: crate::geom::Vec3) -> Result<RepartitionSummary> {
        if self.pending_global.as_ref().is_some_and(|p| p.iter().any(|&v| v != 0.0)) {
            return Err(Error::StaleAccumulator);
        }
        let summary = repartition(
            &mut self.state,
            &mut self.cov,
            self.acc.as_mut(),
            center,
            self.config.r_local,
        )?;
        if let Some(p) = self.pending_global.as_mut() {
            *p = DVector::zeros(self.state.global_dim());
        }
        Ok(summary)
    }

    /// Vehicle has left the re-center radius around the local center.
    pub fn needs_recentering(&self) -> bool {
        (self.state.imu.position - self.state.local_center).norm() > self.config.r_recenter()
    }

    /// Whether the cross covariance is current (no deferred corrections).
    pub fn is_synchronized(&self) -> bool {
        self.acc.as_ref().is_none_or(|a| a.is_reset())
    }

    /// Full covariance; `None` while a compressed epoch holds deferred terms.
    pub fn full_covariance(&self) -> Option<DMatrix<f64>> {
        self.is_synchronized().then(|| self.cov.full())
    }

    /// 6×6 covariance of the IMU pose `[dθ, dp]`.
    pub fn pose_covariance(&self) -> Matrix6<f64> {
        Matrix6::from_fn(|i, j| self.cov.ll[(IMU_POSE_INDICES[i], IMU_POSE_INDICES[j])])
    }
}
