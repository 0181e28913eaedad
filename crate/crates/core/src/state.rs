//! Filter state: IMU state, clone window, partitioned keyframe set and the
//! partitioned covariance, plus the bookkeeping operations that change the
//! error-state layout.
//!
//! Error-state layout (always contiguous, local before global):
//!
//! ```text
//! [ IMU (15) | clones (6 each) | local keyframes (6 each) || global keyframes (6 each) ]
//! \________________________ local, dL ___________________/  \______ global, dG ______/
//! ```
//!
//! The IMU block is `[dθ, db_g, dv, db_a, dp]`; pose blocks are `[dθ, dp]`.
//!
//! Every layout change (cloning, marginalization, keyframe insertion,
//! repartition) is a selection `P' = P[src, src]` with `src[i]` naming the
//! old index that new index `i` copies. When a [`CompressedAccumulator`] is
//! supplied, the epoch-start cross covariance `P_LG` stays frozen and the
//! selection is applied to the rows of the accumulated transform instead.

use nalgebra::{DMatrix, DVector, SMatrix, SVector};

use crate::error::{Error, Result};
use crate::geom::{attitude_error, boxplus, quat_compose, Pose, UnitQuaternion, Vec3, Vec6};
use crate::update::CompressedAccumulator;

pub const IMU_DIM: usize = 15;
pub const POSE_DIM: usize = 6;

/// Offsets inside the 15-dim IMU error block.
pub mod imu_idx {
    pub const THETA: usize = 0;
    pub const BG: usize = 3;
    pub const V: usize = 6;
    pub const BA: usize = 9;
    pub const P: usize = 12;
}

/// Indices of the IMU pose `[dθ, dp]` inside the IMU error block.
pub const IMU_POSE_INDICES: [usize; 6] = [0, 1, 2, 12, 13, 14];

pub type Vec15 = SVector<f64, 15>;
pub type Mat15 = SMatrix<f64, 15, 15>;

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct ImuState {
    /// `q_IG`, global to body.
    pub attitude: UnitQuaternion,
    pub gyro_bias: Vec3,
    pub velocity: Vec3,
    pub accel_bias: Vec3,
    pub position: Vec3,
}

impl ImuState {
    pub fn pose(&self) -> Pose {
        Pose::new(self.attitude, self.position)
    }

    pub fn boxplus(&self, d: &Vec15) -> ImuState {
        let dtheta = d.fixed_rows::<3>(imu_idx::THETA).into_owned();
        let attitude = if dtheta == Vec3::zeros() {
            self.attitude
        } else {
            quat_compose(&UnitQuaternion::exp(&dtheta), &self.attitude)
        };
        ImuState {
            attitude,
            gyro_bias: self.gyro_bias + d.fixed_rows::<3>(imu_idx::BG),
            velocity: self.velocity + d.fixed_rows::<3>(imu_idx::V),
            accel_bias: self.accel_bias + d.fixed_rows::<3>(imu_idx::BA),
            position: self.position + d.fixed_rows::<3>(imu_idx::P),
        }
    }

    /// `self ⊟ other`.
    pub fn boxminus(&self, other: &ImuState) -> Vec15 {
        let mut d = Vec15::zeros();
        d.fixed_rows_mut::<3>(imu_idx::THETA)
            .copy_from(&attitude_error(&self.attitude, &other.attitude));
        d.fixed_rows_mut::<3>(imu_idx::BG).copy_from(&(self.gyro_bias - other.gyro_bias));
        d.fixed_rows_mut::<3>(imu_idx::V).copy_from(&(self.velocity - other.velocity));
        d.fixed_rows_mut::<3>(imu_idx::BA).copy_from(&(self.accel_bias - other.accel_bias));
        d.fixed_rows_mut::<3>(imu_idx::P).copy_from(&(self.position - other.position));
        d
    }

    pub fn is_finite(&self) -> bool {
        self.gyro_bias.iter().chain(self.accel_bias.iter()).all(|x| x.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CloneState {
    pub id: u64,
    pub pose: Pose,
    pub timestamp: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CloneWindow {
    clones: Vec<CloneState>,
    capacity: usize,
}

impl CloneWindow {
    pub fn new(capacity: usize) -> Self {
        Self {
            clones: Vec::with_capacity(capacity),
            capacity,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.clones.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clones.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &CloneState> {
        self.clones.iter()
    }

    pub fn position(&self, id: u64) -> Option<usize> {
        self.clones.iter().position(|c| c.id == id)
    }

    pub fn get(&self, id: u64) -> Option<&CloneState> {
        self.clones.iter().find(|c| c.id == id)
    }

    pub fn oldest(&self) -> Option<&CloneState> {
        self.clones.first()
    }

    pub fn newest(&self) -> Option<&CloneState> {
        self.clones.last()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Partition {
    Local,
    Global,
}

impl Partition {
    pub fn as_str(&self) -> &'static str {
        match self {
            Partition::Local => "LOCAL",
            Partition::Global => "GLOBAL",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Keyframe {
    pub id: u64,
    pub pose: Pose,
    pub timestamp: f64,
    pub partition: Partition,
}

/// Keyframes in error-state order: local ones (ascending id) then global
/// ones (ascending id).
#[derive(Clone, Debug, PartialEq, Default)]
pub struct KeyframeSet {
    frames: Vec<Keyframe>,
}

impl KeyframeSet {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Keyframe> {
        self.frames.iter()
    }

    pub fn get(&self, id: u64) -> Option<&Keyframe> {
        self.frames.iter().find(|k| k.id == id)
    }

    pub fn local_count(&self) -> usize {
        self.frames.iter().filter(|k| k.partition == Partition::Local).count()
    }

    pub fn global_count(&self) -> usize {
        self.frames.len() - self.local_count()
    }

    fn ordered(mut frames: Vec<Keyframe>) -> Vec<Keyframe> {
        frames.sort_by_key(|k| (k.partition, k.id));
        frames
    }
}

/// Reference to a pose held in the state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FrameRef {
    Clone(u64),
    Keyframe(u64),
}

impl std::fmt::Display for FrameRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FrameRef::Clone(id) => write!(f, "clone:{id}"),
            FrameRef::Keyframe(id) => write!(f, "keyframe:{id}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StateVector {
    pub imu: ImuState,
    pub clones: CloneWindow,
    pub keyframes: KeyframeSet,
    pub local_center: Vec3,
    /// Time of the last keyframe, or the filter start time before the first.
    pub last_keyframe_time: f64,
    next_clone_id: u64,
    next_keyframe_id: u64,
}

impl StateVector {
    pub fn new(imu: ImuState, max_clones: usize, start_time: f64) -> Self {
        Self {
            local_center: imu.position,
            imu,
            clones: CloneWindow::new(max_clones),
            keyframes: KeyframeSet::default(),
            last_keyframe_time: start_time,
            next_clone_id: 0,
            next_keyframe_id: 0,
        }
    }

    pub fn dim(&self) -> usize {
        IMU_DIM + POSE_DIM * (self.clones.len() + self.keyframes.len())
    }

    /// Active dimension: IMU plus clones.
    pub fn active_dim(&self) -> usize {
        IMU_DIM + POSE_DIM * self.clones.len()
    }

    pub fn local_dim(&self) -> usize {
        self.active_dim() + POSE_DIM * self.keyframes.local_count()
    }

    pub fn global_dim(&self) -> usize {
        POSE_DIM * self.keyframes.global_count()
    }

    /// Offset of a pose block in the full error state.
    pub fn offset_of(&self, frame: FrameRef) -> Option<usize> {
        match frame {
            FrameRef::Clone(id) => self.clones.position(id).map(|i| IMU_DIM + POSE_DIM * i),
            FrameRef::Keyframe(id) => self
                .keyframes
                .frames
                .iter()
                .position(|k| k.id == id)
                .map(|i| self.active_dim() + POSE_DIM * i),
        }
    }

    pub fn pose_of(&self, frame: FrameRef) -> Option<Pose> {
        match frame {
            FrameRef::Clone(id) => self.clones.get(id).map(|c| c.pose),
            FrameRef::Keyframe(id) => self.keyframes.get(id).map(|k| k.pose),
        }
    }

    pub fn partition_of(&self, frame: FrameRef) -> Option<Partition> {
        match frame {
            FrameRef::Clone(id) => self.clones.get(id).map(|_| Partition::Local),
            FrameRef::Keyframe(id) => self.keyframes.get(id).map(|k| k.partition),
        }
    }

    /// Applies a correction over the local error state.
    pub fn apply_local_correction(&mut self, dx: &DVector<f64>) {
        assert_eq!(dx.len(), self.local_dim());
        self.imu = self.imu.boxplus(&dx.fixed_rows::<IMU_DIM>(0).into_owned());
        for (i, c) in self.clones.clones.iter_mut().enumerate() {
            let o = IMU_DIM + POSE_DIM * i;
            c.pose = boxplus(&c.pose, &dx.fixed_rows::<POSE_DIM>(o).into_owned());
        }
        let base = self.active_dim();
        for (i, k) in self
            .keyframes
            .frames
            .iter_mut()
            .filter(|k| k.partition == Partition::Local)
            .enumerate()
        {
            let o = base + POSE_DIM * i;
            k.pose = boxplus(&k.pose, &dx.fixed_rows::<POSE_DIM>(o).into_owned());
        }
    }

    /// Applies a correction over the global keyframes.
    pub fn apply_global_correction(&mut self, dx: &DVector<f64>) {
        assert_eq!(dx.len(), self.global_dim());
        for (i, k) in self
            .keyframes
            .frames
            .iter_mut()
            .filter(|k| k.partition == Partition::Global)
            .enumerate()
        {
            k.pose = boxplus(&k.pose, &dx.fixed_rows::<POSE_DIM>(POSE_DIM * i).into_owned());
        }
    }

    /// Applies a correction over the whole error state.
    pub fn apply_correction(&mut self, dx: &DVector<f64>) {
        let dl = self.local_dim();
        self.apply_local_correction(&dx.rows(0, dl).into_owned());
        self.apply_global_correction(&dx.rows(dl, dx.len() - dl).into_owned());
    }

    /// Full-state difference `self ⊟ other`; both must share a layout.
    pub fn boxminus(&self, other: &StateVector) -> DVector<f64> {
        assert_eq!(self.dim(), other.dim());
        let mut d = DVector::zeros(self.dim());
        d.fixed_rows_mut::<IMU_DIM>(0).copy_from(&self.imu.boxminus(&other.imu));
        for (i, (a, b)) in self.clones.iter().zip(other.clones.iter()).enumerate() {
            d.fixed_rows_mut::<POSE_DIM>(IMU_DIM + POSE_DIM * i)
                .copy_from(&crate::geom::boxminus(&a.pose, &b.pose));
        }
        let base = self.active_dim();
        for (i, (a, b)) in self.keyframes.iter().zip(other.keyframes.iter()).enumerate() {
            d.fixed_rows_mut::<POSE_DIM>(base + POSE_DIM * i)
                .copy_from(&crate::geom::boxminus(&a.pose, &b.pose));
        }
        d
    }
}

/// Covariance stored as `[P_LL P_LG; P_LGᵀ P_GG]`.
///
/// While a compressed epoch is open, `lg` and `gg` hold the epoch-start
/// values and `lg` has `acc.epoch_dim()` rows rather than `ll.nrows()`.
#[derive(Clone, Debug, PartialEq)]
pub struct PartitionedCovariance {
    pub ll: DMatrix<f64>,
    pub lg: DMatrix<f64>,
    pub gg: DMatrix<f64>,
}

impl PartitionedCovariance {
    pub fn new(ll: DMatrix<f64>, lg: DMatrix<f64>, gg: DMatrix<f64>) -> Self {
        Self { ll, lg, gg }
    }

    pub fn from_full(full: &DMatrix<f64>, local_dim: usize) -> Self {
        let d = full.nrows();
        let dg = d - local_dim;
        Self {
            ll: full.view((0, 0), (local_dim, local_dim)).into_owned(),
            lg: full.view((0, local_dim), (local_dim, dg)).into_owned(),
            gg: full.view((local_dim, local_dim), (dg, dg)).into_owned(),
        }
    }

    pub fn local_dim(&self) -> usize {
        self.ll.nrows()
    }

    pub fn global_dim(&self) -> usize {
        self.gg.nrows()
    }

    pub fn dim(&self) -> usize {
        self.local_dim() + self.global_dim()
    }

    /// Reassembles the full matrix. Only meaningful when `lg` is current.
    pub fn full(&self) -> DMatrix<f64> {
        let (dl, dg) = (self.local_dim(), self.global_dim());
        assert_eq!(self.lg.shape(), (dl, dg), "cross block is not current");
        let mut p = DMatrix::zeros(dl + dg, dl + dg);
        p.view_mut((0, 0), (dl, dl)).copy_from(&self.ll);
        p.view_mut((0, dl), (dl, dg)).copy_from(&self.lg);
        p.view_mut((dl, 0), (dg, dl)).copy_from(&self.lg.transpose());
        p.view_mut((dl, dl), (dg, dg)).copy_from(&self.gg);
        p
    }

    pub fn symmetrize(&mut self) {
        symmetrize(&mut self.ll);
        symmetrize(&mut self.gg);
    }
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Symmetry error and min eigenvalue, both relative to the trace.
pub fn psd_report(m: &DMatrix<f64>) -> (f64, f64) {
    if m.nrows() == 0 {
        return (0.0, 0.0);
    }
    let tr = m.trace().abs().max(f64::MIN_POSITIVE);
    let asym = (m - m.transpose()).amax() / tr;
    let mut s = m.clone();
    symmetrize(&mut s);
    let min_eig = s.symmetric_eigenvalues().min();
    (asym, min_eig / tr)
}

/// True if symmetric within 1e-12·trace and min eigenvalue ≥ −1e-9·trace.
pub fn is_symmetric_psd(m: &DMatrix<f64>) -> bool {
    let (asym, min_eig) = psd_report(m);
    asym <= 1e-12 && min_eig >= -1e-9
}

pub(crate) fn select_symmetric(m: &DMatrix<f64>, src: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(src.len(), src.len(), |i, j| m[(src[i], src[j])])
}

pub(crate) fn select_rows(m: &DMatrix<f64>, src: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(src.len(), m.ncols(), |i, j| m[(src[i], j)])
}

/// Applies a local-layout selection to `P_LL` and to whichever of `P_LG` or
/// the accumulated transform tracks the current local rows.
fn apply_local_selection(
    cov: &mut PartitionedCovariance,
    acc: Option<&mut CompressedAccumulator>,
    src: &[usize],
) {
    cov.ll = select_symmetric(&cov.ll, src);
    match acc {
        Some(acc) => acc.select_rows(src),
        None => cov.lg = select_rows(&cov.lg, src),
    }
}

/// Appends a clone of the current IMU pose, duplicating its covariance rows.
/// Returns the new clone id.
pub fn augment_clone(
    state: &mut StateVector,
    cov: &mut PartitionedCovariance,
    acc: Option<&mut CompressedAccumulator>,
    timestamp: f64,
) -> Result<u64> {
    if state.clones.len() >= state.clones.capacity {
        return Err(Error::WindowFull(state.clones.len()));
    }
    if let Some(last) = state.clones.newest() {
        if timestamp <= last.timestamp {
            return Err(Error::ConfigError(format!(
                "clone timestamp {timestamp} not after {}",
                last.timestamp
            )));
        }
    }
    let insert_at = state.active_dim();
    let dl = state.local_dim();
    let src: Vec<usize> = (0..insert_at)
        .chain(IMU_POSE_INDICES)
        .chain(insert_at..dl)
        .collect();
    apply_local_selection(cov, acc, &src);

    let id = state.next_clone_id;
    state.next_clone_id += 1;
    state.clones.clones.push(CloneState {
        id,
        pose: state.imu.pose(),
        timestamp,
    });
    Ok(id)
}

/// Removes the listed clones (Gaussian marginalization = deleting rows/cols).
pub fn marginalize_clones(
    state: &mut StateVector,
    cov: &mut PartitionedCovariance,
    acc: Option<&mut CompressedAccumulator>,
    ids: &[u64],
) -> Result<()> {
    if ids.is_empty() {
        return Ok(());
    }
    let mut drop = vec![false; state.clones.len()];
    for &id in ids {
        let i = state.clones.position(id).ok_or(Error::UnknownClone(id))?;
        drop[i] = true;
    }
    let dl = state.local_dim();
    let src: Vec<usize> = (0..dl)
        .filter(|&k| {
            k < IMU_DIM || k >= state.active_dim() || !drop[(k - IMU_DIM) / POSE_DIM]
        })
        .collect();
    apply_local_selection(cov, acc, &src);

    let mut i = 0;
    state.clones.clones.retain(|_| {
        let keep = !drop[i];
        i += 1;
        keep
    });
    Ok(())
}

/// Adds a keyframe at the current IMU pose, appended to the local partition.
///
/// With `clone_covariance` the keyframe rows duplicate the IMU pose rows
/// exactly; without it the keyframe gets the IMU pose marginal and zero
/// correlation with everything else.
pub fn augment_keyframe(
    state: &mut StateVector,
    cov: &mut PartitionedCovariance,
    acc: Option<&mut CompressedAccumulator>,
    timestamp: f64,
    interval: f64,
    clone_covariance: bool,
) -> Result<u64> {
    let elapsed = timestamp - state.last_keyframe_time;
    if elapsed < interval - 1e-9 {
        return Err(Error::TooSoon { elapsed, interval });
    }
    let dl = state.local_dim();
    let src: Vec<usize> = (0..dl).chain(IMU_POSE_INDICES).collect();
    if clone_covariance {
        apply_local_selection(cov, acc, &src);
    } else {
        cov.ll = select_symmetric(&cov.ll, &src);
        for i in dl..dl + POSE_DIM {
            for j in 0..dl {
                cov.ll[(i, j)] = 0.0;
                cov.ll[(j, i)] = 0.0;
            }
        }
        let zero_rows = |m: &DMatrix<f64>| {
            let mut out = select_rows(m, &src);
            out.rows_mut(dl, POSE_DIM).fill(0.0);
            out
        };
        match acc {
            Some(acc) => acc.map_rows(zero_rows),
            None => cov.lg = zero_rows(&cov.lg),
        }
    }

    let id = state.next_keyframe_id;
    state.next_keyframe_id += 1;
    let mut frames = std::mem::take(&mut state.keyframes.frames);
    frames.push(Keyframe {
        id,
        pose: state.imu.pose(),
        timestamp,
        partition: Partition::Local,
    });
    state.keyframes.frames = KeyframeSet::ordered(frames);
    state.last_keyframe_time = timestamp;
    Ok(id)
}

/// Outcome of a repartition.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RepartitionSummary {
    pub to_global: Vec<u64>,
    pub to_local: Vec<u64>,
}

/// Re-centers the local region and re-tags keyframes by the radius rule,
/// permuting the error state so local blocks stay contiguous.
///
/// In compressed operation the accumulator must be freshly reset, i.e. a
/// global recovery has just run.
pub fn repartition(
    state: &mut StateVector,
    cov: &mut PartitionedCovariance,
    acc: Option<&mut CompressedAccumulator>,
    new_center: Vec3,
    local_radius: f64,
) -> Result<RepartitionSummary> {
    if let Some(acc) = acc.as_deref() {
        if !acc.is_reset() || acc.epoch_dim() != state.local_dim() {
            return Err(Error::StaleAccumulator);
        }
    }
    if cov.lg.shape() != (state.local_dim(), state.global_dim()) {
        return Err(Error::StaleAccumulator);
    }

    let active = state.active_dim();
    let old_frames = state.keyframes.frames.clone();
    let mut summary = RepartitionSummary::default();
    let mut frames = old_frames.clone();
    for k in frames.iter_mut() {
        let tag = if (k.pose.position - new_center).norm() <= local_radius {
            Partition::Local
        } else {
            Partition::Global
        };
        if tag != k.partition {
            match tag {
                Partition::Local => summary.to_local.push(k.id),
                Partition::Global => summary.to_global.push(k.id),
            }
        }
        k.partition = tag;
    }
    let frames = KeyframeSet::ordered(frames);

    if frames.iter().map(|k| k.id).ne(old_frames.iter().map(|k| k.id))
        || !summary.to_local.is_empty()
        || !summary.to_global.is_empty()
    {
        let mut src: Vec<usize> = (0..active).collect();
        for k in &frames {
            let old = old_frames.iter().position(|o| o.id == k.id).expect("keyframe exists");
            src.extend(active + POSE_DIM * old..active + POSE_DIM * (old + 1));
        }
        let full = select_symmetric(&cov.full(), &src);
        state.keyframes.frames = frames;
        *cov = PartitionedCovariance::from_full(&full, state.local_dim());
    } else {
        state.keyframes.frames = frames;
    }
    state.local_center = new_center;
    if let Some(acc) = acc {
        *acc = CompressedAccumulator::new(state.local_dim());
    }
    Ok(summary)
}

/// Per-keyframe 3σ bounds read from the covariance diagonal:
/// `(id, partition, [3σ_θ; 3σ_p])`.
pub fn keyframe_sigmas(
    state: &StateVector,
    cov: &PartitionedCovariance,
) -> Vec<(u64, Partition, Vec6)> {
    let active = state.active_dim();
    let nl = state.keyframes.local_count();
    state
        .keyframes
        .iter()
        .enumerate()
        .map(|(i, k)| {
            let diag = |j: usize| {
                if i < nl {
                    cov.ll[(active + POSE_DIM * i + j, active + POSE_DIM * i + j)]
                } else {
                    let o = POSE_DIM * (i - nl) + j;
                    cov.gg[(o, o)]
                }
            };
            (k.id, k.partition, Vec6::from_fn(|j, _| 3.0 * diag(j).max(0.0).sqrt()))
        })
        .collect()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_spd(n: usize, rng: &mut impl Rng) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n + 3, |_, _| rng.random_range(-1.0..1.0));
        let mut p = &a * a.transpose() / (n as f64) + DMatrix::identity(n, n) * 1e-3;
        symmetrize(&mut p);
        p
    }

    pub(crate) fn sample_imu(rng: &mut impl Rng) -> ImuState {
        let v = |rng: &mut dyn rand::RngCore, s: f64| {
            Vec3::new(
                rng.random_range(-s..s),
                rng.random_range(-s..s),
                rng.random_range(-s..s),
            )
        };
        ImuState {
            attitude: UnitQuaternion::exp(&v(rng, 2.0)),
            gyro_bias: v(rng, 0.01),
            velocity: v(rng, 5.0),
            accel_bias: v(rng, 0.1),
            position: v(rng, 50.0),
        }
    }

    /// State with `n_clones` clones and `n_kf` keyframes, all local, and a
    /// random SPD covariance over it.
    pub(crate) fn fixture(
        n_clones: usize,
        n_kf: usize,
        seed: u64,
    ) -> (StateVector, PartitionedCovariance) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut state = StateVector::new(sample_imu(&mut rng), 10, 0.0);
        let mut cov = PartitionedCovariance::new(
            random_spd(IMU_DIM, &mut rng),
            DMatrix::zeros(IMU_DIM, 0),
            DMatrix::zeros(0, 0),
        );
        for k in 0..n_kf {
            state.imu = sample_imu(&mut rng);
            augment_keyframe(&mut state, &mut cov, None, 5.0 * (k + 1) as f64, 5.0, true).unwrap();
        }
        for c in 0..n_clones {
            state.imu = sample_imu(&mut rng);
            augment_clone(&mut state, &mut cov, None, 100.0 + c as f64).unwrap();
        }
        // Replace the rank-deficient cloned covariance with a generic one.
        let d = state.dim();
        cov = PartitionedCovariance::from_full(&random_spd(d, &mut rng), state.local_dim());
        (state, cov)
    }

    #[test]
    fn clone_duplicates_imu_pose_rows() {
        let (mut state, mut cov) = fixture(2, 2, 1);
        let before = cov.full();
        let id = augment_clone(&mut state, &mut cov, None, 500.0).unwrap();
        let after = cov.full();
        let o = state.offset_of(FrameRef::Clone(id)).unwrap();
        assert_eq!(state.dim(), before.nrows() + 6);
        for (a, &ia) in IMU_POSE_INDICES.iter().enumerate() {
            for (b, &ib) in IMU_POSE_INDICES.iter().enumerate() {
                assert_eq!(after[(o + a, o + b)], before[(ia, ib)]);
            }
            // Cross-covariance with every other block equals the IMU pose's.
            for j in 0..after.nrows() {
                if (o..o + 6).contains(&j) {
                    continue;
                }
                let jold = if j < o { j } else { j - 6 };
                assert_eq!(after[(o + a, j)], before[(ia, jold)]);
            }
        }
        assert_eq!(state.clones.newest().unwrap().pose, state.imu.pose());
    }

    #[test]
    fn clone_then_marginalize_round_trip() {
        let (mut state, mut cov) = fixture(3, 2, 2);
        let before = cov.clone();
        let id = augment_clone(&mut state, &mut cov, None, 500.0).unwrap();
        marginalize_clones(&mut state, &mut cov, None, &[id]).unwrap();
        assert!((cov.full() - before.full()).amax() <= 1e-14);
        assert_eq!(state.dim(), before.dim());
    }

    #[test]
    fn marginalize_empty_is_noop() {
        let (mut state, mut cov) = fixture(3, 1, 3);
        let (s0, c0) = (state.clone(), cov.clone());
        marginalize_clones(&mut state, &mut cov, None, &[]).unwrap();
        assert_eq!(state, s0);
        assert_eq!(cov, c0);
    }

    #[test]
    fn marginalize_is_submatrix() {
        let (mut state, mut cov) = fixture(4, 2, 4);
        let full = cov.full();
        let ids: Vec<u64> = state.clones.iter().map(|c| c.id).collect();
        marginalize_clones(&mut state, &mut cov, None, &[ids[1], ids[3]]).unwrap();
        let keep: Vec<usize> = (0..21).chain(27..33).chain(39..51).collect();
        assert_eq!(cov.full(), select_symmetric(&full, &keep));
        assert_eq!(state.dim(), 15 + 6 * 2 + 6 * 2);
    }

    #[test]
    fn marginalize_unknown_fails() {
        let (mut state, mut cov) = fixture(2, 0, 5);
        assert!(matches!(
            marginalize_clones(&mut state, &mut cov, None, &[999]),
            Err(Error::UnknownClone(999))
        ));
    }

    #[test]
    fn window_full() {
        let (mut state, mut cov) = fixture(10, 0, 6);
        assert!(matches!(
            augment_clone(&mut state, &mut cov, None, 1e3),
            Err(Error::WindowFull(10))
        ));
    }

    #[test]
    fn keyframe_cadence_and_marginal() {
        let (mut state, mut cov) = fixture(2, 0, 7);
        state.last_keyframe_time = 10.0;
        assert!(matches!(
            augment_keyframe(&mut state, &mut cov, None, 13.0, 5.0, true),
            Err(Error::TooSoon { .. })
        ));
        let before = cov.full();
        let id = augment_keyframe(&mut state, &mut cov, None, 15.0, 5.0, true).unwrap();
        let o = state.offset_of(FrameRef::Keyframe(id)).unwrap();
        let after = cov.full();
        for (a, &ia) in IMU_POSE_INDICES.iter().enumerate() {
            for (b, &ib) in IMU_POSE_INDICES.iter().enumerate() {
                assert_eq!(after[(o + a, o + b)], before[(ia, ib)]);
            }
        }
        assert_eq!(state.keyframes.get(id).unwrap().partition, Partition::Local);
    }

    #[test]
    fn keyframe_without_covariance_cloning_is_uncorrelated() {
        let (mut state, mut cov) = fixture(2, 1, 8);
        let id = augment_keyframe(&mut state, &mut cov, None, 50.0, 5.0, false).unwrap();
        let o = state.offset_of(FrameRef::Keyframe(id)).unwrap();
        let full = cov.full();
        for i in o..o + 6 {
            for j in 0..full.nrows() {
                if !(o..o + 6).contains(&j) {
                    assert_eq!(full[(i, j)], 0.0);
                }
            }
        }
        assert!(full[(o, o)] > 0.0);
    }

    fn spread_keyframes(state: &mut StateVector, spacing: f64) {
        let mut frames = state.keyframes.frames.clone();
        for (i, k) in frames.iter_mut().enumerate() {
            k.pose.position = Vec3::new(spacing * i as f64, 0.0, 0.0);
        }
        state.keyframes.frames = frames;
    }

    #[test]
    fn repartition_identity_when_nothing_moves() {
        let (mut state, mut cov) = fixture(2, 3, 9);
        spread_keyframes(&mut state, 1.0);
        let c0 = cov.clone();
        let s = repartition(&mut state, &mut cov, None, Vec3::zeros(), 10.0).unwrap();
        assert_eq!(s, RepartitionSummary::default());
        assert_eq!(cov, c0);
    }

    #[test]
    fn repartition_is_symmetric_permutation() {
        let (mut state, mut cov) = fixture(2, 4, 10);
        spread_keyframes(&mut state, 10.0);
        let before = cov.full();
        let ids: Vec<u64> = state.keyframes.iter().map(|k| k.id).collect();
        let s = repartition(&mut state, &mut cov, None, Vec3::new(25.0, 0.0, 0.0), 15.0).unwrap();
        assert_eq!(s.to_global, vec![ids[0]]);
        assert_eq!(state.keyframes.global_count(), 1);
        assert_eq!(cov.global_dim(), 6);
        // Oracle: explicit permutation of the full matrix.
        let active = state.active_dim();
        let perm: Vec<usize> = (0..active)
            .chain(active + 6..active + 24)
            .chain(active..active + 6)
            .collect();
        let expected = select_symmetric(&before, &perm);
        assert!((cov.full() - &expected).amax() <= 1e-15);
        let mut e0: Vec<f64> = before.symmetric_eigenvalues().iter().copied().collect();
        let mut e1: Vec<f64> = cov.full().symmetric_eigenvalues().iter().copied().collect();
        e0.sort_by(f64::total_cmp);
        e1.sort_by(f64::total_cmp);
        for (a, b) in e0.iter().zip(&e1) {
            assert!((a - b).abs() <= 1e-12);
        }
        // Radius rule holds for every tag.
        for k in state.keyframes.iter() {
            let inside = (k.pose.position - state.local_center).norm() <= 15.0;
            assert_eq!(inside, k.partition == Partition::Local);
        }
    }

    #[test]
    fn repartition_all_local_leaves_global_empty() {
        let (mut state, mut cov) = fixture(1, 3, 11);
        spread_keyframes(&mut state, 1.0);
        repartition(&mut state, &mut cov, None, Vec3::new(1.0, 0.0, 0.0), 100.0).unwrap();
        assert_eq!(cov.gg.shape(), (0, 0));
        assert_eq!(cov.lg.ncols(), 0);
    }

    #[test]
    fn repartition_rejects_open_epoch() {
        let (mut state, mut cov) = fixture(1, 2, 12);
        let mut acc = CompressedAccumulator::new(state.local_dim());
        acc.u[0] = 1.0;
        assert!(matches!(
            repartition(&mut state, &mut cov, Some(&mut acc), Vec3::zeros(), 1.0),
            Err(Error::StaleAccumulator)
        ));
    }

    #[test]
    fn dimension_bookkeeping() {
        let (mut state, mut cov) = fixture(3, 2, 13);
        let check = |s: &StateVector, c: &PartitionedCovariance| {
            assert_eq!(s.dim(), 15 + 6 * s.clones.len() + 6 * s.keyframes.len());
            assert_eq!(c.dim(), s.dim());
            assert!(is_symmetric_psd(&c.full()));
        };
        check(&state, &cov);
        augment_clone(&mut state, &mut cov, None, 900.0).unwrap();
        check(&state, &cov);
        augment_keyframe(&mut state, &mut cov, None, 901.0, 5.0, true).unwrap();
        check(&state, &cov);
        let oldest = state.clones.oldest().unwrap().id;
        marginalize_clones(&mut state, &mut cov, None, &[oldest]).unwrap();
        check(&state, &cov);
    }
}
