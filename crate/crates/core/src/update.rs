//! Measurement-update engines over [`LinearizedBlock`]s.
//!
//! * [`full_update`]: dense EKF over the whole state, Joseph form. This is
//!   the reference the other two are checked against.
//! * [`schmidt_update`]: consider update; keyframes keep their mean and
//!   marginal, their correlation with the active state is maintained.
//! * [`compressed_update`]: touches only the local state and folds the
//!   information destined for the global partition into a
//!   [`CompressedAccumulator`]; [`recover_global`] applies it in one batch.
//!
//! With `Ψ = Hᵀ S⁻¹ H`, `φ = P_LL Ψ` and `Φ = I − φ`, a local update maps the
//! cross covariance `P_LG ← Φ P_LG`, the global block
//! `P_GG ← P_GG − P_GL Ψ P_LG` and the global mean
//! `x_G ← x_G + P_GL Hᵀ S⁻¹ r`. Writing the current cross covariance as
//! `T · P_LG(0)` turns all three into sums over the epoch that never touch a
//! global-sized matrix.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::state::{select_rows, symmetrize, PartitionedCovariance, StateVector};
use crate::vision::LinearizedBlock;

/// Innovation covariances with an estimated condition number above this are
/// rejected.
pub const MAX_INNOVATION_CONDITION: f64 = 1e12;

/// Deferred global-update record for one compression epoch.
///
/// `t` maps the epoch-start local error state to the current one
/// (`P_LG(k) = t · P_LG(0)`); it is `dL(k) × dL(0)` because clones come and
/// go inside an epoch. `y = Σ tᵀ Ψ t` and `u = Σ tᵀ Hᵀ S⁻¹ r`, each term
/// taken with the pre-update `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct CompressedAccumulator {
    pub t: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub u: DVector<f64>,
}

impl CompressedAccumulator {
    pub fn new(local_dim: usize) -> Self {
        Self {
            t: DMatrix::identity(local_dim, local_dim),
            y: DMatrix::zeros(local_dim, local_dim),
            u: DVector::zeros(local_dim),
        }
    }

    /// Local dimension at the last reset.
    pub fn epoch_dim(&self) -> usize {
        self.t.ncols()
    }

    pub fn is_reset(&self) -> bool {
        self.t.is_square()
            && self.t == DMatrix::identity(self.t.nrows(), self.t.ncols())
            && self.y.iter().all(|&v| v == 0.0)
            && self.u.iter().all(|&v| v == 0.0)
    }

    pub(crate) fn select_rows(&mut self, src: &[usize]) {
        self.t = select_rows(&self.t, src);
    }

    pub(crate) fn map_rows(&mut self, f: impl FnOnce(&DMatrix<f64>) -> DMatrix<f64>) {
        self.t = f(&self.t);
    }

    /// Applies a transition acting on the leading rows of the local state
    /// (identity elsewhere): `t ← J̄ t`.
    pub(crate) fn left_multiply_leading(&mut self, j: &DMatrix<f64>) {
        let n = j.nrows();
        let head = j * self.t.rows(0, n);
        self.t.rows_mut(0, n).copy_from(&head);
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct UpdateReport {
    pub residual_dim: usize,
    /// `rᵀ S⁻¹ r`.
    pub chi2: f64,
    /// Analytic floating-point operation count of the update.
    pub flops: u64,
    pub accepted: bool,
}

struct Innovation {
    chol: Cholesky<f64, Dyn>,
}

impl Innovation {
    fn new(s: DMatrix<f64>) -> Result<Self> {
        let mut s = s;
        symmetrize(&mut s);
        let chol = Cholesky::new(s).ok_or(Error::SingularInnovation)?;
        let diag = chol.l_dirty().diagonal();
        let (lo, hi) = diag
            .iter()
            .fold((f64::INFINITY, 0.0f64), |(lo, hi), &d| (lo.min(d), hi.max(d)));
        // Lower bound of cond(S) from the Cholesky diagonal.
        if !(lo > 0.0) || (hi / lo).powi(2) > MAX_INNOVATION_CONDITION {
            return Err(Error::SingularInnovation);
        }
        Ok(Self { chol })
    }

    fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }
}

fn f(x: usize) -> u64 {
    x as u64
}

/// Flops for a dense Joseph-form update over `d` states with `m` rows.
pub fn dense_update_flops(d: usize, m: usize) -> u64 {
    let (d, m) = (f(d), f(m));
    // PHᵀ, S, Cholesky + solve for K, KH, (I−KH)P(I−KH)ᵀ, KRKᵀ.
    2 * d * d * m + 2 * m * m * d + m * m * m / 3 + 2 * m * m * d + 2 * d * d * m
        + 4 * d * d * d
        + 2 * d * m * m
        + 2 * d * d * m
}

/// Flops for a Schmidt update with `da` active and `ds` keyframe states.
pub fn schmidt_update_flops(da: usize, ds: usize, dl: usize, m: usize) -> u64 {
    let (da, ds, dl, m) = (f(da), f(ds), f(dl), f(m));
    let d = da + ds;
    2 * d * dl * m + 2 * m * m * dl + m * m * m / 3 + 2 * m * m * da + 2 * da * da * m
        + 2 * da * ds * m
}

/// Flops for a compressed update: a function of local sizes only.
pub fn compressed_update_flops(dl: usize, epoch_dl: usize, m: usize) -> u64 {
    let (dl, e, m) = (f(dl), f(epoch_dl), f(m));
    // U = P Hᵀ, S, Cholesky, K, P −= K Uᵀ, W = H T, S⁻¹W, Y += WᵀS⁻¹W,
    // T −= K W, u += WᵀS⁻¹r.
    2 * dl * dl * m + 2 * m * m * dl + m * m * m / 3 + 2 * m * m * dl + 2 * dl * dl * m
        + 2 * m * dl * e
        + 2 * m * m * e
        + 2 * m * e * e
        + 2 * dl * m * e
        + 2 * m * e
}

/// Flops for a global recovery.
pub fn recovery_flops(dl: usize, epoch_dl: usize, dg: usize) -> u64 {
    let (dl, e, dg) = (f(dl), f(epoch_dl), f(dg));
    2 * dl * e * dg + 2 * e * e * dg + 2 * e * dg * dg + 2 * e * dg
}

/// Block columns padded with zeros to `dim`. Fails on non-zero columns
/// beyond `dim`.
fn block_columns(block: &LinearizedBlock, dim: usize) -> Result<DMatrix<f64>> {
    let n = block.h.ncols();
    if n == dim {
        return Ok(block.h.clone());
    }
    if n < dim {
        let mut h = DMatrix::zeros(block.h.nrows(), dim);
        h.columns_mut(0, n).copy_from(&block.h);
        return Ok(h);
    }
    if block.h.columns(dim, n - dim).iter().any(|&v| v != 0.0) {
        return Err(Error::NonLocalBlock);
    }
    Ok(block.h.columns(0, dim).into_owned())
}

fn check_block(block: &LinearizedBlock, local_dim: usize) -> Result<()> {
    let m = block.h.nrows();
    if block.residual.len() != m || block.noise.shape() != (m, m) {
        return Err(Error::DimensionMismatch("block rows disagree".into()));
    }
    if block.h.ncols() < local_dim {
        return Err(Error::DimensionMismatch(format!(
            "block has {} columns, local state has {local_dim}",
            block.h.ncols()
        )));
    }
    Ok(())
}

fn empty_report(block: &LinearizedBlock) -> UpdateReport {
    UpdateReport {
        residual_dim: block.h.nrows(),
        chi2: 0.0,
        flops: 0,
        accepted: true,
    }
}

/// Dense EKF update on the covariance; returns the full error-state
/// correction without applying it.
pub fn dense_update(
    cov: &mut PartitionedCovariance,
    block: &LinearizedBlock,
) -> Result<(DVector<f64>, UpdateReport)> {
    check_block(block, cov.local_dim())?;
    let d = cov.dim();
    let m = block.h.nrows();
    if m == 0 {
        return Ok((DVector::zeros(d), empty_report(block)));
    }
    let h = block_columns(block, d)?;
    let p = cov.full();
    let pht = &p * h.transpose();
    let s = &h * &pht + &block.noise;
    let inn = Innovation::new(s)?;
    let k = inn.solve(&pht.transpose()).transpose();
    let dx = &k * &block.residual;
    let chi2 = block.residual.dot(&inn.solve_vec(&block.residual));

    let i_kh = DMatrix::identity(d, d) - &k * &h;
    let mut post = &i_kh * &p * i_kh.transpose() + &k * &block.noise * k.transpose();
    symmetrize(&mut post);
    *cov = PartitionedCovariance::from_full(&post, cov.local_dim());
    Ok((
        dx,
        UpdateReport {
            residual_dim: m,
            chi2,
            flops: dense_update_flops(d, m),
            accepted: true,
        },
    ))
}

/// Standard EKF update of the whole state.
pub fn full_update(
    state: &mut StateVector,
    cov: &mut PartitionedCovariance,
    block: &LinearizedBlock,
) -> Result<UpdateReport> {
    let (dx, report) = dense_update(cov, block)?;
    state.apply_correction(&dx);
    Ok(report)
}

/// Schmidt (consider) update: the gain on every keyframe state is zero.
pub fn schmidt_update(
    state: &mut StateVector,
    cov: &mut PartitionedCovariance,
    block: &LinearizedBlock,
) -> Result<UpdateReport> {
    let dl = state.local_dim();
    check_block(block, dl)?;
    let m = block.h.nrows();
    if m == 0 {
        return Ok(empty_report(block));
    }
    let d = state.dim();
    let da = state.active_dim();
    let ds = d - da;
    let h = block_columns(block, dl)?;
    let mut p = cov.full();

    // U = P Hᵀ uses only the local columns the block can touch.
    let u = p.columns(0, dl) * h.transpose();
    let s = &h * u.rows(0, dl) + &block.noise;
    let inn = Innovation::new(s)?;
    let ka = inn.solve(&u.rows(0, da).transpose()).transpose();
    let chi2 = block.residual.dot(&inn.solve_vec(&block.residual));

    let dxa = &ka * &block.residual;
    let mut dx = DVector::zeros(dl);
    dx.rows_mut(0, da).copy_from(&dxa);

    // P_AA −= K_A S K_Aᵀ = K_A U_Aᵀ;  P_AS −= K_A U_Sᵀ;  P_SS untouched.
    let daa = &ka * u.rows(0, da).transpose();
    let das = &ka * u.rows(da, ds).transpose();
    {
        let mut paa = p.view_mut((0, 0), (da, da));
        paa -= &daa;
    }
    {
        let mut pas = p.view_mut((0, da), (da, ds));
        pas -= &das;
    }
    {
        let mut psa = p.view_mut((da, 0), (ds, da));
        psa -= das.transpose();
    }
    symmetrize(&mut p);
    *cov = PartitionedCovariance::from_full(&p, dl);
    state.apply_local_correction(&dx);
    Ok(UpdateReport {
        residual_dim: m,
        chi2,
        flops: schmidt_update_flops(da, ds, dl, m),
        accepted: true,
    })
}

/// Local-only update that defers every global consequence to `acc`.
///
/// Global mean, `P_LG` and `P_GG` are not read or written.
pub fn compressed_update(
    state: &mut StateVector,
    ll: &mut DMatrix<f64>,
    block: &LinearizedBlock,
    acc: &mut CompressedAccumulator,
) -> Result<UpdateReport> {
    let dl = state.local_dim();
    if block.h.ncols() > dl {
        block_columns(block, dl)?;
    }
    check_block(block, dl)?;
    if ll.nrows() != dl || acc.t.nrows() != dl {
        return Err(Error::DimensionMismatch(format!(
            "P_LL is {}, accumulator has {} rows, local state is {dl}",
            ll.nrows(),
            acc.t.nrows()
        )));
    }
    let m = block.h.nrows();
    if m == 0 {
        return Ok(empty_report(block));
    }
    let h = block_columns(block, dl)?;
    let e = acc.epoch_dim();

    let u = &*ll * h.transpose();
    let s = &h * &u + &block.noise;
    let inn = Innovation::new(s)?;
    let k = inn.solve(&u.transpose()).transpose();
    let sinv_r = inn.solve_vec(&block.residual);
    let chi2 = block.residual.dot(&sinv_r);

    // Accumulator terms use the pre-update T. With W = H T:
    //   Tᵀ Ψ T = Wᵀ S⁻¹ W,  Tᵀ Hᵀ S⁻¹ r = Wᵀ S⁻¹ r,  Φ T = T − K W.
    let w = &h * &acc.t;
    let sinv_w = inn.solve(&w);
    acc.y += w.transpose() * &sinv_w;
    acc.u += w.transpose() * &sinv_r;
    acc.t -= &k * &w;
    symmetrize(&mut acc.y);

    let dx = &k * &block.residual;
    *ll -= &k * u.transpose();
    symmetrize(ll);
    state.apply_local_correction(&dx);
    Ok(UpdateReport {
        residual_dim: m,
        chi2,
        flops: compressed_update_flops(dl, e, m),
        accepted: true,
    })
}

/// Applies the deferred corrections to `P_LG`, `P_GG` and the global mean,
/// then resets the accumulator. Returns the flop count.
pub fn recover_global(
    state: &mut StateVector,
    cov: &mut PartitionedCovariance,
    acc: &mut CompressedAccumulator,
) -> Result<u64> {
    let dl = state.local_dim();
    let dg = state.global_dim();
    if cov.lg.nrows() != acc.epoch_dim() || acc.t.nrows() != dl || cov.ll.nrows() != dl {
        return Err(Error::DimensionMismatch(format!(
            "epoch dim {} vs P_LG rows {}, local dim {dl}",
            acc.epoch_dim(),
            cov.lg.nrows()
        )));
    }
    if cov.gg.nrows() != dg || cov.lg.ncols() != dg {
        return Err(Error::DimensionMismatch("global block size".into()));
    }
    if acc.is_reset() {
        return Ok(0);
    }
    let flops = recovery_flops(dl, acc.epoch_dim(), dg);
    if dg > 0 {
        let lg0 = &cov.lg;
        let new_lg = &acc.t * lg0;
        let dgg = lg0.transpose() * &acc.y * lg0;
        let dxg = lg0.transpose() * &acc.u;
        cov.gg -= dgg;
        symmetrize(&mut cov.gg);
        cov.lg = new_lg;
        state.apply_global_correction(&dxg);
    } else {
        cov.lg = DMatrix::zeros(dl, 0);
    }
    *acc = CompressedAccumulator::new(dl);
    Ok(flops)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state::tests::{fixture, random_spd};
    use crate::state::{is_symmetric_psd, repartition, Partition};
    use crate::geom::Vec3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_block(rows: usize, cols: usize, rng: &mut impl Rng) -> LinearizedBlock {
        LinearizedBlock {
            h: DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0)),
            residual: DVector::from_fn(rows, |_, _| rng.random_range(-0.1..0.1)),
            noise: DMatrix::identity(rows, rows) * 0.04,
        }
    }

    /// Fixture with the last `n_global` keyframes moved to the global
    /// partition.
    fn partitioned_fixture(
        n_clones: usize,
        n_kf: usize,
        n_global: usize,
        seed: u64,
    ) -> (StateVector, PartitionedCovariance) {
        let (mut state, mut cov) = fixture(n_clones, n_kf, seed);
        let ids: Vec<u64> = state.keyframes.iter().map(|k| k.id).collect();
        // Place keyframes on a line; the far ones fall outside the radius.
        let mut positions = Vec::new();
        for (i, _) in ids.iter().enumerate() {
            let x = if i < n_kf - n_global { 0.0 } else { 100.0 };
            positions.push(Vec3::new(x, i as f64, 0.0));
        }
        set_keyframe_positions(&mut state, &positions);
        repartition(&mut state, &mut cov, None, Vec3::zeros(), 50.0).unwrap();
        assert_eq!(state.keyframes.global_count(), n_global);
        (state, cov)
    }

    fn set_keyframe_positions(state: &mut StateVector, positions: &[Vec3]) {
        let frames: Vec<_> = state.keyframes.iter().cloned().collect();
        for (k, p) in frames.iter().zip(positions) {
            let o = state.offset_of(crate::state::FrameRef::Keyframe(k.id)).unwrap();
            let mut dx = DVector::zeros(state.dim());
            dx.fixed_rows_mut::<3>(o + 3).copy_from(&(p - k.pose.position));
            state.apply_correction(&dx);
        }
    }

    #[test]
    fn scalar_textbook_case() {
        // One position state observed directly, P = 1, R = 1.
        let mut cov = PartitionedCovariance::new(
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::zeros(1, 0),
            DMatrix::zeros(0, 0),
        );
        let block = LinearizedBlock {
            h: DMatrix::from_element(1, 1, 1.0),
            residual: DVector::from_element(1, 2.0),
            noise: DMatrix::from_element(1, 1, 1.0),
        };
        let (dx, _) = dense_update(&mut cov, &block).unwrap();
        assert!((cov.ll[(0, 0)] - 0.5).abs() < 1e-15);
        // Gain 0.5 applied to residual 2.
        assert!((dx[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_jacobian_changes_nothing() {
        let (mut state, mut cov) = fixture(2, 2, 20);
        let (s0, c0) = (state.clone(), cov.clone());
        let mut block = random_block(4, state.local_dim(), &mut ChaCha8Rng::seed_from_u64(1));
        block.h.fill(0.0);
        full_update(&mut state, &mut cov, &block).unwrap();
        assert!((cov.full() - c0.full()).amax() < 1e-15);
        assert_eq!(state.imu, s0.imu);
    }

    #[test]
    fn dense_matches_batch_least_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for n in [3usize, 7, 12] {
            let p = random_spd(n, &mut rng);
            let block = random_block(n / 2 + 2, n, &mut rng);
            let mut cov = PartitionedCovariance::from_full(&p, n);
            let (dx, _) = dense_update(&mut cov, &block).unwrap();
            // Information form: (P⁻¹ + HᵀR⁻¹H)⁻¹ and its mean.
            let rinv = block.noise.clone().try_inverse().unwrap();
            let info = p.clone().try_inverse().unwrap() + block.h.transpose() * &rinv * &block.h;
            let post = info.clone().try_inverse().unwrap();
            let mean = &post * block.h.transpose() * &rinv * &block.residual;
            assert!((cov.full() - &post).amax() < 1e-10);
            assert!((dx - mean).amax() < 1e-10);
        }
    }

    #[test]
    fn singular_innovation_rejected() {
        let mut cov = PartitionedCovariance::new(
            DMatrix::zeros(2, 2),
            DMatrix::zeros(2, 0),
            DMatrix::zeros(0, 0),
        );
        let block = LinearizedBlock {
            h: DMatrix::identity(2, 2),
            residual: DVector::zeros(2),
            noise: DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1e-14])),
        };
        assert!(matches!(dense_update(&mut cov, &block), Err(Error::SingularInnovation)));
    }

    #[test]
    fn schmidt_freezes_keyframe_means() {
        let (mut state, mut cov) = fixture(3, 3, 22);
        let block = random_block(6, state.local_dim(), &mut ChaCha8Rng::seed_from_u64(2));
        let kf0: Vec<_> = state.keyframes.iter().map(|k| k.pose).collect();
        schmidt_update(&mut state, &mut cov, &block).unwrap();
        let kf1: Vec<_> = state.keyframes.iter().map(|k| k.pose).collect();
        assert_eq!(kf0, kf1);
        assert!(is_symmetric_psd(&cov.full()));
    }

    #[test]
    fn schmidt_equals_full_without_keyframe_involvement() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let (state0, cov0) = fixture(3, 2, 23);
        let da = state0.active_dim();
        let mut block = random_block(5, state0.local_dim(), &mut rng);
        block.h.columns_mut(da, state0.local_dim() - da).fill(0.0);

        // Correlated keyframes: the active-state outputs still agree.
        let (mut s_full, mut c_full) = (state0.clone(), cov0.clone());
        let (mut s_sch, mut c_sch) = (state0.clone(), cov0.clone());
        full_update(&mut s_full, &mut c_full, &block).unwrap();
        schmidt_update(&mut s_sch, &mut c_sch, &block).unwrap();
        let (pf, ps) = (c_full.full(), c_sch.full());
        let d = state0.dim();
        assert!((pf.view((0, 0), (da, d)) - ps.view((0, 0), (da, d))).amax() < 1e-12);
        assert!(s_full.imu.boxminus(&s_sch.imu).amax() < 1e-12);

        // Uncorrelated keyframes: the whole output agrees.
        let mut p = cov0.full();
        p.view_mut((0, da), (da, d - da)).fill(0.0);
        p.view_mut((da, 0), (d - da, da)).fill(0.0);
        let cov_u = PartitionedCovariance::from_full(&p, state0.local_dim());
        let (mut s_full, mut c_full) = (state0.clone(), cov_u.clone());
        let (mut s_sch, mut c_sch) = (state0.clone(), cov_u);
        full_update(&mut s_full, &mut c_full, &block).unwrap();
        schmidt_update(&mut s_sch, &mut c_sch, &block).unwrap();
        assert!((c_full.full() - c_sch.full()).amax() < 1e-12);
        assert!(s_full.boxminus(&s_sch).amax() < 1e-12);
    }

    #[test]
    fn schmidt_is_conservative() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let (state0, cov0) = fixture(2, 3, 24);
        let block = random_block(6, state0.local_dim(), &mut rng);
        let (mut s_full, mut c_full) = (state0.clone(), cov0.clone());
        let (mut s_sch, mut c_sch) = (state0.clone(), cov0);
        full_update(&mut s_full, &mut c_full, &block).unwrap();
        schmidt_update(&mut s_sch, &mut c_sch, &block).unwrap();
        let diff = c_sch.full() - c_full.full();
        let da = state0.active_dim();
        let ds = state0.dim() - da;
        let dss = diff.view((da, da), (ds, ds)).into_owned();
        assert!(dss.symmetric_eigenvalues().min() >= -1e-10);
        assert!(diff.symmetric_eigenvalues().min() >= -1e-10);
    }

    #[test]
    fn compressed_zero_jacobian_is_noop() {
        let (mut state, cov) = partitioned_fixture(2, 3, 2, 25);
        let mut acc = CompressedAccumulator::new(state.local_dim());
        let mut ll = cov.ll.clone();
        let s0 = state.clone();
        let mut block = random_block(4, state.local_dim(), &mut ChaCha8Rng::seed_from_u64(3));
        block.h.fill(0.0);
        compressed_update(&mut state, &mut ll, &block, &mut acc).unwrap();
        assert!(acc.is_reset());
        assert_eq!(state, s0);
        assert!((ll - &cov.ll).amax() < 1e-15);
    }

    #[test]
    fn compressed_rejects_global_columns() {
        let (mut state, cov) = partitioned_fixture(1, 3, 1, 26);
        let mut acc = CompressedAccumulator::new(state.local_dim());
        let mut ll = cov.ll.clone();
        let block = random_block(3, state.dim(), &mut ChaCha8Rng::seed_from_u64(4));
        assert!(matches!(
            compressed_update(&mut state, &mut ll, &block, &mut acc),
            Err(Error::NonLocalBlock)
        ));
    }

    #[test]
    fn single_update_then_recovery_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let (state0, cov0) = partitioned_fixture(2, 4, 2, 27);
        let block = random_block(5, state0.local_dim(), &mut rng);

        let (mut sd, mut cd) = (state0.clone(), cov0.clone());
        full_update(&mut sd, &mut cd, &block).unwrap();

        let (mut sc, mut cc) = (state0.clone(), cov0.clone());
        let mut acc = CompressedAccumulator::new(sc.local_dim());
        let g0 = (cc.lg.clone(), cc.gg.clone());
        compressed_update(&mut sc, &mut cc.ll, &block, &mut acc).unwrap();
        // Deferred: global data untouched until recovery.
        assert_eq!((cc.lg.clone(), cc.gg.clone()), g0);
        recover_global(&mut sc, &mut cc, &mut acc).unwrap();

        let (a, b) = (cc.full(), cd.full());
        assert!((&a - &b).amax() <= 1e-9 * b.amax());
        assert!(sc.boxminus(&sd).amax() < 1e-9);
        assert!(acc.is_reset());
    }

    #[test]
    fn recovery_noops() {
        let (mut state, mut cov) = partitioned_fixture(2, 3, 1, 28);
        let mut acc = CompressedAccumulator::new(state.local_dim());
        let (s0, c0) = (state.clone(), cov.clone());
        recover_global(&mut state, &mut cov, &mut acc).unwrap();
        assert_eq!((state, cov), (s0, c0));

        let (mut state, mut cov) = fixture(2, 2, 29);
        assert_eq!(state.keyframes.iter().filter(|k| k.partition == Partition::Global).count(), 0);
        let mut acc = CompressedAccumulator::new(state.local_dim());
        let block = random_block(3, state.local_dim(), &mut ChaCha8Rng::seed_from_u64(5));
        compressed_update(&mut state, &mut cov.ll, &block, &mut acc).unwrap();
        recover_global(&mut state, &mut cov, &mut acc).unwrap();
        assert_eq!(cov.gg.shape(), (0, 0));
        assert!(acc.is_reset());
    }

    #[test]
    fn recovery_dimension_mismatch() {
        let (mut state, mut cov) = partitioned_fixture(2, 3, 1, 30);
        let mut acc = CompressedAccumulator::new(state.local_dim() + 6);
        assert!(matches!(
            recover_global(&mut state, &mut cov, &mut acc),
            Err(Error::DimensionMismatch(_))
        ));
    }
}
