//! IMU time update.
//!
//! Each sample is held constant over its interval. The attitude is integrated
//! in closed form (`R_IG ← Exp(−ω̂ dt) R_IG`); velocity and position use RK4
//! on `v̇ = R_GI(t) â + g`, `ṗ = v`. The error-state transition is obtained
//! by integrating the linearized error dynamics `Φ̇ = F(t) Φ` with the same
//! RK4 stages, so it is the derivative of the mean map to integrator
//! precision rather than a first-order `I + F dt`.
//!
//! Error dynamics for the `[dθ, db_g, dv, db_a, dp]` layout, with
//! `R_true = Exp(dθ) R̂`:
//!
//! ```text
//! dθ'  = −[ω̂]× dθ + db_g − n_g
//! dv'  = R_GI [â]× dθ − R_GI db_a − R_GI n_a
//! dp'  = dv
//! db_g' = n_wg,  db_a' = n_wa
//! ```

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::geom::{skew, Mat3, UnitQuaternion, Vec3};
use crate::state::{imu_idx, ImuState, Mat15, PartitionedCovariance, IMU_DIM};
use crate::update::CompressedAccumulator;

pub const GRAVITY: Vec3 = Vec3::new(0.0, 0.0, -9.81);

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImuSample {
    pub timestamp: f64,
    /// Specific force, body frame (m/s²).
    pub accel: Vec3,
    /// Angular rate, body frame (rad/s).
    pub gyro: Vec3,
}

/// Continuous-time spectral densities.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ImuNoiseParams {
    /// rad/s/√Hz
    pub gyro_noise_density: f64,
    /// m/s²/√Hz
    pub accel_noise_density: f64,
    /// rad/s²/√Hz
    pub gyro_bias_walk: f64,
    /// m/s³/√Hz
    pub accel_bias_walk: f64,
}

impl ImuNoiseParams {
    pub fn zero() -> Self {
        Self {
            gyro_noise_density: 0.0,
            accel_noise_density: 0.0,
            gyro_bias_walk: 0.0,
            accel_bias_walk: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.gyro_noise_density,
            self.accel_noise_density,
            self.gyro_bias_walk,
            self.accel_bias_walk,
        ];
        if all.iter().all(|v| v.is_finite() && *v >= 0.0) {
            Ok(())
        } else {
            Err(Error::ConfigError("IMU noise densities must be finite and non-negative".into()))
        }
    }
}

impl Default for ImuNoiseParams {
    fn default() -> Self {
        Self {
            gyro_noise_density: 1.7e-4,
            accel_noise_density: 2.0e-3,
            gyro_bias_walk: 1.9e-5,
            accel_bias_walk: 3.0e-3,
        }
    }
}

/// Error-state transition and discrete process noise for the IMU block.
/// Clone and keyframe blocks transition with identity and no noise.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionBlock {
    pub jacobian: Mat15,
    pub noise: Mat15,
}

impl TransitionBlock {
    pub fn identity() -> Self {
        Self {
            jacobian: Mat15::identity(),
            noise: Mat15::zeros(),
        }
    }
}

fn check_dt(dt: f64) -> Result<()> {
    if dt > 0.0 && dt.is_finite() {
        Ok(())
    } else {
        Err(Error::NonPositiveDt(dt))
    }
}

/// Body-to-global rotation at time `t` into the interval.
fn r_gi_at(r_gi0: &Mat3, omega: &Vec3, t: f64) -> Mat3 {
    r_gi0 * UnitQuaternion::exp(&(omega * t)).to_rotation_matrix()
}

/// Propagates the IMU mean over `dt` with the sample held constant.
pub fn propagate_mean(
    imu: &ImuState,
    sample: &ImuSample,
    dt: f64,
    gravity: &Vec3,
) -> Result<ImuState> {
    check_dt(dt)?;
    let omega = sample.gyro - imu.gyro_bias;
    let acc = sample.accel - imu.accel_bias;
    let r_gi0 = imu.attitude.to_rotation_matrix().transpose();

    let a0 = r_gi0 * acc + gravity;
    let am = r_gi_at(&r_gi0, &omega, 0.5 * dt) * acc + gravity;
    let a1 = r_gi_at(&r_gi0, &omega, dt) * acc + gravity;

    let velocity = imu.velocity + dt / 6.0 * (a0 + 4.0 * am + a1);
    let position = imu.position + dt * imu.velocity + dt * dt / 6.0 * (a0 + 2.0 * am);
    let attitude = crate::geom::quat_compose(&UnitQuaternion::exp(&(-omega * dt)), &imu.attitude);
    Ok(ImuState {
        attitude,
        velocity,
        position,
        ..*imu
    })
}

fn error_dynamics(omega: &Vec3, acc_skew: &Mat3, r_gi: &Mat3) -> Mat15 {
    use imu_idx::*;
    let mut f = Mat15::zeros();
    f.fixed_view_mut::<3, 3>(THETA, THETA).copy_from(&(-skew(omega)));
    f.fixed_view_mut::<3, 3>(THETA, BG).copy_from(&Mat3::identity());
    f.fixed_view_mut::<3, 3>(V, THETA).copy_from(&(r_gi * acc_skew));
    f.fixed_view_mut::<3, 3>(V, BA).copy_from(&(-r_gi));
    f.fixed_view_mut::<3, 3>(P, V).copy_from(&Mat3::identity());
    f
}

fn noise_input(noise: &ImuNoiseParams, r_gi: &Mat3) -> Mat15 {
    use imu_idx::*;
    // G Qc Gᵀ; the accelerometer term is isotropic so R_GI drops out.
    let _ = r_gi;
    let mut q = Mat15::zeros();
    let set = |q: &mut Mat15, at: usize, v: f64| {
        for i in 0..3 {
            q[(at + i, at + i)] = v;
        }
    };
    set(&mut q, THETA, noise.gyro_noise_density.powi(2));
    set(&mut q, BG, noise.gyro_bias_walk.powi(2));
    set(&mut q, V, noise.accel_noise_density.powi(2));
    set(&mut q, BA, noise.accel_bias_walk.powi(2));
    q
}

/// Error-state transition `J` and discrete noise `Q` for one sample.
pub fn compute_transition(
    imu: &ImuState,
    sample: &ImuSample,
    dt: f64,
    noise: &ImuNoiseParams,
) -> Result<TransitionBlock> {
    check_dt(dt)?;
    let omega = sample.gyro - imu.gyro_bias;
    let acc_skew = skew(&(sample.accel - imu.accel_bias));
    let r_gi0 = imu.attitude.to_rotation_matrix().transpose();

    let f0 = error_dynamics(&omega, &acc_skew, &r_gi0);
    let fm = error_dynamics(&omega, &acc_skew, &r_gi_at(&r_gi0, &omega, 0.5 * dt));
    let f1 = error_dynamics(&omega, &acc_skew, &r_gi_at(&r_gi0, &omega, dt));

    let i = Mat15::identity();
    let k1 = f0;
    let k2 = fm * (i + 0.5 * dt * k1);
    let k3 = fm * (i + 0.5 * dt * k2);
    let k4 = f1 * (i + dt * k3);
    let jacobian = i + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);

    // Trapezoid on ∫ Φ(dt,s) G Qc Gᵀ Φ(dt,s)ᵀ ds.
    let gq = noise_input(noise, &r_gi0);
    let mut q = 0.5 * dt * (jacobian * gq * jacobian.transpose() + gq);
    q = 0.5 * (q + q.transpose());
    Ok(TransitionBlock { jacobian, noise: q })
}

/// `P_LL ← J̄ P_LL J̄ᵀ + blkdiag(Q, 0)` with `J̄ = blkdiag(J, I)`.
///
/// With an accumulator the cross covariance stays frozen and `T ← J̄ T`;
/// without one `P_LG ← J̄ P_LG` directly.
pub fn propagate_covariance(
    cov: &mut PartitionedCovariance,
    tb: &TransitionBlock,
    acc: Option<&mut CompressedAccumulator>,
) -> Result<()> {
    let dl = cov.ll.nrows();
    if dl < IMU_DIM || cov.ll.ncols() != dl {
        return Err(Error::DimensionMismatch(format!("P_LL is {dl}×{}", cov.ll.ncols())));
    }
    let j = DMatrix::from_column_slice(IMU_DIM, IMU_DIM, tb.jacobian.as_slice());
    let rows = &j * cov.ll.rows(0, IMU_DIM);
    cov.ll.rows_mut(0, IMU_DIM).copy_from(&rows);
    let cols = cov.ll.columns(0, IMU_DIM) * j.transpose();
    cov.ll.columns_mut(0, IMU_DIM).copy_from(&cols);
    for r in 0..IMU_DIM {
        for c in 0..IMU_DIM {
            cov.ll[(r, c)] += tb.noise[(r, c)];
        }
    }
    for r in 0..IMU_DIM {
        for c in (r + 1)..dl {
            let v = 0.5 * (cov.ll[(r, c)] + cov.ll[(c, r)]);
            cov.ll[(r, c)] = v;
            cov.ll[(c, r)] = v;
        }
    }
    match acc {
        Some(acc) => {
            if acc.t.nrows() != dl {
                return Err(Error::DimensionMismatch("accumulator rows".into()));
            }
            acc.left_multiply_leading(&j);
        }
        None => {
            if cov.lg.nrows() != dl {
                return Err(Error::DimensionMismatch("cross block rows".into()));
            }
            let rows = &j * cov.lg.rows(0, IMU_DIM);
            cov.lg.rows_mut(0, IMU_DIM).copy_from(&rows);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state::tests::{fixture, sample_imu};
    use crate::state::{is_symmetric_psd, repartition, Vec15};
    use crate::update::recover_global;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn stationary(att: UnitQuaternion) -> (ImuState, ImuSample) {
        let imu = ImuState {
            attitude: att,
            position: Vec3::new(1.0, 2.0, 3.0),
            ..Default::default()
        };
        // Specific force balancing gravity, in body axes.
        let accel = att.to_rotation_matrix() * (-GRAVITY);
        (imu, ImuSample { timestamp: 0.0, accel, gyro: Vec3::zeros() })
    }

    #[test]
    fn stationary_equilibrium() {
        let (imu, s) = stationary(UnitQuaternion::exp(&Vec3::new(0.2, -0.4, 1.0)));
        let mut x = imu;
        for _ in 0..100 {
            x = propagate_mean(&x, &s, 0.01, &GRAVITY).unwrap();
        }
        assert!(x.boxminus(&imu).amax() < 1e-12);
    }

    #[test]
    fn constant_yaw_rate_closed_form() {
        let wz = 0.7;
        let (imu, mut s) = stationary(UnitQuaternion::identity());
        s.gyro = Vec3::new(0.0, 0.0, wz);
        let mut x = imu;
        let n = 250;
        let dt = 0.01;
        for k in 0..n {
            // Attitude changes, so the gravity-cancelling specific force too.
            s.accel = x.attitude.to_rotation_matrix() * (-GRAVITY);
            let _ = k;
            x = propagate_mean(&x, &s, dt, &GRAVITY).unwrap();
        }
        let t = n as f64 * dt;
        // Body yawed by wz·t: q_IG = Exp(−wz t ẑ).
        let expected = UnitQuaternion::exp(&Vec3::new(0.0, 0.0, -wz * t));
        assert!(x.attitude.angle_to(&expected) <= 1e-9);
    }

    #[test]
    fn constant_acceleration_kinematics() {
        let a = Vec3::new(0.5, -0.2, 0.1);
        let att = UnitQuaternion::exp(&Vec3::new(0.1, 0.2, 0.3));
        let imu = ImuState {
            attitude: att,
            velocity: Vec3::new(3.0, 1.0, 0.0),
            ..Default::default()
        };
        let s = ImuSample {
            timestamp: 0.0,
            accel: att.to_rotation_matrix() * (a - GRAVITY),
            gyro: Vec3::zeros(),
        };
        let dt = 0.05;
        let x = propagate_mean(&imu, &s, dt, &GRAVITY).unwrap();
        assert!((x.velocity - (imu.velocity + a * dt)).amax() < 1e-13);
        let p = imu.velocity * dt + 0.5 * a * dt * dt;
        assert!((x.position - p).amax() < 1e-13);
    }

    #[test]
    fn non_positive_dt() {
        let (imu, s) = stationary(UnitQuaternion::identity());
        assert!(matches!(propagate_mean(&imu, &s, 0.0, &GRAVITY), Err(Error::NonPositiveDt(_))));
        assert!(matches!(
            compute_transition(&imu, &s, -1.0, &ImuNoiseParams::default()),
            Err(Error::NonPositiveDt(_))
        ));
    }

    #[test]
    fn zero_time_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let imu = sample_imu(&mut rng);
        let s = ImuSample { timestamp: 0.0, accel: Vec3::new(0.3, 9.0, 1.0), gyro: Vec3::new(0.5, -0.2, 1.0) };
        let tb = compute_transition(&imu, &s, 1e-8, &ImuNoiseParams::default()).unwrap();
        assert!((tb.jacobian - Mat15::identity()).amax() <= 1e-6);
        assert!(tb.noise.amax() < 1e-12);
        let tb = compute_transition(&imu, &s, 0.01, &ImuNoiseParams::zero()).unwrap();
        assert_eq!(tb.noise, Mat15::zeros());
    }

    /// Central finite differences of `propagate_mean` under boxplus
    /// perturbations; independent of the RK4 error-dynamics integration.
    pub(crate) fn finite_difference_jacobian(imu: &ImuState, s: &ImuSample, dt: f64) -> Mat15 {
        let eps = 1e-6;
        let nominal = propagate_mean(imu, s, dt, &GRAVITY).unwrap();
        let mut j = Mat15::zeros();
        for c in 0..15 {
            let mut d = Vec15::zeros();
            d[c] = eps;
            let plus = propagate_mean(&imu.boxplus(&d), s, dt, &GRAVITY).unwrap();
            let minus = propagate_mean(&imu.boxplus(&(-d)), s, dt, &GRAVITY).unwrap();
            let col = (plus.boxminus(&nominal) - minus.boxminus(&nominal)) / (2.0 * eps);
            j.set_column(c, &col);
        }
        j
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut worst = 0.0f64;
        for _ in 0..100 {
            let imu = sample_imu(&mut rng);
            let s = ImuSample {
                timestamp: 0.0,
                accel: Vec3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(5.0..15.0)),
                gyro: Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
            };
            let dt = rng.random_range(0.001..0.01);
            let tb = compute_transition(&imu, &s, dt, &ImuNoiseParams::default()).unwrap();
            let fd = finite_difference_jacobian(&imu, &s, dt);
            worst = worst.max((tb.jacobian - fd).amax());
        }
        assert!(worst <= 1e-5, "max abs error {worst:e}");
    }

    #[test]
    fn identity_transition_changes_nothing() {
        let (_, mut cov) = fixture(2, 2, 3);
        cov.lg = DMatrix::zeros(cov.ll.nrows(), 0);
        let c0 = cov.clone();
        let mut acc = CompressedAccumulator::new(cov.ll.nrows());
        propagate_covariance(&mut cov, &TransitionBlock::identity(), Some(&mut acc)).unwrap();
        assert_eq!(cov, c0);
        assert!(acc.is_reset());
    }

    fn random_transition(rng: &mut impl Rng) -> TransitionBlock {
        let imu = sample_imu(rng);
        let s = ImuSample {
            timestamp: 0.0,
            accel: Vec3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), 9.8),
            gyro: Vec3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)),
        };
        compute_transition(&imu, &s, 0.01, &ImuNoiseParams::default()).unwrap()
    }

    fn global_fixture(seed: u64) -> (crate::state::StateVector, PartitionedCovariance) {
        let (mut state, mut cov) = fixture(3, 3, seed);
        let center = state.keyframes.iter().next().unwrap().pose.position;
        repartition(&mut state, &mut cov, None, center, 1e-3).unwrap();
        assert_eq!(state.keyframes.global_count(), 2);
        (state, cov)
    }

    #[test]
    fn compressed_step_matches_dense_propagation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (mut state, cov0) = global_fixture(4);
        let tb = random_transition(&mut rng);

        let mut cov = cov0.clone();
        let mut acc = CompressedAccumulator::new(state.local_dim());
        let (lg0, gg0) = (cov.lg.clone(), cov.gg.clone());
        propagate_covariance(&mut cov, &tb, Some(&mut acc)).unwrap();
        assert_eq!(cov.lg, lg0);
        assert_eq!(cov.gg, gg0);
        recover_global(&mut state, &mut cov, &mut acc).unwrap();

        // Oracle: J̄_full P J̄_fullᵀ + Q_full on the assembled matrix.
        let d = cov0.dim();
        let mut jf = DMatrix::identity(d, d);
        let mut qf = DMatrix::zeros(d, d);
        for r in 0..15 {
            for c in 0..15 {
                jf[(r, c)] = tb.jacobian[(r, c)];
                qf[(r, c)] = tb.noise[(r, c)];
            }
        }
        let dense = &jf * cov0.full() * jf.transpose() + qf;
        assert!((cov.full() - dense).amax() <= 1e-12);
    }

    #[test]
    fn accumulated_transform_is_ordered_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (_, mut cov) = global_fixture(5);
        let dl = cov.ll.nrows();
        let mut acc = CompressedAccumulator::new(dl);
        let mut product = DMatrix::identity(dl, dl);
        for _ in 0..100 {
            let tb = random_transition(&mut rng);
            propagate_covariance(&mut cov, &tb, Some(&mut acc)).unwrap();
            let mut jbar = DMatrix::identity(dl, dl);
            for r in 0..15 {
                for c in 0..15 {
                    jbar[(r, c)] = tb.jacobian[(r, c)];
                }
            }
            product = jbar * product;
            assert!(is_symmetric_psd(&cov.ll));
        }
        assert!((&acc.t - &product).amax() <= 1e-10 * product.amax());
    }

    #[test]
    fn dimension_mismatch() {
        let mut cov = PartitionedCovariance::new(
            DMatrix::identity(6, 6),
            DMatrix::zeros(6, 0),
            DMatrix::zeros(0, 0),
        );
        assert!(matches!(
            propagate_covariance(&mut cov, &TransitionBlock::identity(), None),
            Err(Error::DimensionMismatch(_))
        ));
    }
}
