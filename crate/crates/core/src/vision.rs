//! Camera measurement model and feature marginalization.
//!
//! A track's stacked residual `r = H_x x̃ + H_f p̃_f + n` is projected onto
//! the left nullspace of `H_f`, leaving a block that constrains only the
//! observing pose states. Keyframe constraints use the same pipeline with at
//! least one observation anchored on a keyframe.

use nalgebra::{DMatrix, DVector, Matrix2x3, Vector2, QR};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::geom::{skew, Mat3, Pose, Vec3};
use crate::state::{FrameRef, Partition, StateVector, POSE_DIM};

pub type Vec2 = Vector2<f64>;

/// Minimum subtended angle for triangulation, degrees.
pub const MIN_PARALLAX_DEG: f64 = 1.0;
const GN_MAX_ITERS: usize = 10;
const GN_STEP_TOL: f64 = 1e-6;
/// Relative threshold on the `R` diagonal of the `H_f` QR factor.
const RANK_TOL: f64 = 1e-9;

/// Pinhole camera rigidly mounted on the IMU.
///
/// `extrinsics.orientation` is `q_CI` (body to camera) and
/// `extrinsics.position` is the camera origin in the body frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PinholeCamera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub extrinsics: Pose,
    pub width: u32,
    pub height: u32,
}

impl PinholeCamera {
    pub fn validate(&self) -> Result<()> {
        let inside = self.cx > 0.0
            && self.cy > 0.0
            && self.cx < self.width as f64
            && self.cy < self.height as f64;
        if self.fx > 0.0 && self.fy > 0.0 && inside {
            Ok(())
        } else {
            Err(Error::ConfigError("camera focal length or principal point invalid".into()))
        }
    }

    /// Point in the camera frame seen from an IMU pose.
    pub fn to_camera(&self, pose: &Pose, p_f: &Vec3) -> Vec3 {
        let r_ig = pose.orientation.to_rotation_matrix();
        let r_ci = self.extrinsics.orientation.to_rotation_matrix();
        r_ci * (r_ig * (p_f - pose.position) - self.extrinsics.position)
    }

    /// Pixel of a camera-frame point; `None` at or behind the image plane.
    pub fn project_camera(&self, p_c: &Vec3) -> Option<Vec2> {
        if p_c.z <= 0.0 {
            return None;
        }
        Some(Vec2::new(
            self.fx * p_c.x / p_c.z + self.cx,
            self.fy * p_c.y / p_c.z + self.cy,
        ))
    }

    pub fn project(&self, pose: &Pose, p_f: &Vec3) -> Option<Vec2> {
        self.project_camera(&self.to_camera(pose, p_f))
    }

    pub fn in_image(&self, px: &Vec2) -> bool {
        px.x >= 0.0 && px.y >= 0.0 && px.x < self.width as f64 && px.y < self.height as f64
    }

    /// `∂pixel/∂p_C`.
    fn projection_jacobian(&self, p_c: &Vec3) -> Matrix2x3<f64> {
        let iz = 1.0 / p_c.z;
        Matrix2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * p_c.x * iz * iz,
            0.0,
            self.fy * iz,
            -self.fy * p_c.y * iz * iz,
        )
    }

    /// Camera center and global-frame bearing of a pixel.
    fn ray(&self, pose: &Pose, px: &Vec2) -> (Vec3, Vec3) {
        let r_gi = pose.orientation.to_rotation_matrix().transpose();
        let r_ic = self.extrinsics.orientation.to_rotation_matrix().transpose();
        let b = Vec3::new((px.x - self.cx) / self.fx, (px.y - self.cy) / self.fy, 1.0);
        let center = pose.position + r_gi * self.extrinsics.position;
        (center, (r_gi * r_ic * b).normalize())
    }
}

impl Default for PinholeCamera {
    /// Forward-looking 640×480 camera, 90° horizontal field of view.
    fn default() -> Self {
        // Camera z along body x, camera x along −body y, camera y along −body z.
        let r_ci = Mat3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0);
        Self {
            fx: 320.0,
            fy: 320.0,
            cx: 320.0,
            cy: 240.0,
            extrinsics: Pose::new(
                crate::geom::UnitQuaternion::from_rotation_matrix(&r_ci),
                Vec3::new(0.1, 0.0, 0.05),
            ),
            width: 640,
            height: 480,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTrack {
    pub feature_id: u64,
    pub observations: Vec<(FrameRef, Vec2)>,
    pub pixel_sigma: f64,
}

impl FeatureTrack {
    pub fn new(feature_id: u64, pixel_sigma: f64) -> Self {
        Self {
            feature_id,
            observations: Vec::new(),
            pixel_sigma,
        }
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    fn poses(&self, state: &StateVector) -> Result<Vec<Pose>> {
        self.observations
            .iter()
            .map(|(f, _)| state.pose_of(*f).ok_or_else(|| Error::UnknownFrameRef(f.to_string())))
            .collect()
    }
}

/// Measurement rows over the local error state, `r ≈ H x̃_L + n`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearizedBlock {
    pub h: DMatrix<f64>,
    pub residual: DVector<f64>,
    pub noise: DMatrix<f64>,
}

impl LinearizedBlock {
    pub fn empty(cols: usize) -> Self {
        Self {
            h: DMatrix::zeros(0, cols),
            residual: DVector::zeros(0),
            noise: DMatrix::zeros(0, 0),
        }
    }

    pub fn rows(&self) -> usize {
        self.h.nrows()
    }

    /// True when every column at or beyond `local_dim` is exactly zero.
    pub fn is_local(&self, local_dim: usize) -> bool {
        self.h.ncols() <= local_dim
            || self.h.columns(local_dim, self.h.ncols() - local_dim).iter().all(|&v| v == 0.0)
    }

    /// Vertical concatenation with block-diagonal noise.
    pub fn stack(blocks: &[LinearizedBlock]) -> Result<LinearizedBlock> {
        let Some(first) = blocks.first() else {
            return Err(Error::DimensionMismatch("nothing to stack".into()));
        };
        let cols = first.h.ncols();
        if blocks.iter().any(|b| b.h.ncols() != cols) {
            return Err(Error::DimensionMismatch("stacked blocks differ in width".into()));
        }
        let m: usize = blocks.iter().map(|b| b.rows()).sum();
        let mut out = LinearizedBlock {
            h: DMatrix::zeros(m, cols),
            residual: DVector::zeros(m),
            noise: DMatrix::zeros(m, m),
        };
        let mut r = 0;
        for b in blocks {
            let k = b.rows();
            out.h.rows_mut(r, k).copy_from(&b.h);
            out.residual.rows_mut(r, k).copy_from(&b.residual);
            out.noise.view_mut((r, r), (k, k)).copy_from(&b.noise);
            r += k;
        }
        Ok(out)
    }
}

/// Largest angle, degrees, between any two observation rays.
pub fn parallax_deg(track: &FeatureTrack, state: &StateVector, camera: &PinholeCamera) -> Result<f64> {
    let poses = track.poses(state)?;
    let rays: Vec<Vec3> = poses
        .iter()
        .zip(&track.observations)
        .map(|(pose, (_, px))| camera.ray(pose, px).1)
        .collect();
    let mut best = 0.0f64;
    for i in 0..rays.len() {
        for j in (i + 1)..rays.len() {
            let c = rays[i].dot(&rays[j]).clamp(-1.0, 1.0);
            best = best.max(c.acos());
        }
    }
    Ok(best.to_degrees())
}

fn reprojection(
    camera: &PinholeCamera,
    poses: &[Pose],
    obs: &[(FrameRef, Vec2)],
    p_f: &Vec3,
) -> Option<(DVector<f64>, DMatrix<f64>)> {
    let m = 2 * poses.len();
    let mut r = DVector::zeros(m);
    let mut j = DMatrix::zeros(m, 3);
    let r_ci = camera.extrinsics.orientation.to_rotation_matrix();
    for (i, (pose, (_, z))) in poses.iter().zip(obs).enumerate() {
        let p_c = camera.to_camera(pose, p_f);
        let px = camera.project_camera(&p_c)?;
        r.fixed_rows_mut::<2>(2 * i).copy_from(&(z - px));
        let jf = camera.projection_jacobian(&p_c) * r_ci * pose.orientation.to_rotation_matrix();
        j.fixed_view_mut::<2, 3>(2 * i, 0).copy_from(&jf);
    }
    Some((r, j))
}

/// Feature position from its observations: midpoint least squares over the
/// rays, refined by Gauss–Newton on reprojection error.
pub fn triangulate(track: &FeatureTrack, state: &StateVector, camera: &PinholeCamera) -> Result<Vec3> {
    if track.len() < 2 {
        return Err(Error::LowParallax(0.0));
    }
    let parallax = parallax_deg(track, state, camera)?;
    if parallax < MIN_PARALLAX_DEG {
        return Err(Error::LowParallax(parallax));
    }
    let poses = track.poses(state)?;

    let mut a = Mat3::zeros();
    let mut b = Vec3::zeros();
    for (pose, (_, px)) in poses.iter().zip(&track.observations) {
        let (c, d) = camera.ray(pose, px);
        let proj = Mat3::identity() - d * d.transpose();
        a += proj;
        b += proj * c;
    }
    let mut p = a.cholesky().ok_or(Error::LowParallax(parallax))?.solve(&b);

    let cost = |p: &Vec3| reprojection(camera, &poses, &track.observations, p).map(|(r, _)| r.norm_squared());
    let mut prev = cost(&p).ok_or(Error::BehindCamera)?;
    let mut growth = 0;
    for _ in 0..GN_MAX_ITERS {
        let (r, j) = reprojection(camera, &poses, &track.observations, &p).ok_or(Error::BehindCamera)?;
        let jtj = j.transpose() * &j;
        let step = jtj
            .cholesky()
            .ok_or(Error::Diverged)?
            .solve(&(j.transpose() * r));
        let step = Vec3::new(step[0], step[1], step[2]);
        p += step;
        if !p.iter().all(|v| v.is_finite()) {
            return Err(Error::Diverged);
        }
        let c = cost(&p).ok_or(Error::BehindCamera)?;
        growth = if c > prev { growth + 1 } else { 0 };
        if growth >= 3 {
            return Err(Error::Diverged);
        }
        prev = c;
        if step.norm() < GN_STEP_TOL {
            break;
        }
    }
    if poses.iter().any(|pose| camera.to_camera(pose, &p).z <= 0.0) {
        return Err(Error::BehindCamera);
    }
    Ok(p)
}

/// Stacked Jacobians and residual `z − h(x̂, p̂_f)`.
///
/// `H_x` spans the full error state (`state.dim()` columns) with non-zeros
/// only on observing pose blocks.
pub fn build_feature_jacobians(
    track: &FeatureTrack,
    state: &StateVector,
    camera: &PinholeCamera,
    p_f: &Vec3,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DVector<f64>)> {
    let m = 2 * track.len();
    let mut hx = DMatrix::zeros(m, state.dim());
    let mut hf = DMatrix::zeros(m, 3);
    let mut r = DVector::zeros(m);
    let r_ci = camera.extrinsics.orientation.to_rotation_matrix();
    for (i, (frame, z)) in track.observations.iter().enumerate() {
        let unknown = || Error::UnknownFrameRef(frame.to_string());
        let pose = state.pose_of(*frame).ok_or_else(unknown)?;
        let o = state.offset_of(*frame).ok_or_else(unknown)?;
        let r_ig = pose.orientation.to_rotation_matrix();
        let p_c = camera.to_camera(&pose, p_f);
        let px = camera.project_camera(&p_c).ok_or(Error::BehindCamera)?;
        let jp = camera.projection_jacobian(&p_c) * r_ci;
        let d_theta = jp * (-skew(&(r_ig * (p_f - pose.position))));
        let d_pos = jp * (-r_ig);
        let d_f = jp * r_ig;
        hx.fixed_view_mut::<2, 3>(2 * i, o).copy_from(&d_theta);
        hx.fixed_view_mut::<2, 3>(2 * i, o + 3).copy_from(&d_pos);
        hf.fixed_view_mut::<2, 3>(2 * i, 0).copy_from(&d_f);
        r.fixed_rows_mut::<2>(2 * i).copy_from(&(z - px));
    }
    Ok((hx, hf, r))
}

/// Orthonormal basis `N` (m × (m−3)) of the left nullspace of `H_f`, from the
/// trailing columns of the full Householder `Q`.
pub fn left_nullspace(h_f: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let m = h_f.nrows();
    if m <= 3 || h_f.ncols() != 3 {
        return Err(Error::RankDeficientFeature);
    }
    let qr = QR::new(h_f.clone());
    let diag = qr.r().diagonal().map(f64::abs);
    if diag.min() <= RANK_TOL * diag.max().max(f64::MIN_POSITIVE) {
        return Err(Error::RankDeficientFeature);
    }
    let mut qt = DMatrix::identity(m, m);
    qr.q_tr_mul(&mut qt);
    Ok(qt.rows(3, m - 3).transpose())
}

/// `Nᵀ` applied to the stacked model, feature error eliminated.
pub fn nullspace_project(
    h_x: &DMatrix<f64>,
    h_f: &DMatrix<f64>,
    residual: &DVector<f64>,
    r_f: &DMatrix<f64>,
) -> Result<LinearizedBlock> {
    let n = left_nullspace(h_f)?;
    let nt = n.transpose();
    let mut noise = &nt * r_f * &n;
    crate::state::symmetrize(&mut noise);
    Ok(LinearizedBlock {
        h: &nt * h_x,
        residual: &nt * residual,
        noise,
    })
}

/// χ² threshold at 95% for `dof` degrees of freedom.
pub fn chi2_threshold(dof: usize) -> f64 {
    ChiSquared::new(dof as f64)
        .expect("positive degrees of freedom")
        .inverse_cdf(0.95)
}

/// Mahalanobis test of the innovation against `H P_LL Hᵀ + R'`.
pub fn chi2_gate(block: &LinearizedBlock, p_ll: &DMatrix<f64>) -> bool {
    let m = block.rows();
    if m == 0 {
        return true;
    }
    let dl = p_ll.nrows().min(block.h.ncols());
    let h = block.h.columns(0, dl);
    let s = &h * p_ll.view((0, 0), (dl, dl)) * h.transpose() + &block.noise;
    match s.cholesky() {
        Some(c) => block.residual.dot(&c.solve(&block.residual)) <= chi2_threshold(m),
        None => false,
    }
}

/// Result of linearizing one track.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureUpdate {
    pub feature_id: u64,
    pub position: Vec3,
    /// Rows over the local error state.
    pub block: LinearizedBlock,
    /// `‖Nᵀ H_f‖∞` of the projection used.
    pub nullspace_error: f64,
}

/// Full pipeline for one track: triangulate, linearize, project, restrict
/// to the local columns.
pub fn linearize_track(
    track: &FeatureTrack,
    state: &StateVector,
    camera: &PinholeCamera,
) -> Result<FeatureUpdate> {
    for (frame, _) in &track.observations {
        match state.partition_of(*frame) {
            None => return Err(Error::UnknownFrameRef(frame.to_string())),
            Some(Partition::Global) => {
                let FrameRef::Keyframe(id) = frame else { unreachable!() };
                return Err(Error::GlobalKeyframeTouched(*id));
            }
            Some(Partition::Local) => {}
        }
    }
    let p_f = triangulate(track, state, camera)?;
    let (hx, hf, r) = build_feature_jacobians(track, state, camera, &p_f)?;
    let n = left_nullspace(&hf)?;
    let nt = n.transpose();
    let m = r.len();
    let sigma2 = track.pixel_sigma * track.pixel_sigma;
    let dl = state.local_dim();
    let block = LinearizedBlock {
        h: (&nt * hx.columns(0, dl)),
        residual: &nt * r,
        noise: DMatrix::identity(m - 3, m - 3) * sigma2,
    };
    Ok(FeatureUpdate {
        feature_id: track.feature_id,
        position: p_f,
        block,
        nullspace_error: (&nt * hf).amax(),
    })
}

/// Constraint between current clones and keyframes sharing a landmark.
///
/// Returns `Ok(None)` when the track lacks either a keyframe or a clone
/// observation.
pub fn build_keyframe_constraint(
    track: &FeatureTrack,
    state: &StateVector,
    camera: &PinholeCamera,
) -> Result<Option<FeatureUpdate>> {
    let has_kf = track.observations.iter().any(|(f, _)| matches!(f, FrameRef::Keyframe(_)));
    let has_clone = track.observations.iter().any(|(f, _)| matches!(f, FrameRef::Clone(_)));
    if !(has_kf && has_clone) {
        return Ok(None);
    }
    linearize_track(track, state, camera).map(Some)
}

/// Number of pose blocks a track touches.
pub fn touched_blocks(block: &LinearizedBlock) -> usize {
    (0..block.h.ncols() / POSE_DIM)
        .filter(|b| block.h.columns(b * POSE_DIM, POSE_DIM).iter().any(|&v| v != 0.0))
        .count()
}
