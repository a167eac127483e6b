//! Visual residuals: the structureless epipolar constraint and the
//! structure-based inverse-depth reprojection, plus the Huber kernel used to
//! robustify both.
//!
//! The epipolar residual couples two poses through the coplanarity of the
//! two bearing vectors with the camera-to-camera translation; no landmark
//! state appears. All direction vectors are expressed in the global frame
//! and the translation is normalized, which also makes the residual
//! invariant to global position scaling.

use nalgebra::{SMatrix, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imu::{ImuState, IDX_P, IDX_TH, STATE_DIM};
use crate::manifold::{skew, Mat3, UnitQuat, Vec3};

/// Camera-IMU extrinsics: rotation camera-to-IMU and lever arm in the IMU
/// frame.
#[derive(Debug, Clone, Copy)]
pub struct Extrinsics {
    pub r_ic: UnitQuat,
    pub p_ic: Vec3,
}

impl Extrinsics {
    pub fn identity() -> Self {
        Extrinsics {
            r_ic: UnitQuat::identity(),
            p_ic: Vec3::zeros(),
        }
    }
}

/// Field-of-view sanity bound on normalized image coordinates.
const BEARING_BOUND: f64 = 5.0;

/// Predicted depths at or below this are cheirality violations.
pub const MIN_DEPTH: f64 = 1e-2;

/// Inverse-depth clamp range, 1/m.
pub const INV_DEPTH_MIN: f64 = 1e-3;
pub const INV_DEPTH_MAX: f64 = 20.0;

/// Fallback feature depth when triangulation is not possible, m.
pub const DEFAULT_DEPTH: f64 = 5.0;

/// A normalized-coordinate feature observation; third component is 1 by
/// construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bearing {
    x: f64,
    y: f64,
}

impl Bearing {
    pub fn new(x: f64, y: f64) -> Result<Self> {
        if !(x.is_finite() && y.is_finite())
            || x.abs() >= BEARING_BOUND
            || y.abs() >= BEARING_BOUND
        {
            return Err(Error::BearingOutOfRange(x, y));
        }
        Ok(Bearing { x, y })
    }

    pub fn x(&self) -> f64 {
        self.x
    }

    pub fn y(&self) -> f64 {
        self.y
    }

    pub fn vec(&self) -> Vec3 {
        Vec3::new(self.x, self.y, 1.0)
    }
}

/// One feature's observations across keyframes, ordered by keyframe index.
/// The inverse depth is populated in structure-based mode only.
#[derive(Debug, Clone)]
pub struct FeatureTrack {
    pub feature_id: u64,
    pub obs: Vec<(usize, Bearing)>,
    pub inv_depth: Option<f64>,
}

impl FeatureTrack {
    pub fn new(feature_id: u64) -> Self {
        FeatureTrack {
            feature_id,
            obs: Vec::new(),
            inv_depth: None,
        }
    }

    /// Append an observation; keyframe indices must be strictly increasing.
    pub fn push(&mut self, keyframe: usize, bearing: Bearing) -> Result<()> {
        if let Some(&(last, _)) = self.obs.last() {
            if keyframe <= last {
                return Err(Error::DuplicateObservation {
                    feature: self.feature_id,
                    frame: keyframe as u64,
                });
            }
        }
        self.obs.push((keyframe, bearing));
        Ok(())
    }

    pub fn bearing_at(&self, keyframe: usize) -> Option<&Bearing> {
        self.obs
            .iter()
            .find(|(k, _)| *k == keyframe)
            .map(|(_, b)| b)
    }
}

/// How keyframe pairs are drawn from a co-view set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairPolicy {
    /// First observing keyframe paired with each later one.
    Anchor,
    /// Every ordered pair (i, j), i < j.
    AllPairs,
}

/// Pairs of keyframe indices over which epipolar factors are built.
/// Singleton tracks yield no pairs.
pub fn epipolar_pairs(track: &FeatureTrack, policy: PairPolicy) -> Vec<(usize, usize)> {
    let ks: Vec<usize> = track.obs.iter().map(|(k, _)| *k).collect();
    match policy {
        PairPolicy::Anchor => match ks.split_first() {
            Some((&anchor, rest)) => rest.iter().map(|&j| (anchor, j)).collect(),
            None => Vec::new(),
        },
        PairPolicy::AllPairs => {
            let mut pairs = Vec::new();
            for a in 0..ks.len() {
                for b in (a + 1)..ks.len() {
                    pairs.push((ks[a], ks[b]));
                }
            }
            pairs
        }
    }
}

/// Huber kernel parameters: threshold on the whitened residual norm.
#[derive(Debug, Clone, Copy)]
pub struct HuberParams {
    pub delta: f64,
}

impl Default for HuberParams {
    fn default() -> Self {
        HuberParams { delta: 1.0 }
    }
}

/// Robust cost and IRLS weight for a squared whitened residual norm.
///
/// With `s = sqrt(input)`: inside the knee the cost is s² with unit weight;
/// outside it is `2δs − δ²` and the weight `δ/s` is applied to both the
/// Jacobian and the residual.
pub fn huber_weight(squared_whitened_norm: f64, params: &HuberParams) -> (f64, f64) {
    let s = squared_whitened_norm.sqrt();
    if s <= params.delta {
        (squared_whitened_norm, 1.0)
    } else {
        (2.0 * params.delta * s - params.delta * params.delta, params.delta / s)
    }
}

/// Global camera center of a state through the extrinsic chain.
pub fn camera_center(x: &ImuState, ext: &Extrinsics) -> Vec3 {
    x.p + x.q.rotate(&ext.p_ic)
}

/// Camera-to-global rotation of a state.
pub fn camera_rotation(x: &ImuState, ext: &Extrinsics) -> Mat3 {
    x.q.rotation_matrix() * ext.r_ic.rotation_matrix()
}

/// Epipolar residual and its Jacobians.
#[derive(Debug, Clone)]
pub struct EpipolarEval {
    pub r: f64,
    /// Rows over the 15-dof tangents; velocity and bias columns are exactly
    /// zero.
    pub j_i: SMatrix<f64, 1, STATE_DIM>,
    pub j_j: SMatrix<f64, 1, STATE_DIM>,
}

/// Scalar triple-product epipolar residual for one co-view pair, with
/// analytic Jacobians. Returns `None` when the camera baseline is below
/// `baseline_gate` (degenerate epipolar geometry; the factor must be
/// dropped, not evaluated).
pub fn epipolar_residual(
    xi: &ImuState,
    xj: &ImuState,
    ext: &Extrinsics,
    zi: &Vec3,
    zj: &Vec3,
    baseline_gate: f64,
) -> Option<EpipolarEval> {
    let r_i = xi.q.rotation_matrix();
    let r_j = xj.q.rotation_matrix();
    let r_ic = ext.r_ic.rotation_matrix();

    let fi = r_i * (r_ic * zi);
    let fj = r_j * (r_ic * zj);

    let t = (xi.p + r_i * ext.p_ic) - (xj.p + r_j * ext.p_ic);
    let t_norm = t.norm();
    if t_norm < baseline_gate {
        return None;
    }
    let u = t / t_norm;

    let cross = fi.cross(&fj);
    let r = u.dot(&cross);

    // projector of the normalization: d(t/‖t‖)/dt
    let proj = (Mat3::identity() - u * u.transpose()) / t_norm;
    let d_u = (proj * cross).transpose(); // 1x3 row: ∂r/∂t
    let g_i = (-u.cross(&fj)).transpose(); // ∂r/∂f_i
    let g_j = u.cross(&fi).transpose(); // ∂r/∂f_j

    let dt_dth_i = -r_i * skew(&ext.p_ic);
    let dt_dth_j = r_j * skew(&ext.p_ic);
    let dfi_dth_i = -r_i * skew(&(r_ic * zi));
    let dfj_dth_j = -r_j * skew(&(r_ic * zj));

    let mut j_i = SMatrix::<f64, 1, STATE_DIM>::zeros();
    let mut j_j = SMatrix::<f64, 1, STATE_DIM>::zeros();
    j_i.fixed_view_mut::<1, 3>(0, IDX_P).copy_from(&d_u);
    j_i.fixed_view_mut::<1, 3>(0, IDX_TH)
        .copy_from(&(d_u * dt_dth_i + g_i * dfi_dth_i));
    j_j.fixed_view_mut::<1, 3>(0, IDX_P).copy_from(&(-d_u));
    j_j.fixed_view_mut::<1, 3>(0, IDX_TH)
        .copy_from(&(d_u * dt_dth_j + g_j * dfj_dth_j));

    Some(EpipolarEval { r, j_i, j_j })
}

/// Residual-only fast path for cost evaluation.
pub fn epipolar_residual_only(
    xi: &ImuState,
    xj: &ImuState,
    ext: &Extrinsics,
    zi: &Vec3,
    zj: &Vec3,
    baseline_gate: f64,
) -> Option<f64> {
    let r_i = xi.q.rotation_matrix();
    let r_j = xj.q.rotation_matrix();
    let r_ic = ext.r_ic.rotation_matrix();
    let t = (xi.p + r_i * ext.p_ic) - (xj.p + r_j * ext.p_ic);
    let t_norm = t.norm();
    if t_norm < baseline_gate {
        return None;
    }
    let fi = r_i * (r_ic * zi);
    let fj = r_j * (r_ic * zj);
    Some((t / t_norm).dot(&fi.cross(&fj)))
}

/// Reprojection residual and its Jacobians.
#[derive(Debug, Clone)]
pub struct ReprojEval {
    /// Observed minus predicted normalized coordinates.
    pub r: Vector2<f64>,
    pub j_i: SMatrix<f64, 2, STATE_DIM>,
    pub j_j: SMatrix<f64, 2, STATE_DIM>,
    pub j_lambda: Vector2<f64>,
    /// Predicted depth in the target camera, m.
    pub depth: f64,
}

/// Inverse-depth reprojection residual: the feature is back-projected from
/// anchor frame `i` at depth `1/lambda`, pushed through the IMU/extrinsic
/// chain into frame `j`, and reprojected.
pub fn reprojection_residual(
    xi: &ImuState,
    xj: &ImuState,
    ext: &Extrinsics,
    zi: &Bearing,
    zj: &Bearing,
    lambda: f64,
) -> Result<ReprojEval> {
    let r_i = xi.q.rotation_matrix();
    let r_j = xj.q.rotation_matrix();
    let r_ic = ext.r_ic.rotation_matrix();
    let r_ic_t = r_ic.transpose();
    let r_j_t = r_j.transpose();

    let p_ci = zi.vec() / lambda;
    let p_ii = r_ic * p_ci + ext.p_ic;
    let p_w = r_i * p_ii + xi.p;
    let p_ij = r_j_t * (p_w - xj.p);
    let p_cj = r_ic_t * (p_ij - ext.p_ic);

    let depth = p_cj.z;
    if depth <= MIN_DEPTH {
        return Err(Error::Cheirality(depth));
    }

    let pred = Vector2::new(p_cj.x / depth, p_cj.y / depth);
    let r = Vector2::new(zj.x() - pred.x, zj.y() - pred.y);

    // ∂(observed − predicted)/∂P_cj
    let inv_z = 1.0 / depth;
    let d_proj = -SMatrix::<f64, 2, 3>::new(
        inv_z,
        0.0,
        -p_cj.x * inv_z * inv_z,
        0.0,
        inv_z,
        -p_cj.y * inv_z * inv_z,
    );

    let d_pw = r_ic_t * r_j_t; // ∂P_cj/∂P_w

    let mut j_i = SMatrix::<f64, 2, STATE_DIM>::zeros();
    let mut j_j = SMatrix::<f64, 2, STATE_DIM>::zeros();
    j_i.fixed_view_mut::<2, 3>(0, IDX_P)
        .copy_from(&(d_proj * d_pw));
    j_i.fixed_view_mut::<2, 3>(0, IDX_TH)
        .copy_from(&(d_proj * d_pw * (-r_i * skew(&p_ii))));
    j_j.fixed_view_mut::<2, 3>(0, IDX_P)
        .copy_from(&(-(d_proj * d_pw)));
    j_j.fixed_view_mut::<2, 3>(0, IDX_TH)
        .copy_from(&(d_proj * r_ic_t * skew(&p_ij)));

    let d_lambda = d_pw * r_i * r_ic * (-zi.vec() / (lambda * lambda));
    let j_lambda = d_proj * d_lambda;

    Ok(ReprojEval {
        r,
        j_i,
        j_j,
        j_lambda,
        depth,
    })
}

/// Two-view midpoint triangulation, returning the clamped inverse depth in
/// the anchor camera frame, or `None` for degenerate geometry.
pub fn triangulate_inv_depth(
    xi: &ImuState,
    xj: &ImuState,
    ext: &Extrinsics,
    zi: &Bearing,
    zj: &Bearing,
) -> Option<f64> {
    let rc_i = camera_rotation(xi, ext);
    let rc_j = camera_rotation(xj, ext);
    let ci = camera_center(xi, ext);
    let cj = camera_center(xj, ext);

    let di = (rc_i * zi.vec()).normalize();
    let dj = (rc_j * zj.vec()).normalize();
    let b = cj - ci;

    // closest points on the two rays: parameters from the 2x2 normal system
    let d = di.dot(&dj);
    let denom = 1.0 - d * d;
    if denom < 1e-12 {
        return None;
    }
    let s = (di.dot(&b) - d * dj.dot(&b)) / denom;
    let t = (d * di.dot(&b) - dj.dot(&b)) / denom;
    if s <= 0.0 {
        return None;
    }
    let midpoint = 0.5 * ((ci + s * di) + (cj + t * dj));

    let depth = (rc_i.transpose() * (midpoint - ci)).z;
    if depth <= MIN_DEPTH {
        return None;
    }
    Some((1.0 / depth).clamp(INV_DEPTH_MIN, INV_DEPTH_MAX))
}
