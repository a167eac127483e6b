//! IMU preintegration between consecutive keyframes.
//!
//! Gyro/accel samples are integrated with the midpoint rule into a relative
//! motion delta (alpha, beta, gamma) that is independent of the global start
//! state; gravity enters only the residual. The 15x15 covariance and the
//! first-order bias Jacobians are propagated in lockstep with the delta.
//!
//! Tangent ordering, fixed once and used by every Jacobian and the solver:
//! `[δp, δθ, δv, δba, δbg]`.

use nalgebra::{SMatrix, SVector};

use crate::error::{Error, Result};
use crate::manifold::{boxminus, skew, so3_exp, so3_log, Mat3, UnitQuat, Vec3};

/// Block offsets inside the 15-dof state tangent.
pub const IDX_P: usize = 0;
pub const IDX_TH: usize = 3;
pub const IDX_V: usize = 6;
pub const IDX_BA: usize = 9;
pub const IDX_BG: usize = 12;
pub const STATE_DIM: usize = 15;

/// Bias excursions beyond these call for repropagation instead of the
/// first-order correction.
pub const REPROP_THRESHOLD_BG: f64 = 1e-2;
pub const REPROP_THRESHOLD_BA: f64 = 1e-1;

pub type StateVec = SVector<f64, STATE_DIM>;
pub type StateMat = SMatrix<f64, STATE_DIM, STATE_DIM>;

/// One raw IMU sample: body-frame angular rate and specific force.
#[derive(Debug, Clone, Copy)]
pub struct ImuSample {
    /// Timestamp, seconds.
    pub t: f64,
    /// Angular rate, rad/s.
    pub gyro: Vec3,
    /// Specific force, m/s².
    pub accel: Vec3,
}

/// Full IMU state at a keyframe: pose, velocity, and both biases.
#[derive(Debug, Clone, Copy)]
pub struct ImuState {
    /// Position in the global frame, m.
    pub p: Vec3,
    /// Velocity in the global frame, m/s.
    pub v: Vec3,
    /// Body-to-global orientation.
    pub q: UnitQuat,
    /// Accelerometer bias, m/s².
    pub ba: Vec3,
    /// Gyroscope bias, rad/s.
    pub bg: Vec3,
}

impl ImuState {
    pub fn at_rest() -> Self {
        ImuState {
            p: Vec3::zeros(),
            v: Vec3::zeros(),
            q: UnitQuat::identity(),
            ba: Vec3::zeros(),
            bg: Vec3::zeros(),
        }
    }

    /// Sanity bounds on the bias estimates; exceeding them is treated as
    /// solver divergence by the estimator.
    pub fn biases_sane(&self, max_ba: f64, max_bg: f64) -> bool {
        self.ba.norm() < max_ba && self.bg.norm() < max_bg
    }

    /// Apply a 15-dof tangent increment (boxplus on orientation, additive
    /// elsewhere).
    pub fn retract(&self, dx: &StateVec) -> ImuState {
        ImuState {
            p: self.p + dx.fixed_rows::<3>(IDX_P).into_owned(),
            q: crate::manifold::boxplus(&self.q, &dx.fixed_rows::<3>(IDX_TH).into_owned()),
            v: self.v + dx.fixed_rows::<3>(IDX_V).into_owned(),
            ba: self.ba + dx.fixed_rows::<3>(IDX_BA).into_owned(),
            bg: self.bg + dx.fixed_rows::<3>(IDX_BG).into_owned(),
        }
    }

    /// Tangent difference `self ⊟ other` in the fixed ordering.
    pub fn local_diff(&self, other: &ImuState) -> StateVec {
        let mut d = StateVec::zeros();
        d.fixed_rows_mut::<3>(IDX_P).copy_from(&(self.p - other.p));
        d.fixed_rows_mut::<3>(IDX_TH)
            .copy_from(&boxminus(&self.q, &other.q));
        d.fixed_rows_mut::<3>(IDX_V).copy_from(&(self.v - other.v));
        d.fixed_rows_mut::<3>(IDX_BA)
            .copy_from(&(self.ba - other.ba));
        d.fixed_rows_mut::<3>(IDX_BG)
            .copy_from(&(self.bg - other.bg));
        d
    }
}

/// Continuous-time IMU noise densities plus the known gravity vector.
#[derive(Debug, Clone, Copy)]
pub struct NoiseParams {
    /// Gyro white noise, rad/s/√Hz.
    pub sigma_g: f64,
    /// Accel white noise, m/s²/√Hz.
    pub sigma_a: f64,
    /// Gyro bias random walk, rad/s²/√Hz.
    pub sigma_bg: f64,
    /// Accel bias random walk, m/s³/√Hz.
    pub sigma_ba: f64,
    /// Gravity in the global frame, m/s².
    pub gravity: Vec3,
}

impl Default for NoiseParams {
    fn default() -> Self {
        NoiseParams {
            sigma_g: 2.0e-4,
            sigma_a: 2.0e-3,
            sigma_bg: 2.0e-5,
            sigma_ba: 3.0e-4,
            gravity: Vec3::new(0.0, 0.0, -9.81),
        }
    }
}

/// Preintegrated IMU increment between two keyframes.
#[derive(Debug, Clone)]
pub struct PreintDelta {
    /// Total integration time, s.
    pub dt_total: f64,
    /// Position delta in the start body frame, m.
    pub alpha: Vec3,
    /// Velocity delta in the start body frame, m/s.
    pub beta: Vec3,
    /// Rotation delta, start body frame to end body frame.
    pub gamma: UnitQuat,
    /// First-order sensitivities of alpha/beta/gamma to bias change.
    pub j_alpha_ba: Mat3,
    pub j_alpha_bg: Mat3,
    pub j_beta_ba: Mat3,
    pub j_beta_bg: Mat3,
    pub j_gamma_bg: Mat3,
    /// Covariance over the 15-dof tangent `[δp, δθ, δv, δba, δbg]`.
    pub cov: StateMat,
    /// Accelerometer bias linearization point.
    pub ba_lin: Vec3,
    /// Gyroscope bias linearization point.
    pub bg_lin: Vec3,
}

fn check_stream(samples: &[ImuSample]) -> Result<()> {
    if samples.len() < 2 {
        return Err(Error::EmptyImuStream(samples.len()));
    }
    for (i, pair) in samples.windows(2).enumerate() {
        if pair[1].t <= pair[0].t {
            return Err(Error::NonMonotoneImu { index: i + 1 });
        }
    }
    Ok(())
}

/// Integrate an ordered sample stream into a [`PreintDelta`] at the given
/// bias linearization point. Gravity is not applied inside the delta.
pub fn preintegrate(
    samples: &[ImuSample],
    ba_lin: &Vec3,
    bg_lin: &Vec3,
    noise: &NoiseParams,
) -> Result<PreintDelta> {
    check_stream(samples)?;

    let mut alpha = Vec3::zeros();
    let mut beta = Vec3::zeros();
    let mut gamma = UnitQuat::identity();
    let mut cov = StateMat::zeros();
    let mut jac = StateMat::identity();
    let mut dt_total = 0.0;

    // per-step noise input [n_a, n_g, n_ba, n_bg]
    let n_diag = [
        noise.sigma_a * noise.sigma_a,
        noise.sigma_g * noise.sigma_g,
        noise.sigma_ba * noise.sigma_ba,
        noise.sigma_bg * noise.sigma_bg,
    ];

    for pair in samples.windows(2) {
        let dt = pair[1].t - pair[0].t;
        let a0 = pair[0].accel - ba_lin;
        let a1 = pair[1].accel - ba_lin;
        let w_mid = 0.5 * (pair[0].gyro + pair[1].gyro) - bg_lin;

        let r0 = gamma.rotation_matrix();
        let gamma_next = gamma.compose(&so3_exp(&(w_mid * dt)));
        let r1 = gamma_next.rotation_matrix();

        let ua0 = r0 * a0;
        let ua1 = r1 * a1;
        let ua = 0.5 * (ua0 + ua1);

        let alpha_next = alpha + beta * dt + 0.5 * ua * dt * dt;
        let beta_next = beta + ua * dt;

        // error-state transition; θ rows use the exact discrete transport
        let a0x = skew(&a0);
        let a1x = skew(&a1);
        let i3 = Mat3::identity();
        let w_dt = w_mid * dt;
        let dth_trans = so3_exp(&w_dt).rotation_matrix().transpose();
        let dth_dbg = -crate::manifold::so3_right_jacobian(&w_dt) * dt;
        // d(mean accel)/dθ_k and the bias partials it drags along
        let dua_dth = -0.5 * (r0 * a0x + r1 * a1x * dth_trans);
        let dua_dba = -0.5 * (r0 + r1);
        let dua_dbg = -0.5 * (r1 * a1x) * dth_dbg;

        let mut f = StateMat::identity();
        f.fixed_view_mut::<3, 3>(IDX_P, IDX_TH)
            .copy_from(&(0.5 * dt * dt * dua_dth));
        f.fixed_view_mut::<3, 3>(IDX_P, IDX_V).copy_from(&(i3 * dt));
        f.fixed_view_mut::<3, 3>(IDX_P, IDX_BA)
            .copy_from(&(0.5 * dt * dt * dua_dba));
        f.fixed_view_mut::<3, 3>(IDX_P, IDX_BG)
            .copy_from(&(0.5 * dt * dt * dua_dbg));
        f.fixed_view_mut::<3, 3>(IDX_TH, IDX_TH).copy_from(&dth_trans);
        f.fixed_view_mut::<3, 3>(IDX_TH, IDX_BG).copy_from(&dth_dbg);
        f.fixed_view_mut::<3, 3>(IDX_V, IDX_TH)
            .copy_from(&(dt * dua_dth));
        f.fixed_view_mut::<3, 3>(IDX_V, IDX_BA)
            .copy_from(&(dt * dua_dba));
        f.fixed_view_mut::<3, 3>(IDX_V, IDX_BG)
            .copy_from(&(dt * dua_dbg));

        // noise input, one effective white-noise sample per step
        let mut v = SMatrix::<f64, STATE_DIM, 12>::zeros();
        let r_avg = 0.5 * (r0 + r1);
        let jr_dt = -dth_dbg;
        v.fixed_view_mut::<3, 3>(IDX_P, 0)
            .copy_from(&(0.5 * dt * dt * r_avg));
        v.fixed_view_mut::<3, 3>(IDX_P, 3)
            .copy_from(&(-0.25 * dt * dt * ((r1 * a1x) * jr_dt)));
        v.fixed_view_mut::<3, 3>(IDX_TH, 3).copy_from(&jr_dt);
        v.fixed_view_mut::<3, 3>(IDX_V, 0).copy_from(&(dt * r_avg));
        v.fixed_view_mut::<3, 3>(IDX_V, 3)
            .copy_from(&(-0.5 * dt * ((r1 * a1x) * jr_dt)));
        v.fixed_view_mut::<3, 3>(IDX_BA, 6).copy_from(&(i3 * dt));
        v.fixed_view_mut::<3, 3>(IDX_BG, 9).copy_from(&(i3 * dt));

        // white noise sample variance is density²/dt; the dt in V then
        // yields the density² · dt growth of a discrete random walk
        let mut vnvt = StateMat::zeros();
        for blk in 0..4 {
            let vb = v.fixed_view::<STATE_DIM, 3>(0, 3 * blk).into_owned();
            vnvt += vb * vb.transpose() * (n_diag[blk] / dt);
        }
        cov = f * cov * f.transpose() + vnvt;
        cov = 0.5 * (cov + cov.transpose());
        jac = f * jac;

        alpha = alpha_next;
        beta = beta_next;
        gamma = gamma_next;
        dt_total += dt;
    }

    Ok(PreintDelta {
        dt_total,
        alpha,
        beta,
        gamma,
        j_alpha_ba: jac.fixed_view::<3, 3>(IDX_P, IDX_BA).into_owned(),
        j_alpha_bg: jac.fixed_view::<3, 3>(IDX_P, IDX_BG).into_owned(),
        j_beta_ba: jac.fixed_view::<3, 3>(IDX_V, IDX_BA).into_owned(),
        j_beta_bg: jac.fixed_view::<3, 3>(IDX_V, IDX_BG).into_owned(),
        j_gamma_bg: jac.fixed_view::<3, 3>(IDX_TH, IDX_BG).into_owned(),
        cov,
        ba_lin: *ba_lin,
        bg_lin: *bg_lin,
    })
}

/// First-order bias correction of the delta. Valid while the bias change
/// stays below the repropagation thresholds; beyond that the caller should
/// preintegrate anew.
pub fn bias_correct(delta: &PreintDelta, ba_new: &Vec3, bg_new: &Vec3) -> (Vec3, Vec3, UnitQuat) {
    let dba = ba_new - delta.ba_lin;
    let dbg = bg_new - delta.bg_lin;
    let alpha = delta.alpha + delta.j_alpha_ba * dba + delta.j_alpha_bg * dbg;
    let beta = delta.beta + delta.j_beta_ba * dba + delta.j_beta_bg * dbg;
    let gamma = delta.gamma.compose(&so3_exp(&(delta.j_gamma_bg * dbg)));
    (alpha, beta, gamma)
}

/// Preintegration residual between two states and its analytic Jacobians
/// w.r.t. both state tangents.
///
/// Residual blocks, in tangent ordering: position, rotation (quaternion
/// error as 2·vec with a log fallback above 1e-3 rad), velocity, and the
/// two bias random-walk differences. Zero when `(xi, xj)` is the exact
/// integral of the measurements at the linearization biases.
pub fn imu_residual(
    delta: &PreintDelta,
    xi: &ImuState,
    xj: &ImuState,
    gravity: &Vec3,
) -> (StateVec, StateMat, StateMat) {
    let dt = delta.dt_total;
    let (alpha, beta, gamma) = bias_correct(delta, &xi.ba, &xi.bg);

    let ri_t = xi.q.rotation_matrix().transpose();
    let u_p = xj.p - xi.p - xi.v * dt - 0.5 * gravity * dt * dt;
    let u_v = xj.v - xi.v - gravity * dt;

    let r_p = ri_t * u_p - alpha;
    let r_v = ri_t * u_v - beta;

    let q_err = gamma.inverse().compose(&xi.q.inverse()).compose(&xj.q);
    let i3 = Mat3::identity();
    // residual rotation block and the derivatives of the branch actually
    // used: d_right for a right perturbation q_err ⊗ Exp(u), d_left for a
    // left perturbation Exp(u) ⊗ q_err
    let (r_th, d_right, d_left) = if q_err.angle() > 1e-3 {
        let phi = so3_log(&q_err);
        let jr_inv = crate::manifold::so3_right_jacobian_inv(&phi);
        let left = jr_inv * q_err.rotation_matrix().transpose();
        (phi, jr_inv, left)
    } else {
        (
            2.0 * q_err.vec(),
            q_err.w() * i3 + skew(&q_err.vec()),
            q_err.w() * i3 - skew(&q_err.vec()),
        )
    };

    let mut r = StateVec::zeros();
    r.fixed_rows_mut::<3>(IDX_P).copy_from(&r_p);
    r.fixed_rows_mut::<3>(IDX_TH).copy_from(&r_th);
    r.fixed_rows_mut::<3>(IDX_V).copy_from(&r_v);
    r.fixed_rows_mut::<3>(IDX_BA).copy_from(&(xj.ba - xi.ba));
    r.fixed_rows_mut::<3>(IDX_BG).copy_from(&(xj.bg - xi.bg));

    let r_ij = ri_t * xj.q.rotation_matrix();

    let mut j_i = StateMat::zeros();
    j_i.fixed_view_mut::<3, 3>(IDX_P, IDX_P).copy_from(&(-ri_t));
    j_i.fixed_view_mut::<3, 3>(IDX_P, IDX_TH)
        .copy_from(&skew(&(ri_t * u_p)));
    j_i.fixed_view_mut::<3, 3>(IDX_P, IDX_V)
        .copy_from(&(-ri_t * dt));
    j_i.fixed_view_mut::<3, 3>(IDX_P, IDX_BA)
        .copy_from(&(-delta.j_alpha_ba));
    j_i.fixed_view_mut::<3, 3>(IDX_P, IDX_BG)
        .copy_from(&(-delta.j_alpha_bg));
    // the correction rotation exp(Jγ δbg) is itself a function of δbg
    let corr = delta.j_gamma_bg * (xi.bg - delta.bg_lin);
    let dcorr_dbg = crate::manifold::so3_right_jacobian(&corr) * delta.j_gamma_bg;
    j_i.fixed_view_mut::<3, 3>(IDX_TH, IDX_TH)
        .copy_from(&(-d_right * r_ij.transpose()));
    j_i.fixed_view_mut::<3, 3>(IDX_TH, IDX_BG)
        .copy_from(&(-d_left * dcorr_dbg));
    j_i.fixed_view_mut::<3, 3>(IDX_V, IDX_TH)
        .copy_from(&skew(&(ri_t * u_v)));
    j_i.fixed_view_mut::<3, 3>(IDX_V, IDX_V).copy_from(&(-ri_t));
    j_i.fixed_view_mut::<3, 3>(IDX_V, IDX_BA)
        .copy_from(&(-delta.j_beta_ba));
    j_i.fixed_view_mut::<3, 3>(IDX_V, IDX_BG)
        .copy_from(&(-delta.j_beta_bg));
    j_i.fixed_view_mut::<3, 3>(IDX_BA, IDX_BA).copy_from(&(-i3));
    j_i.fixed_view_mut::<3, 3>(IDX_BG, IDX_BG).copy_from(&(-i3));

    let mut j_j = StateMat::zeros();
    j_j.fixed_view_mut::<3, 3>(IDX_P, IDX_P).copy_from(&ri_t);
    j_j.fixed_view_mut::<3, 3>(IDX_TH, IDX_TH).copy_from(&d_right);
    j_j.fixed_view_mut::<3, 3>(IDX_V, IDX_V).copy_from(&ri_t);
    j_j.fixed_view_mut::<3, 3>(IDX_BA, IDX_BA).copy_from(&i3);
    j_j.fixed_view_mut::<3, 3>(IDX_BG, IDX_BG).copy_from(&i3);

    (r, j_i, j_j)
}

/// Propagate a state through a sample stream with gravity, by composing the
/// state with the preintegrated delta at the state's own biases. Exactly
/// consistent with [`imu_residual`] by construction.
pub fn propagate(state: &ImuState, samples: &[ImuSample], noise: &NoiseParams) -> Result<ImuState> {
    let delta = preintegrate(samples, &state.ba, &state.bg, noise)?;
    Ok(compose_delta(state, &delta, &noise.gravity))
}

/// Apply a delta to a start state: the end state that zeroes the residual.
pub fn compose_delta(state: &ImuState, delta: &PreintDelta, gravity: &Vec3) -> ImuState {
    let dt = delta.dt_total;
    let r = state.q.rotation_matrix();
    ImuState {
        p: state.p + state.v * dt + 0.5 * gravity * dt * dt + r * delta.alpha,
        v: state.v + gravity * dt + r * delta.beta,
        q: state.q.compose(&delta.gamma),
        ba: state.ba,
        bg: state.bg,
    }
}
