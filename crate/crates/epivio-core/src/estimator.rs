//! Sliding-window VI-BA in two modes sharing one backbone.
//!
//! Structureless mode ties keyframe pairs together with scalar epipolar
//! residuals, so the normal equations stay at `15·(N+1)` regardless of how
//! many features are tracked. Structure-based mode carries one inverse
//! depth per track and eliminates the depths by per-landmark Schur
//! complement before the pose solve, so both modes pay the same per-pose
//! linear-solve cost and timing differences isolate the residual
//! formulation.
//!
//! Gauge handling: before any marginalization prior exists, a strong
//! quadratic anchor pins the first pose's position and yaw (the four dofs
//! vision+IMU cannot observe). The anchor is an ordinary factor, so the
//! first marginalization absorbs it and the rolling prior carries the gauge
//! from then on.

use std::collections::BTreeSet;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, SMatrix};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factors::{
    camera_center, camera_rotation, epipolar_pairs, epipolar_residual, epipolar_residual_only,
    huber_weight, reprojection_residual, triangulate_inv_depth, Bearing, EpipolarEval, Extrinsics,
    FeatureTrack, HuberParams, PairPolicy, ReprojEval, DEFAULT_DEPTH, INV_DEPTH_MAX,
    INV_DEPTH_MIN, MIN_DEPTH,
};
use crate::imu::{
    compose_delta, imu_residual, preintegrate, ImuSample, ImuState, NoiseParams, PreintDelta,
    StateMat, StateVec, IDX_P, IDX_TH, REPROP_THRESHOLD_BA, REPROP_THRESHOLD_BG, STATE_DIM,
};
use crate::manifold::{boxminus, Mat3, UnitQuat, Vec3};
use crate::marginal::{schur_marginalize, MarginalPrior};

/// Information weight freezing the gauge dofs (std 1e-4 m / rad).
const GAUGE_WEIGHT: f64 = 1e8;
/// Initialization-prior weights on the first state's velocity and biases:
/// the seed state arrives from an external initializer with roughly this
/// confidence (std 0.02 m/s, 0.02 m/s2, 2e-3 rad/s).
const INIT_WEIGHT_VEL: f64 = 2.5e3;
const INIT_WEIGHT_BA: f64 = 2.5e3;
const INIT_WEIGHT_BG: f64 = 2.5e5;
const MAX_DAMPING: f64 = 1e12;
const MIN_DAMPING: f64 = 1e-12;
const DIAG_FLOOR: f64 = 1e-12;

/// Visual residual formulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Structureless,
    StructureBased,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Mode::Structureless => write!(f, "structureless"),
            Mode::StructureBased => write!(f, "structure-based"),
        }
    }
}

/// Levenberg-Marquardt settings.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LmParams {
    pub initial_damping: f64,
    pub max_iterations: usize,
    pub cost_tolerance: f64,
    pub step_tolerance: f64,
}

impl Default for LmParams {
    fn default() -> Self {
        LmParams {
            initial_damping: 1e-4,
            max_iterations: 10,
            cost_tolerance: 1e-6,
            step_tolerance: 1e-8,
        }
    }
}

/// Keyframe selection thresholds.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct KeyframePolicy {
    /// Mean rotation-compensated parallax on the normalized plane.
    pub min_parallax: f64,
    /// Keyframe is forced when fewer features are tracked.
    pub min_tracked: usize,
}

impl Default for KeyframePolicy {
    fn default() -> Self {
        KeyframePolicy {
            min_parallax: 0.02,
            min_tracked: 20,
        }
    }
}

#[derive(Debug, Clone)]
pub struct WindowConfig {
    /// Number of keyframes held in the window (N+1).
    pub window_size: usize,
    pub mode: Mode,
    pub pair_policy: PairPolicy,
    pub huber: HuberParams,
    pub lm: LmParams,
    /// Baseline below which an epipolar factor is degenerate, m.
    pub baseline_gate: f64,
    pub keyframe: KeyframePolicy,
    /// Visual measurement std on the normalized plane
    /// (pixel sigma / average focal length).
    pub sigma_vis: f64,
    /// Whitened-residual threshold of the single post-solve outlier pass.
    pub outlier_gate: f64,
    pub reject_outliers: bool,
    /// Evaluate visual factors on worker threads; reduction order is fixed
    /// either way, so results do not change.
    pub parallel: bool,
    /// Bias sanity bounds; estimates beyond these are treated as divergence.
    pub max_bias_accel: f64,
    pub max_bias_gyro: f64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig {
            window_size: 11,
            mode: Mode::Structureless,
            pair_policy: PairPolicy::Anchor,
            huber: HuberParams::default(),
            lm: LmParams::default(),
            baseline_gate: 1e-6,
            keyframe: KeyframePolicy::default(),
            sigma_vis: 1.5 / 460.0,
            outlier_gate: 3.0,
            reject_outliers: true,
            parallel: false,
            max_bias_accel: 1.0,
            max_bias_gyro: 0.5,
        }
    }
}

/// Initialization anchor on the first state, active until the first
/// marginalization prior takes over. Position and yaw (the four
/// unobservable dofs) are frozen hard; velocity and biases carry the
/// moderate confidence of the external initializer, which also blocks the
/// weakly observable tilt/accel-bias mode on short windows.
#[derive(Debug, Clone, Copy)]
pub struct GaugeAnchor {
    pub state_ref: ImuState,
    pub w_pos: f64,
    pub w_yaw: f64,
    pub w_vel: f64,
    pub w_ba: f64,
    pub w_bg: f64,
}

impl GaugeAnchor {
    pub fn for_state(state: ImuState) -> Self {
        GaugeAnchor {
            state_ref: state,
            w_pos: GAUGE_WEIGHT,
            w_yaw: GAUGE_WEIGHT,
            w_vel: INIT_WEIGHT_VEL,
            w_ba: INIT_WEIGHT_BA,
            w_bg: INIT_WEIGHT_BG,
        }
    }

    fn yaw_direction(&self) -> Vec3 {
        // global z expressed in the local right-tangent at the reference
        self.state_ref.q.rotation_matrix().transpose() * Vec3::new(0.0, 0.0, 1.0)
    }

    /// Accumulate the anchor into (h, b, cost) at the given layout offset.
    fn accumulate(
        &self,
        state0: &ImuState,
        h: &mut DMatrix<f64>,
        b: &mut DVector<f64>,
        offset: usize,
    ) -> f64 {
        let mut cost = 0.0;
        let dp = state0.p - self.state_ref.p;
        for k in 0..3 {
            h[(offset + IDX_P + k, offset + IDX_P + k)] += self.w_pos;
            b[offset + IDX_P + k] += self.w_pos * dp[k];
        }
        cost += self.w_pos * dp.norm_squared();

        let theta_err = boxminus(&state0.q, &self.state_ref.q);
        let d = self.yaw_direction();
        let e = d.dot(&theta_err);
        for a in 0..3 {
            for c in 0..3 {
                h[(offset + IDX_TH + a, offset + IDX_TH + c)] += self.w_yaw * d[a] * d[c];
            }
            b[offset + IDX_TH + a] += self.w_yaw * e * d[a];
        }
        cost += self.w_yaw * e * e;

        for (w, idx, diff) in [
            (self.w_vel, crate::imu::IDX_V, state0.v - self.state_ref.v),
            (self.w_ba, crate::imu::IDX_BA, state0.ba - self.state_ref.ba),
            (self.w_bg, crate::imu::IDX_BG, state0.bg - self.state_ref.bg),
        ] {
            for k in 0..3 {
                h[(offset + idx + k, offset + idx + k)] += w;
                b[offset + idx + k] += w * diff[k];
            }
            cost += w * diff.norm_squared();
        }
        cost
    }

    /// Cost-only evaluation.
    fn cost(&self, state0: &ImuState) -> f64 {
        let dp = state0.p - self.state_ref.p;
        let theta_err = boxminus(&state0.q, &self.state_ref.q);
        let e = self.yaw_direction().dot(&theta_err);
        self.w_pos * dp.norm_squared()
            + self.w_yaw * e * e
            + self.w_vel * (state0.v - self.state_ref.v).norm_squared()
            + self.w_ba * (state0.ba - self.state_ref.ba).norm_squared()
            + self.w_bg * (state0.bg - self.state_ref.bg).norm_squared()
    }
}

/// The assembled factor graph for one solve.
#[derive(Debug, Clone)]
pub struct WindowProblem {
    pub states: Vec<ImuState>,
    pub preints: Vec<PreintDelta>,
    /// Tracks sorted by feature id; observation indices are window slots.
    pub tracks: Vec<FeatureTrack>,
    pub prior: Option<MarginalPrior>,
    pub gauge: Option<GaugeAnchor>,
    pub ext: Extrinsics,
    pub mode: Mode,
    pub gravity: Vec3,
    /// Observations rejected by the outlier pass, as (feature id, slot of
    /// the non-anchor observation). Cleared whenever the window changes.
    pub outliers: BTreeSet<(u64, usize)>,
}

impl WindowProblem {
    pub fn new(ext: Extrinsics, mode: Mode, gravity: Vec3) -> Self {
        WindowProblem {
            states: Vec::new(),
            preints: Vec::new(),
            tracks: Vec::new(),
            prior: None,
            gauge: None,
            ext,
            mode,
            gravity,
            outliers: BTreeSet::new(),
        }
    }

    fn track_index(&self, feature_id: u64) -> std::result::Result<usize, usize> {
        self.tracks
            .binary_search_by(|t| t.feature_id.cmp(&feature_id))
    }
}

/// Gauss-Newton normal equations `H dx = -g` over the window tangent.
#[derive(Debug, Clone)]
pub struct NormalEquations {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub cost: f64,
    /// 15·(number of states); inverse-depth columns follow.
    pub pose_dim: usize,
    /// Feature ids carrying an inverse-depth column, in column order.
    pub lambda_ids: Vec<u64>,
}

#[derive(Debug, Clone, Copy)]
struct VisualDesc {
    track_idx: usize,
    i: usize,
    j: usize,
    lam_col: Option<usize>,
}

enum VisualEval {
    Epi(EpipolarEval),
    Repro(ReprojEval),
}

fn visual_descriptors(
    window: &WindowProblem,
    cfg: &WindowConfig,
    skip: &BTreeSet<(u64, usize)>,
) -> (Vec<VisualDesc>, Vec<u64>, Vec<usize>) {
    let mut descs = Vec::new();
    let mut lambda_ids = Vec::new();
    let mut lambda_tracks = Vec::new();
    for (ti, track) in window.tracks.iter().enumerate() {
        match window.mode {
            Mode::Structureless => {
                for (i, j) in epipolar_pairs(track, cfg.pair_policy) {
                    if skip.contains(&(track.feature_id, j)) {
                        continue;
                    }
                    descs.push(VisualDesc {
                        track_idx: ti,
                        i,
                        j,
                        lam_col: None,
                    });
                }
            }
            Mode::StructureBased => {
                if track.inv_depth.is_none() || track.obs.len() < 2 {
                    continue;
                }
                let col = lambda_ids.len();
                lambda_ids.push(track.feature_id);
                lambda_tracks.push(ti);
                let anchor = track.obs[0].0;
                for &(j, _) in &track.obs[1..] {
                    if skip.contains(&(track.feature_id, j)) {
                        continue;
                    }
                    descs.push(VisualDesc {
                        track_idx: ti,
                        i: anchor,
                        j,
                        lam_col: Some(col),
                    });
                }
            }
        }
    }
    (descs, lambda_ids, lambda_tracks)
}

fn eval_visual(
    desc: &VisualDesc,
    states: &[ImuState],
    window: &WindowProblem,
    cfg: &WindowConfig,
    lambdas: Option<&[f64]>,
) -> Option<VisualEval> {
    let track = &window.tracks[desc.track_idx];
    let zi = track.bearing_at(desc.i)?;
    let zj = track.bearing_at(desc.j)?;
    match desc.lam_col {
        None => epipolar_residual(
            &states[desc.i],
            &states[desc.j],
            &window.ext,
            &zi.vec(),
            &zj.vec(),
            cfg.baseline_gate,
        )
        .map(VisualEval::Epi),
        Some(col) => {
            let lambda = match lambdas {
                Some(ls) => ls[col],
                None => track.inv_depth.unwrap(),
            };
            reprojection_residual(&states[desc.i], &states[desc.j], &window.ext, zi, zj, lambda)
                .ok()
                .map(VisualEval::Repro)
        }
    }
}

fn eval_visual_cost(
    desc: &VisualDesc,
    states: &[ImuState],
    window: &WindowProblem,
    cfg: &WindowConfig,
    lambdas: Option<&[f64]>,
) -> Option<f64> {
    let track = &window.tracks[desc.track_idx];
    let zi = track.bearing_at(desc.i)?;
    let zj = track.bearing_at(desc.j)?;
    match desc.lam_col {
        None => epipolar_residual_only(
            &states[desc.i],
            &states[desc.j],
            &window.ext,
            &zi.vec(),
            &zj.vec(),
            cfg.baseline_gate,
        ),
        Some(col) => {
            let lambda = match lambdas {
                Some(ls) => ls[col],
                None => track.inv_depth.unwrap(),
            };
            reprojection_residual(&states[desc.i], &states[desc.j], &window.ext, zi, zj, lambda)
                .ok()
                .map(|e| e.r.norm())
        }
    }
}

/// Inverse Cholesky factor of the preintegration covariance, used to whiten
/// the residual and Jacobians.
fn preint_whitener(delta: &PreintDelta) -> Result<StateMat> {
    let mut jitter = 0.0;
    let scale = delta.cov.diagonal().max();
    for _ in 0..4 {
        let cov = delta.cov + StateMat::identity() * jitter;
        if let Some(chol) = nalgebra::Cholesky::new(cov) {
            let li = chol
                .l()
                .solve_lower_triangular(&StateMat::identity())
                .expect("triangular solve");
            return Ok(li);
        }
        jitter = if jitter == 0.0 {
            scale * 1e-14
        } else {
            jitter * 100.0
        };
    }
    Err(Error::SolverDiverged(
        "preintegration covariance not factorizable".into(),
    ))
}

struct Assembly {
    h: DMatrix<f64>,
    g: DVector<f64>,
    cost: f64,
    pose_dim: usize,
    lambda_ids: Vec<u64>,
    lambda_tracks: Vec<usize>,
    /// Factors found infeasible at the current linearization.
    dropped: BTreeSet<(u64, usize)>,
}

fn add_block<const R: usize, const C: usize>(
    h: &mut DMatrix<f64>,
    r0: usize,
    c0: usize,
    block: &SMatrix<f64, R, C>,
) {
    let mut view = h.fixed_view_mut::<R, C>(r0, c0);
    view += block;
}

fn assemble(
    window: &WindowProblem,
    cfg: &WindowConfig,
    skip: &BTreeSet<(u64, usize)>,
) -> Result<Assembly> {
    let n = window.states.len();
    if n < 2 {
        return Err(Error::Underdetermined(n));
    }
    debug_assert_eq!(window.preints.len(), n - 1);

    let (descs, lambda_ids, lambda_tracks) = visual_descriptors(window, cfg, skip);
    let pose_dim = STATE_DIM * n;
    let dim = pose_dim + lambda_ids.len();
    let mut h = DMatrix::zeros(dim, dim);
    let mut g = DVector::zeros(dim);
    let mut cost = 0.0;
    let mut dropped = BTreeSet::new();

    // prior, then gauge anchor while no prior exists
    if let Some(prior) = &window.prior {
        let r = prior.residual(&window.states);
        cost += r.norm_squared();
        let grad = prior.sqrt_info().transpose() * &r;
        for (a, &slot_a) in prior.index_map.iter().enumerate() {
            let mut gv = g.rows_mut(STATE_DIM * slot_a, STATE_DIM);
            gv += grad.rows(STATE_DIM * a, STATE_DIM);
            for (bb, &slot_b) in prior.index_map.iter().enumerate() {
                let hb = prior
                    .h
                    .view((STATE_DIM * a, STATE_DIM * bb), (STATE_DIM, STATE_DIM));
                let mut hv = h.view_mut(
                    (STATE_DIM * slot_a, STATE_DIM * slot_b),
                    (STATE_DIM, STATE_DIM),
                );
                hv += hb;
            }
        }
    } else if let Some(gauge) = &window.gauge {
        cost += gauge.accumulate(&window.states[0], &mut h, &mut g, 0);
    }

    // preintegration factors
    for k in 0..n - 1 {
        let (r, j_i, j_j) = imu_residual(
            &window.preints[k],
            &window.states[k],
            &window.states[k + 1],
            &window.gravity,
        );
        let li = preint_whitener(&window.preints[k])?;
        let rw: StateVec = li * r;
        let jiw: StateMat = li * j_i;
        let jjw: StateMat = li * j_j;
        cost += rw.norm_squared();
        let (ri, rj) = (STATE_DIM * k, STATE_DIM * (k + 1));
        add_block::<STATE_DIM, STATE_DIM>(&mut h, ri, ri, &(jiw.transpose() * jiw));
        add_block::<STATE_DIM, STATE_DIM>(&mut h, ri, rj, &(jiw.transpose() * jjw));
        add_block::<STATE_DIM, STATE_DIM>(&mut h, rj, ri, &(jjw.transpose() * jiw));
        add_block::<STATE_DIM, STATE_DIM>(&mut h, rj, rj, &(jjw.transpose() * jjw));
        let gi: StateVec = jiw.transpose() * rw;
        let gj: StateVec = jjw.transpose() * rw;
        for d in 0..STATE_DIM {
            g[ri + d] += gi[d];
            g[rj + d] += gj[d];
        }
    }

    // visual factors, evaluated possibly in parallel but reduced in order
    let evals: Vec<Option<VisualEval>> = if cfg.parallel {
        descs
            .par_iter()
            .map(|d| eval_visual(d, &window.states, window, cfg, None))
            .collect()
    } else {
        descs
            .iter()
            .map(|d| eval_visual(d, &window.states, window, cfg, None))
            .collect()
    };

    let inv_sigma = 1.0 / cfg.sigma_vis;
    for (desc, eval) in descs.iter().zip(evals.into_iter()) {
        let fid = window.tracks[desc.track_idx].feature_id;
        let (ri, rj) = (STATE_DIM * desc.i, STATE_DIM * desc.j);
        match eval {
            None => {
                dropped.insert((fid, desc.j));
            }
            Some(VisualEval::Epi(e)) => {
                let rw = e.r * inv_sigma;
                let (rho, w) = huber_weight(rw * rw, &cfg.huber);
                cost += rho;
                let jiw = e.j_i * inv_sigma;
                let jjw = e.j_j * inv_sigma;
                add_block::<STATE_DIM, STATE_DIM>(&mut h, ri, ri, &(w * jiw.transpose() * jiw));
                add_block::<STATE_DIM, STATE_DIM>(&mut h, ri, rj, &(w * jiw.transpose() * jjw));
                add_block::<STATE_DIM, STATE_DIM>(&mut h, rj, ri, &(w * jjw.transpose() * jiw));
                add_block::<STATE_DIM, STATE_DIM>(&mut h, rj, rj, &(w * jjw.transpose() * jjw));
                let gi = (w * rw) * jiw.transpose();
                let gj = (w * rw) * jjw.transpose();
                for d in 0..STATE_DIM {
                    g[ri + d] += gi[d];
                    g[rj + d] += gj[d];
                }
            }
            Some(VisualEval::Repro(e)) => {
                let col = pose_dim + desc.lam_col.expect("repro factor carries a column");
                let rw = e.r * inv_sigma;
                let (rho, w) = huber_weight(rw.norm_squared(), &cfg.huber);
                cost += rho;
                let jiw = e.j_i * inv_sigma;
                let jjw = e.j_j * inv_sigma;
                let jlw = e.j_lambda * inv_sigma;
                add_block::<STATE_DIM, STATE_DIM>(&mut h, ri, ri, &(w * jiw.transpose() * jiw));
                add_block::<STATE_DIM, STATE_DIM>(&mut h, ri, rj, &(w * jiw.transpose() * jjw));
                add_block::<STATE_DIM, STATE_DIM>(&mut h, rj, ri, &(w * jjw.transpose() * jiw));
                add_block::<STATE_DIM, STATE_DIM>(&mut h, rj, rj, &(w * jjw.transpose() * jjw));
                let hil: SMatrix<f64, STATE_DIM, 1> = w * jiw.transpose() * jlw;
                let hjl: SMatrix<f64, STATE_DIM, 1> = w * jjw.transpose() * jlw;
                for d in 0..STATE_DIM {
                    h[(ri + d, col)] += hil[d];
                    h[(col, ri + d)] += hil[d];
                    h[(rj + d, col)] += hjl[d];
                    h[(col, rj + d)] += hjl[d];
                }
                h[(col, col)] += w * jlw.norm_squared();
                let gi = w * jiw.transpose() * rw;
                let gj = w * jjw.transpose() * rw;
                for d in 0..STATE_DIM {
                    g[ri + d] += gi[d];
                    g[rj + d] += gj[d];
                }
                g[col] += w * jlw.dot(&rw);
            }
        }
    }

    Ok(Assembly {
        h,
        g,
        cost,
        pose_dim,
        lambda_ids,
        lambda_tracks,
        dropped,
    })
}

/// Candidate-state cost over exactly the factor set of the last assembly.
/// `None` means a factor that was feasible at the linearization point became
/// infeasible at the candidate, which rejects the step.
fn compute_cost(
    window: &WindowProblem,
    cfg: &WindowConfig,
    states: &[ImuState],
    lambdas: Option<&[f64]>,
    skip: &BTreeSet<(u64, usize)>,
) -> Option<f64> {
    let mut cost = 0.0;
    if let Some(prior) = &window.prior {
        cost += prior.residual(states).norm_squared();
    } else if let Some(gauge) = &window.gauge {
        cost += gauge.cost(&states[0]);
    }
    for k in 0..window.preints.len() {
        let (r, _, _) = imu_residual(&window.preints[k], &states[k], &states[k + 1], &window.gravity);
        let li = preint_whitener(&window.preints[k]).ok()?;
        let rw: StateVec = li * r;
        cost += rw.norm_squared();
    }
    let (descs, _, _) = visual_descriptors(window, cfg, skip);
    let residuals: Vec<Option<f64>> = if cfg.parallel {
        descs
            .par_iter()
            .map(|d| eval_visual_cost(d, states, window, cfg, lambdas))
            .collect()
    } else {
        descs
            .iter()
            .map(|d| eval_visual_cost(d, states, window, cfg, lambdas))
            .collect()
    };
    let inv_sigma = 1.0 / cfg.sigma_vis;
    for r in residuals {
        let rn = r? * inv_sigma;
        let (rho, _) = huber_weight(rn * rn, &cfg.huber);
        cost += rho;
    }
    Some(cost)
}

/// Assemble the Gauss-Newton normal equations of the window at its current
/// estimates.
pub fn build_problem(window: &WindowProblem, cfg: &WindowConfig) -> Result<NormalEquations> {
    let asm = assemble(window, cfg, &window.outliers)?;
    Ok(NormalEquations {
        h: asm.h,
        g: asm.g,
        cost: asm.cost,
        pose_dim: asm.pose_dim,
        lambda_ids: asm.lambda_ids,
    })
}

/// Solve the damped system, eliminating inverse-depth columns first when
/// present. `None` signals a factorization failure at this damping.
fn solve_normal_eqs(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    damping: f64,
    pose_dim: usize,
) -> Option<DVector<f64>> {
    let dim = h.nrows();
    let nl = dim - pose_dim;
    let mut hd = h.clone();
    for i in 0..dim {
        hd[(i, i)] += damping * h[(i, i)].max(DIAG_FLOOR);
    }
    if nl == 0 {
        let chol = hd.cholesky()?;
        return Some(chol.solve(&(-g)));
    }
    // landmark block is diagonal: one column per track, and factors never
    // couple two tracks
    let hpp = hd.view((0, 0), (pose_dim, pose_dim)).into_owned();
    let hpl = hd.view((0, pose_dim), (pose_dim, nl)).into_owned();
    let gl = g.rows(pose_dim, nl).into_owned();
    let gp = g.rows(0, pose_dim).into_owned();
    let mut inv_ll = DVector::zeros(nl);
    for i in 0..nl {
        let d = hd[(pose_dim + i, pose_dim + i)];
        inv_ll[i] = if d > 1e-300 { 1.0 / d } else { 0.0 };
    }
    // Hr = Hpp − Hpl D⁻¹ Hlp, gr = gp − Hpl D⁻¹ gl
    let mut hpl_scaled = hpl.clone();
    for i in 0..nl {
        hpl_scaled.column_mut(i).scale_mut(inv_ll[i]);
    }
    let hr = &hpp - &hpl_scaled * hpl.transpose();
    let gr = &gp - &hpl_scaled * &gl;
    let chol = hr.cholesky()?;
    let dxp = chol.solve(&(-gr));
    let back = hpl.transpose() * &dxp;
    let mut dx = DVector::zeros(dim);
    dx.rows_mut(0, pose_dim).copy_from(&dxp);
    for i in 0..nl {
        dx[pose_dim + i] = -inv_ll[i] * (gl[i] + back[i]);
    }
    Some(dx)
}

fn retract_states(states: &[ImuState], dx: &DVector<f64>) -> Vec<ImuState> {
    states
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let block: StateVec = dx.fixed_rows::<STATE_DIM>(STATE_DIM * k).into_owned();
            s.retract(&block)
        })
        .collect()
}

/// Per-solve report: LM iteration count, the accepted-step cost sequence,
/// and wall-clock solve time.
#[derive(Debug, Clone)]
pub struct SolveReport {
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub cost_history: Vec<f64>,
    pub solve_seconds: f64,
    pub removed_outliers: usize,
}

struct LmOutcome {
    iterations: usize,
    initial_cost: f64,
    history: Vec<f64>,
}

fn lm_loop(window: &mut WindowProblem, cfg: &WindowConfig) -> Result<LmOutcome> {
    let mut skip = window.outliers.clone();
    let mut asm = assemble(window, cfg, &skip)?;
    skip.extend(asm.dropped.iter().copied());
    let initial_cost = asm.cost;
    let mut history = vec![asm.cost];
    let mut damping = cfg.lm.initial_damping;
    let mut iterations = 0;

    while iterations < cfg.lm.max_iterations {
        iterations += 1;
        let dx = loop {
            match solve_normal_eqs(&asm.h, &asm.g, damping, asm.pose_dim) {
                Some(dx) => break dx,
                None => {
                    damping *= 10.0;
                    if damping > MAX_DAMPING {
                        return Err(Error::SolverDiverged(format!(
                            "factorization failed at damping {damping:.1e}"
                        )));
                    }
                }
            }
        };
        if dx.norm() < cfg.lm.step_tolerance {
            break;
        }
        let cand_states = retract_states(&window.states, &dx);
        let cand_lambdas: Vec<f64> = asm
            .lambda_tracks
            .iter()
            .enumerate()
            .map(|(col, &ti)| {
                (window.tracks[ti].inv_depth.unwrap() + dx[asm.pose_dim + col])
                    .clamp(INV_DEPTH_MIN, INV_DEPTH_MAX)
            })
            .collect();
        let cand_cost = compute_cost(window, cfg, &cand_states, Some(&cand_lambdas), &skip);

        match cand_cost {
            Some(new_cost) if new_cost < asm.cost => {
                let decrease = asm.cost - new_cost;
                window.states = cand_states;
                for (col, &ti) in asm.lambda_tracks.iter().enumerate() {
                    window.tracks[ti].inv_depth = Some(cand_lambdas[col]);
                }
                damping = (damping / 10.0).max(MIN_DAMPING);
                let converged = decrease < cfg.lm.cost_tolerance * asm.cost.max(1e-300);
                asm = assemble(window, cfg, &skip)?;
                skip.extend(asm.dropped.iter().copied());
                history.push(asm.cost);
                if converged {
                    break;
                }
            }
            _ => {
                damping *= 10.0;
                if damping > MAX_DAMPING {
                    break;
                }
            }
        }
    }
    Ok(LmOutcome {
        iterations,
        initial_cost,
        history,
    })
}

/// Whitened residual norms of the current visual factor set, keyed by
/// (feature id, non-anchor slot).
fn visual_whitened_norms(window: &WindowProblem, cfg: &WindowConfig) -> Vec<((u64, usize), f64)> {
    let (descs, _, _) = visual_descriptors(window, cfg, &window.outliers);
    let inv_sigma = 1.0 / cfg.sigma_vis;
    descs
        .iter()
        .filter_map(|d| {
            eval_visual_cost(d, &window.states, window, cfg, None).map(|r| {
                (
                    (window.tracks[d.track_idx].feature_id, d.j),
                    r.abs() * inv_sigma,
                )
            })
        })
        .collect()
}

/// Levenberg-Marquardt over the window, followed by one outlier-rejection
/// pass and a re-solve when anything was rejected.
pub fn solve_window(window: &mut WindowProblem, cfg: &WindowConfig) -> Result<SolveReport> {
    let start = Instant::now();
    let first = lm_loop(window, cfg)?;
    let mut iterations = first.iterations;
    let initial_cost = first.initial_cost;
    let mut history = first.history;
    let mut removed = 0;

    if cfg.reject_outliers {
        let over: Vec<(u64, usize)> = visual_whitened_norms(window, cfg)
            .into_iter()
            .filter(|(_, n)| *n > cfg.outlier_gate)
            .map(|(key, _)| key)
            .collect();
        if !over.is_empty() {
            removed = over.len();
            window.outliers.extend(over);
            let second = lm_loop(window, cfg)?;
            iterations += second.iterations;
            history.extend(second.history);
        }
    }

    Ok(SolveReport {
        iterations,
        initial_cost,
        final_cost: *history.last().unwrap(),
        cost_history: history,
        solve_seconds: start.elapsed().as_secs_f64(),
        removed_outliers: removed,
    })
}

/// Schur-complement the oldest state (and, in structure-based mode, the
/// inverse depths anchored there) out of the factors touching it, producing
/// the dense prior over the remaining touched states.
///
/// The caller still owns the window shift; see [`Estimator`].
pub fn marginalize_oldest(window: &WindowProblem, cfg: &WindowConfig) -> Result<MarginalPrior> {
    let n = window.states.len();
    if n < 2 {
        return Err(Error::Underdetermined(n));
    }

    // collect the factors touching slot 0
    let mut kept_slots: BTreeSet<usize> = BTreeSet::new();
    kept_slots.insert(1); // the preintegration factor always touches slot 1
    if let Some(prior) = &window.prior {
        assert!(
            prior.index_map.contains(&0),
            "rolling prior must touch the oldest state"
        );
        for &s in &prior.index_map {
            if s != 0 {
                kept_slots.insert(s);
            }
        }
    }

    // visual factors and, in structure-based mode, depths anchored at 0
    let mut marg_visual: Vec<VisualDesc> = Vec::new();
    let mut marg_lambda_tracks: Vec<usize> = Vec::new();
    for (ti, track) in window.tracks.iter().enumerate() {
        match window.mode {
            Mode::Structureless => {
                for (i, j) in epipolar_pairs(track, cfg.pair_policy) {
                    if i != 0 {
                        continue;
                    }
                    if window.outliers.contains(&(track.feature_id, j)) {
                        continue;
                    }
                    marg_visual.push(VisualDesc {
                        track_idx: ti,
                        i,
                        j,
                        lam_col: None,
                    });
                    kept_slots.insert(j);
                }
            }
            Mode::StructureBased => {
                if track.obs.first().map(|(k, _)| *k) != Some(0)
                    || track.inv_depth.is_none()
                    || track.obs.len() < 2
                {
                    continue;
                }
                let col = marg_lambda_tracks.len();
                marg_lambda_tracks.push(ti);
                for &(j, _) in &track.obs[1..] {
                    if window.outliers.contains(&(track.feature_id, j)) {
                        continue;
                    }
                    marg_visual.push(VisualDesc {
                        track_idx: ti,
                        i: 0,
                        j,
                        lam_col: Some(col),
                    });
                    kept_slots.insert(j);
                }
            }
        }
    }

    let kept: Vec<usize> = kept_slots.into_iter().collect();
    let n_lam = marg_lambda_tracks.len();
    let marg_dims = STATE_DIM + n_lam;
    let dim = marg_dims + STATE_DIM * kept.len();
    // local layout: [slot 0, marginalized depths, kept slots ascending]
    let local_of = |slot: usize| -> usize {
        if slot == 0 {
            0
        } else {
            let rank = kept.binary_search(&slot).expect("slot collected");
            marg_dims + STATE_DIM * rank
        }
    };

    let mut h = DMatrix::zeros(dim, dim);
    let mut b = DVector::zeros(dim);

    if let Some(prior) = &window.prior {
        let r = prior.residual(&window.states);
        let grad = prior.sqrt_info().transpose() * &r;
        for (a, &slot_a) in prior.index_map.iter().enumerate() {
            let la = local_of(slot_a);
            let mut bv = b.rows_mut(la, STATE_DIM);
            bv += grad.rows(STATE_DIM * a, STATE_DIM);
            for (bb, &slot_b) in prior.index_map.iter().enumerate() {
                let lb = local_of(slot_b);
                let hb = prior
                    .h
                    .view((STATE_DIM * a, STATE_DIM * bb), (STATE_DIM, STATE_DIM));
                let mut hv = h.view_mut((la, lb), (STATE_DIM, STATE_DIM));
                hv += hb;
            }
        }
    } else if let Some(gauge) = &window.gauge {
        gauge.accumulate(&window.states[0], &mut h, &mut b, 0);
    }

    // the preintegration factor between slots 0 and 1
    {
        let (r, j_i, j_j) = imu_residual(
            &window.preints[0],
            &window.states[0],
            &window.states[1],
            &window.gravity,
        );
        let li = preint_whitener(&window.preints[0])?;
        let rw: StateVec = li * r;
        let jiw: StateMat = li * j_i;
        let jjw: StateMat = li * j_j;
        let l1 = local_of(1);
        add_block::<STATE_DIM, STATE_DIM>(&mut h, 0, 0, &(jiw.transpose() * jiw));
        add_block::<STATE_DIM, STATE_DIM>(&mut h, 0, l1, &(jiw.transpose() * jjw));
        add_block::<STATE_DIM, STATE_DIM>(&mut h, l1, 0, &(jjw.transpose() * jiw));
        add_block::<STATE_DIM, STATE_DIM>(&mut h, l1, l1, &(jjw.transpose() * jjw));
        let bi: StateVec = jiw.transpose() * rw;
        let bj: StateVec = jjw.transpose() * rw;
        for d in 0..STATE_DIM {
            b[d] += bi[d];
            b[l1 + d] += bj[d];
        }
    }

    let inv_sigma = 1.0 / cfg.sigma_vis;
    for desc in &marg_visual {
        let Some(eval) = eval_visual(desc, &window.states, window, cfg, None) else {
            continue;
        };
        let li_ = local_of(desc.i);
        let lj = local_of(desc.j);
        match eval {
            VisualEval::Epi(e) => {
                let rw = e.r * inv_sigma;
                let (_, w) = huber_weight(rw * rw, &cfg.huber);
                let jiw = e.j_i * inv_sigma;
                let jjw = e.j_j * inv_sigma;
                add_block::<STATE_DIM, STATE_DIM>(&mut h, li_, li_, &(w * jiw.transpose() * jiw));
                add_block::<STATE_DIM, STATE_DIM>(&mut h, li_, lj, &(w * jiw.transpose() * jjw));
                add_block::<STATE_DIM, STATE_DIM>(&mut h, lj, li_, &(w * jjw.transpose() * jiw));
                add_block::<STATE_DIM, STATE_DIM>(&mut h, lj, lj, &(w * jjw.transpose() * jjw));
                let bi = (w * rw) * jiw.transpose();
                let bj = (w * rw) * jjw.transpose();
                for d in 0..STATE_DIM {
                    b[li_ + d] += bi[d];
                    b[lj + d] += bj[d];
                }
            }
            VisualEval::Repro(e) => {
                let col = STATE_DIM + desc.lam_col.expect("column assigned");
                let rw = e.r * inv_sigma;
                let (_, w) = huber_weight(rw.norm_squared(), &cfg.huber);
                let jiw = e.j_i * inv_sigma;
                let jjw = e.j_j * inv_sigma;
                let jlw = e.j_lambda * inv_sigma;
                add_block::<STATE_DIM, STATE_DIM>(&mut h, li_, li_, &(w * jiw.transpose() * jiw));
                add_block::<STATE_DIM, STATE_DIM>(&mut h, li_, lj, &(w * jiw.transpose() * jjw));
                add_block::<STATE_DIM, STATE_DIM>(&mut h, lj, li_, &(w * jjw.transpose() * jiw));
                add_block::<STATE_DIM, STATE_DIM>(&mut h, lj, lj, &(w * jjw.transpose() * jjw));
                let hil: SMatrix<f64, STATE_DIM, 1> = w * jiw.transpose() * jlw;
                let hjl: SMatrix<f64, STATE_DIM, 1> = w * jjw.transpose() * jlw;
                for d in 0..STATE_DIM {
                    h[(li_ + d, col)] += hil[d];
                    h[(col, li_ + d)] += hil[d];
                    h[(lj + d, col)] += hjl[d];
                    h[(col, lj + d)] += hjl[d];
                }
                h[(col, col)] += w * jlw.norm_squared();
                let bi = w * jiw.transpose() * rw;
                let bj = w * jjw.transpose() * rw;
                for d in 0..STATE_DIM {
                    b[li_ + d] += bi[d];
                    b[lj + d] += bj[d];
                }
                b[col] += w * jlw.dot(&rw);
            }
        }
    }

    let (h_kept, b_kept) = schur_marginalize(&h, &b, marg_dims);
    let lin: Vec<ImuState> = kept.iter().map(|&s| window.states[s]).collect();
    Ok(MarginalPrior::new(h_kept, b_kept, lin, kept))
}

/// One input frame: timestamp plus the tracked features visible in it.
#[derive(Debug, Clone)]
pub struct FrameInput {
    pub t: f64,
    /// (feature id, normalized-coordinate bearing), any order.
    pub observations: Vec<(u64, Bearing)>,
}

/// Result of processing one frame.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub state: ImuState,
    pub was_keyframe: bool,
    pub solve: Option<SolveReport>,
    pub marg_seconds: Option<f64>,
}

/// Streaming sliding-window estimator. Owns the window, the per-interval
/// raw IMU buffers (for preintegration merging and bias repropagation), and
/// the keyframe policy.
pub struct Estimator {
    cfg: WindowConfig,
    noise: NoiseParams,
    window: WindowProblem,
    frame_times: Vec<f64>,
    interval_samples: Vec<Vec<ImuSample>>,
    initial_state: ImuState,
}

/// Maximum tolerated spacing between consecutive IMU samples, s.
const MAX_IMU_GAP: f64 = 0.5;

impl Estimator {
    pub fn new(
        cfg: WindowConfig,
        noise: NoiseParams,
        ext: Extrinsics,
        initial_state: ImuState,
    ) -> Self {
        let window = WindowProblem::new(ext, cfg.mode, noise.gravity);
        Estimator {
            cfg,
            noise,
            window,
            frame_times: Vec::new(),
            interval_samples: Vec::new(),
            initial_state,
        }
    }

    pub fn window(&self) -> &WindowProblem {
        &self.window
    }

    pub fn config(&self) -> &WindowConfig {
        &self.cfg
    }

    pub fn frame_times(&self) -> &[f64] {
        &self.frame_times
    }

    pub fn current_state(&self) -> Option<&ImuState> {
        self.window.states.last()
    }

    fn check_gaps(samples: &[ImuSample]) -> Result<()> {
        for pair in samples.windows(2) {
            let gap = pair[1].t - pair[0].t;
            if gap > MAX_IMU_GAP {
                return Err(Error::ImuDataGap {
                    t: pair[0].t,
                    gap,
                    max: MAX_IMU_GAP,
                });
            }
        }
        Ok(())
    }

    fn insert_observations(&mut self, slot: usize, obs: &[(u64, Bearing)]) -> Result<()> {
        let mut sorted: Vec<(u64, Bearing)> = obs.to_vec();
        sorted.sort_by_key(|(id, _)| *id);
        for pair in sorted.windows(2) {
            if pair[0].0 == pair[1].0 {
                return Err(Error::DuplicateObservation {
                    feature: pair[0].0,
                    frame: slot as u64,
                });
            }
        }
        for (fid, bearing) in sorted {
            match self.window.track_index(fid) {
                Ok(ti) => self.window.tracks[ti].push(slot, bearing)?,
                Err(pos) => {
                    let mut track = FeatureTrack::new(fid);
                    track.push(slot, bearing)?;
                    self.window.tracks.insert(pos, track);
                }
            }
        }
        Ok(())
    }

    /// Rotation-compensated mean parallax of the incoming frame against a
    /// reference slot, plus the co-visible feature count.
    fn parallax_against(
        &self,
        ref_slot: usize,
        pred: &ImuState,
        frame: &FrameInput,
    ) -> (f64, usize) {
        let r_ref = camera_rotation(&self.window.states[ref_slot], &self.window.ext);
        let r_new = camera_rotation(pred, &self.window.ext);
        let r_rel = r_ref.transpose() * r_new;
        let mut sum = 0.0;
        let mut count = 0usize;
        for (fid, bearing) in &frame.observations {
            let Ok(ti) = self.window.track_index(*fid) else {
                continue;
            };
            let Some(z_ref) = self.window.tracks[ti].bearing_at(ref_slot) else {
                continue;
            };
            let z_comp = r_rel * bearing.vec();
            if z_comp.z <= 0.1 {
                continue;
            }
            let dx = z_comp.x / z_comp.z - z_ref.x();
            let dy = z_comp.y / z_comp.z - z_ref.y();
            sum += (dx * dx + dy * dy).sqrt();
            count += 1;
        }
        let parallax = if count > 0 { sum / count as f64 } else { 0.0 };
        (parallax, count)
    }

    /// Drop the newest slot's observations (losing that frame's visual
    /// information; its inertial span is kept for merging).
    fn discard_newest_observations(&mut self) {
        let slot = self.window.states.len() - 1;
        self.window.tracks.retain_mut(|track| {
            if track.obs.last().map(|(k, _)| *k) == Some(slot) {
                track.obs.pop();
            }
            !track.obs.is_empty()
        });
    }

    /// Slide the window after marginalization: re-anchor depths, drop
    /// slot-0 observations, shift indices, install the new prior.
    fn shift_window(&mut self, prior: MarginalPrior) {
        if self.window.mode == Mode::StructureBased {
            let states = &self.window.states;
            let ext = &self.window.ext;
            for track in &mut self.window.tracks {
                if track.obs.first().map(|(k, _)| *k) != Some(0) || track.obs.len() < 2 {
                    continue;
                }
                if let Some(lam) = track.inv_depth {
                    let z0 = &track.obs[0].1;
                    let rc0 = camera_rotation(&states[0], ext);
                    let c0 = camera_center(&states[0], ext);
                    let p_w = c0 + rc0 * (z0.vec() / lam);
                    let k1 = track.obs[1].0;
                    let rc1 = camera_rotation(&states[k1], ext);
                    let c1 = camera_center(&states[k1], ext);
                    let depth = (rc1.transpose() * (p_w - c1)).z;
                    track.inv_depth = if depth > MIN_DEPTH {
                        Some((1.0 / depth).clamp(INV_DEPTH_MIN, INV_DEPTH_MAX))
                    } else {
                        None
                    };
                }
            }
        }
        self.window.tracks.retain_mut(|track| {
            if track.obs.first().map(|(k, _)| *k) == Some(0) {
                track.obs.remove(0);
            }
            for (k, _) in &mut track.obs {
                *k -= 1;
            }
            !track.obs.is_empty()
        });
        self.window.states.remove(0);
        self.window.preints.remove(0);
        self.interval_samples.remove(0);
        self.frame_times.remove(0);
        self.window.prior = Some(prior.shifted_down());
        self.window.gauge = None;
        self.window.outliers.clear();
    }

    /// Triangulate inverse depths for tracks that gained a second view.
    fn init_missing_depths(&mut self) {
        let states = &self.window.states;
        let ext = &self.window.ext;
        for track in &mut self.window.tracks {
            if track.inv_depth.is_some() || track.obs.len() < 2 {
                continue;
            }
            let (ka, za) = &track.obs[0];
            let (kb, zb) = track.obs.last().unwrap();
            track.inv_depth = triangulate_inv_depth(&states[*ka], &states[*kb], ext, za, zb)
                .or(Some(1.0 / DEFAULT_DEPTH));
        }
    }

    /// Repropagate intervals whose bias linearization drifted beyond the
    /// first-order correction's validity region.
    fn repropagate_if_needed(&mut self) -> Result<()> {
        for k in 0..self.window.preints.len() {
            let dba = (self.window.states[k].ba - self.window.preints[k].ba_lin).norm();
            let dbg = (self.window.states[k].bg - self.window.preints[k].bg_lin).norm();
            if dba > REPROP_THRESHOLD_BA || dbg > REPROP_THRESHOLD_BG {
                self.window.preints[k] = preintegrate(
                    &self.interval_samples[k],
                    &self.window.states[k].ba,
                    &self.window.states[k].bg,
                    &self.noise,
                )?;
            }
        }
        Ok(())
    }

    /// Ingest one frame together with the IMU samples since the previous
    /// frame (inclusive of both boundary samples).
    pub fn process_keyframe(
        &mut self,
        frame: &FrameInput,
        imu_since_last: &[ImuSample],
    ) -> Result<StepOutcome> {
        if self.window.states.is_empty() {
            let init = self.initial_state;
            self.window.states.push(init);
            self.frame_times.push(frame.t);
            self.window.gauge = Some(GaugeAnchor::for_state(init));
            self.insert_observations(0, &frame.observations)?;
            return Ok(StepOutcome {
                state: init,
                was_keyframe: true,
                solve: None,
                marg_seconds: None,
            });
        }

        Self::check_gaps(imu_since_last)?;
        let newest = *self.window.states.last().unwrap();
        let delta = preintegrate(imu_since_last, &newest.ba, &newest.bg, &self.noise)?;
        let pred = compose_delta(&newest, &delta, &self.window.gravity);

        let n = self.window.states.len();
        let is_keyframe = if n < 3 {
            true
        } else {
            let (parallax, tracked) = self.parallax_against(n - 2, &pred, frame);
            parallax >= self.cfg.keyframe.min_parallax || tracked < self.cfg.keyframe.min_tracked
        };

        let mut marg_seconds = None;
        if is_keyframe {
            if n == self.cfg.window_size {
                let t0 = Instant::now();
                let prior = marginalize_oldest(&self.window, &self.cfg)?;
                marg_seconds = Some(t0.elapsed().as_secs_f64());
                self.shift_window(prior);
            }
            let slot = self.window.states.len();
            self.window.states.push(pred);
            self.window.preints.push(delta);
            self.interval_samples.push(imu_since_last.to_vec());
            self.frame_times.push(frame.t);
            self.window.outliers.clear();
            self.insert_observations(slot, &frame.observations)?;
        } else {
            // replace the newest slot: merge its inertial span, drop its
            // visual observations
            self.discard_newest_observations();
            let mut merged = self.interval_samples.pop().unwrap();
            let last_t = merged.last().map(|m| m.t).unwrap_or(f64::NEG_INFINITY);
            let tail: &[ImuSample] = match imu_since_last.first() {
                Some(first) if first.t <= last_t => &imu_since_last[1..],
                _ => imu_since_last,
            };
            merged.extend_from_slice(tail);
            let base = self.window.states[n - 2];
            let delta2 = preintegrate(&merged, &base.ba, &base.bg, &self.noise)?;
            let pred2 = compose_delta(&base, &delta2, &self.window.gravity);
            let slot = n - 1;
            self.window.states[slot] = pred2;
            *self.window.preints.last_mut().unwrap() = delta2;
            self.interval_samples.push(merged);
            self.frame_times[slot] = frame.t;
            self.window.outliers.clear();
            self.insert_observations(slot, &frame.observations)?;
        }

        if self.window.mode == Mode::StructureBased {
            self.init_missing_depths();
        }

        let solve = if self.window.states.len() >= 2 {
            Some(solve_window(&mut self.window, &self.cfg)?)
        } else {
            None
        };
        self.repropagate_if_needed()?;

        let state = *self.window.states.last().unwrap();
        if !state.biases_sane(self.cfg.max_bias_accel, self.cfg.max_bias_gyro) {
            return Err(Error::SolverDiverged(format!(
                "bias estimates out of range: |ba| = {:.3}, |bg| = {:.3}",
                state.ba.norm(),
                state.bg.norm()
            )));
        }

        Ok(StepOutcome {
            state,
            was_keyframe: is_keyframe,
            solve,
            marg_seconds,
        })
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::factors::Bearing;
    use crate::imu::propagate;
    use crate::manifold::so3_exp;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Camera looks along body +x: camera z -> body x, camera x -> body -y,
    /// camera y -> body -z.
    fn forward_extrinsics() -> Extrinsics {
        Extrinsics {
            r_ic: UnitQuat::new(0.5, -0.5, 0.5, -0.5).unwrap(),
            p_ic: Vec3::new(0.05, 0.0, 0.0),
        }
    }

    /// Looser-than-default sigmas: whitening weights around 1e3 keep
    /// residual roundoff from swamping zero-gradient assertions.
    fn test_noise() -> NoiseParams {
        NoiseParams {
            sigma_g: 2.0e-3,
            sigma_a: 2.0e-2,
            sigma_bg: 2.0e-4,
            sigma_ba: 3.0e-3,
            gravity: Vec3::new(0.0, 0.0, -9.81),
        }
    }

    /// Self-consistent window: states are the exact midpoint integral of a
    /// synthetic IMU stream, and bearings are exact projections of a fixed
    /// landmark cloud through those states. Every residual is zero at the
    /// returned states.
    pub(crate) fn perfect_window(
        n_frames: usize,
        n_landmarks: usize,
        mode: Mode,
        seed: u64,
    ) -> (WindowProblem, WindowConfig, Vec<Vec<ImuSample>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = test_noise();
        let ext = forward_extrinsics();
        let gravity = noise.gravity;

        // gentle forward motion with rotation on all axes
        let imu_rate = 200.0;
        let frame_dt = 0.1;
        let steps_per_frame = (frame_dt * imu_rate) as usize;
        // strong excitation on every axis keeps the scale/bias/gravity
        // modes observable even over a short window
        let gyro_fn = |t: f64| {
            Vec3::new(
                0.5 * (3.1 * t).sin(),
                0.45 * (2.3 * t).cos(),
                0.4 + 0.3 * (1.7 * t).sin(),
            )
        };

        let mut states = vec![ImuState {
            p: Vec3::zeros(),
            v: Vec3::new(0.8, 0.0, 0.0),
            q: UnitQuat::identity(),
            ba: Vec3::zeros(),
            bg: Vec3::zeros(),
        }];
        let mut intervals: Vec<Vec<ImuSample>> = Vec::new();
        for f in 0..n_frames - 1 {
            let t0 = f as f64 * frame_dt;
            let mut samples = Vec::new();
            // specific force that roughly cancels gravity plus a wiggle;
            // consistency comes from propagating, not from a trajectory
            for s in 0..=steps_per_frame {
                let t = t0 + s as f64 / imu_rate;
                let q_up = states.last().unwrap().q;
                let f_body = q_up.rotation_matrix().transpose()
                    * (Vec3::new(
                        1.2 * (2.1 * t).sin(),
                        0.9 * (1.6 * t).cos(),
                        0.6 * (1.1 * t).sin(),
                    ) - gravity);
                samples.push(ImuSample {
                    t,
                    gyro: gyro_fn(t),
                    accel: f_body,
                });
            }
            let next = propagate(states.last().unwrap(), &samples, &noise).unwrap();
            states.push(next);
            intervals.push(samples);
        }

        // landmark cloud ahead of the trajectory
        let landmarks: Vec<Vec3> = (0..n_landmarks)
            .map(|_| {
                Vec3::new(
                    rng.gen_range(2.0..7.0),
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(-2.0..2.0),
                )
            })
            .collect();

        let mut window = WindowProblem::new(ext, mode, gravity);
        window.states = states.clone();
        for samples in &intervals {
            window.preints.push(
                preintegrate(samples, &Vec3::zeros(), &Vec3::zeros(), &noise).unwrap(),
            );
        }
        window.gauge = Some(GaugeAnchor::for_state(states[0]));

        for (fid, lm) in landmarks.iter().enumerate() {
            let mut track = FeatureTrack::new(fid as u64);
            let mut depth0 = None;
            for (slot, st) in states.iter().enumerate() {
                let rc = camera_rotation(st, &ext);
                let c = camera_center(st, &ext);
                let pc = rc.transpose() * (lm - c);
                if pc.z < 0.5 {
                    continue;
                }
                let (x, y) = (pc.x / pc.z, pc.y / pc.z);
                if x.abs() > 1.0 || y.abs() > 1.0 {
                    continue;
                }
                if track.obs.is_empty() {
                    depth0 = Some(pc.z);
                }
                track.push(slot, Bearing::new(x, y).unwrap()).unwrap();
            }
            if track.obs.len() >= 2 {
                if mode == Mode::StructureBased {
                    track.inv_depth = Some(1.0 / depth0.unwrap());
                }
                window.tracks.push(track);
            }
        }

        let cfg = WindowConfig {
            mode,
            window_size: n_frames,
            ..WindowConfig::default()
        };
        (window, cfg, intervals)
    }

    #[test]
    fn gradient_zero_at_perfect_states() {
        for mode in [Mode::Structureless, Mode::StructureBased] {
            let (window, cfg, _) = perfect_window(5, 40, mode, 1);
            assert!(window.tracks.len() >= 10, "fixture too sparse");
            let ne = build_problem(&window, &cfg).unwrap();
            let gmax = ne.g.amax();
            assert!(gmax < 1e-8, "{mode:?}: |g|_inf = {gmax:e}");
        }
    }

    #[test]
    fn normal_equation_dimensions() {
        let (window, cfg, _) = perfect_window(5, 40, Mode::Structureless, 2);
        let ne = build_problem(&window, &cfg).unwrap();
        assert_eq!(ne.h.nrows(), 15 * 5);
        assert!(ne.lambda_ids.is_empty());

        let (window, cfg, _) = perfect_window(5, 40, Mode::StructureBased, 2);
        let m = window.tracks.iter().filter(|t| t.inv_depth.is_some()).count();
        let ne = build_problem(&window, &cfg).unwrap();
        assert_eq!(ne.h.nrows(), 15 * 5 + m);
        assert_eq!(ne.lambda_ids.len(), m);
    }

    /// Brute-force dense stacker: every whitened, IRLS-scaled Jacobian row
    /// goes into one big J; H must equal JᵀJ and g must equal Jᵀr.
    fn stack_reference(window: &WindowProblem, cfg: &WindowConfig) -> (DMatrix<f64>, DVector<f64>) {
        let n = window.states.len();
        let (descs, lambda_ids, _) = visual_descriptors(window, cfg, &BTreeSet::new());
        let pose_dim = STATE_DIM * n;
        let dim = pose_dim + lambda_ids.len();

        let mut rows: Vec<DVector<f64>> = Vec::new();
        let mut resids: Vec<f64> = Vec::new();
        let mut push_row = |row: DVector<f64>, r: f64| {
            rows.push(row);
            resids.push(r);
        };

        if let Some(gauge) = &window.gauge {
            let s0 = &window.states[0];
            let swp = gauge.w_pos.sqrt();
            let dp = s0.p - gauge.state_ref.p;
            for k in 0..3 {
                let mut row = DVector::zeros(dim);
                row[IDX_P + k] = swp;
                push_row(row, swp * dp[k]);
            }
            let swy = gauge.w_yaw.sqrt();
            let d = gauge.yaw_direction();
            let e = d.dot(&boxminus(&s0.q, &gauge.state_ref.q));
            let mut row = DVector::zeros(dim);
            for k in 0..3 {
                row[IDX_TH + k] = swy * d[k];
            }
            push_row(row, swy * e);
            for (w, idx, diff) in [
                (gauge.w_vel, crate::imu::IDX_V, s0.v - gauge.state_ref.v),
                (gauge.w_ba, crate::imu::IDX_BA, s0.ba - gauge.state_ref.ba),
                (gauge.w_bg, crate::imu::IDX_BG, s0.bg - gauge.state_ref.bg),
            ] {
                let sw = w.sqrt();
                for k in 0..3 {
                    let mut row = DVector::zeros(dim);
                    row[idx + k] = sw;
                    push_row(row, sw * diff[k]);
                }
            }
        }

        for k in 0..n - 1 {
            let (r, j_i, j_j) = imu_residual(
                &window.preints[k],
                &window.states[k],
                &window.states[k + 1],
                &window.gravity,
            );
            let li = preint_whitener(&window.preints[k]).unwrap();
            let rw = li * r;
            let jiw = li * j_i;
            let jjw = li * j_j;
            for rr in 0..STATE_DIM {
                let mut row = DVector::zeros(dim);
                for c in 0..STATE_DIM {
                    row[STATE_DIM * k + c] = jiw[(rr, c)];
                    row[STATE_DIM * (k + 1) + c] = jjw[(rr, c)];
                }
                push_row(row, rw[rr]);
            }
        }

        let inv_sigma = 1.0 / cfg.sigma_vis;
        for desc in &descs {
            match eval_visual(desc, &window.states, window, cfg, None) {
                Some(VisualEval::Epi(e)) => {
                    let rw = e.r * inv_sigma;
                    let (_, w) = huber_weight(rw * rw, &cfg.huber);
                    let sw = w.sqrt();
                    let mut row = DVector::zeros(dim);
                    for c in 0..STATE_DIM {
                        row[STATE_DIM * desc.i + c] = sw * e.j_i[(0, c)] * inv_sigma;
                        row[STATE_DIM * desc.j + c] = sw * e.j_j[(0, c)] * inv_sigma;
                    }
                    push_row(row, sw * rw);
                }
                Some(VisualEval::Repro(e)) => {
                    let rw = e.r * inv_sigma;
                    let (_, w) = huber_weight(rw.norm_squared(), &cfg.huber);
                    let sw = w.sqrt();
                    let col = pose_dim + desc.lam_col.unwrap();
                    for rr in 0..2 {
                        let mut row = DVector::zeros(dim);
                        for c in 0..STATE_DIM {
                            row[STATE_DIM * desc.i + c] = sw * e.j_i[(rr, c)] * inv_sigma;
                            row[STATE_DIM * desc.j + c] = sw * e.j_j[(rr, c)] * inv_sigma;
                        }
                        row[col] = sw * e.j_lambda[rr] * inv_sigma;
                        push_row(row, sw * rw[rr]);
                    }
                }
                None => {}
            }
        }

        let mut big_j = DMatrix::zeros(rows.len(), dim);
        let mut big_r = DVector::zeros(rows.len());
        for (i, (row, r)) in rows.iter().zip(resids.iter()).enumerate() {
            big_j.row_mut(i).copy_from(&row.transpose());
            big_r[i] = *r;
        }
        (big_j.transpose() * &big_j, big_j.transpose() * big_r)
    }

    #[test]
    fn assembly_matches_dense_stacker() {
        for mode in [Mode::Structureless, Mode::StructureBased] {
            let (mut window, cfg, _) = perfect_window(3, 30, mode, 3);
            window.tracks.truncate(5);
            // perturb so residuals, IRLS weights, and the gauge are active
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            for s in window.states.iter_mut().skip(1) {
                s.p += Vec3::new(
                    rng.gen_range(-0.05..0.05),
                    rng.gen_range(-0.05..0.05),
                    rng.gen_range(-0.05..0.05),
                );
                s.q = crate::manifold::boxplus(
                    &s.q,
                    &Vec3::new(
                        rng.gen_range(-0.02..0.02),
                        rng.gen_range(-0.02..0.02),
                        rng.gen_range(-0.02..0.02),
                    ),
                );
            }
            let ne = build_problem(&window, &cfg).unwrap();
            let (h_ref, g_ref) = stack_reference(&window, &cfg);
            let h_err = (&ne.h - &h_ref).amax() / h_ref.amax().max(1.0);
            let g_err = (&ne.g - &g_ref).amax() / g_ref.amax().max(1.0);
            assert!(h_err < 1e-10, "{mode:?}: H mismatch {h_err:e}");
            assert!(g_err < 1e-10, "{mode:?}: g mismatch {g_err:e}");
        }
    }

    #[test]
    fn lm_from_truth_converges_immediately() {
        for mode in [Mode::Structureless, Mode::StructureBased] {
            let (mut window, cfg, _) = perfect_window(5, 40, mode, 4);
            let report = solve_window(&mut window, &cfg).unwrap();
            assert!(report.iterations <= 2, "{mode:?}: {}", report.iterations);
            assert!(
                report.final_cost < 1e-16,
                "{mode:?}: cost {:e}",
                report.final_cost
            );
        }
    }

    #[test]
    fn lm_recovers_perturbed_states() {
        let (mut window, mut cfg, _) = perfect_window(6, 60, Mode::Structureless, 5);
        cfg.lm.max_iterations = 500;
        cfg.lm.cost_tolerance = 1e-14;
        let truth = window.states.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for s in window.states.iter_mut().skip(1) {
            let dir = Vec3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            )
            .normalize();
            s.p += 0.05 * dir;
            s.q = crate::manifold::boxplus(
                &s.q,
                &(1.0f64.to_radians()
                    * Vec3::new(
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    )
                    .normalize()),
            );
        }
        let report = solve_window(&mut window, &cfg).unwrap();
        println!("iters={} init={:e} final={:e}", report.iterations, report.initial_cost, report.final_cost);
        for (k, (est, tru)) in window.states.iter().zip(truth.iter()).enumerate() {
            println!("state {k}: dp={:e} dth={:e} dba={:e} dv={:e}", (est.p-tru.p).norm(), boxminus(&est.q,&tru.q).norm(), (est.ba-tru.ba).norm(), (est.v-tru.v).norm());
        }
        assert!(report.final_cost < report.initial_cost);
        for (est, tru) in window.states.iter().zip(truth.iter()) {
            assert!(
                (est.p - tru.p).norm() < 1e-5,
                "position error {:e}",
                (est.p - tru.p).norm()
            );
            assert!(
                boxminus(&est.q, &tru.q).norm() < 1e-5,
                "rotation error {:e}",
                boxminus(&est.q, &tru.q).norm()
            );
        }
        // accepted-step costs never increase
        for pair in report.cost_history.windows(2) {
            assert!(pair[1] <= pair[0] * (1.0 + 1e-12));
        }
    }

    #[test]
    fn cross_mode_agreement_after_perturbation() {
        let mut results = Vec::new();
        for mode in [Mode::Structureless, Mode::StructureBased] {
            let (mut window, mut cfg, _) = perfect_window(6, 60, mode, 5);
            cfg.lm.max_iterations = 50;
            cfg.lm.cost_tolerance = 1e-14;
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            for s in window.states.iter_mut().skip(1) {
                s.p += Vec3::new(
                    rng.gen_range(-0.05..0.05),
                    rng.gen_range(-0.05..0.05),
                    rng.gen_range(-0.05..0.05),
                );
                s.q = crate::manifold::boxplus(
                    &s.q,
                    &Vec3::new(
                        rng.gen_range(-0.017..0.017),
                        rng.gen_range(-0.017..0.017),
                        rng.gen_range(-0.017..0.017),
                    ),
                );
            }
            let report = solve_window(&mut window, &cfg).unwrap();
            assert!(report.final_cost <= report.initial_cost);
            results.push(window.states.clone());
        }
        for (a, b) in results[0].iter().zip(results[1].iter()) {
            assert!(
                (a.p - b.p).norm() < 1e-3,
                "modes disagree by {:e}",
                (a.p - b.p).norm()
            );
        }
    }

    #[test]
    fn window_h_nonsingular_with_gauge() {
        // Jacobi-normalize before the eigencheck: raw H spans ~1e10 from
        // the gauge anchor, which would swamp the solver's resolution
        let (window, cfg, _) = perfect_window(5, 40, Mode::Structureless, 8);
        let ne = build_problem(&window, &cfg).unwrap();
        let n = ne.h.nrows();
        let mut scaled = ne.h.clone();
        let d: Vec<f64> = (0..n).map(|i| ne.h[(i, i)].max(1e-300).sqrt()).collect();
        for r in 0..n {
            for c in 0..n {
                scaled[(r, c)] /= d[r] * d[c];
            }
        }
        let eig = scaled.symmetric_eigen();
        let min_eig = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(min_eig > 1e-10, "normalized min eigenvalue {min_eig:e}");
    }

    #[test]
    fn marginal_prior_psd_and_bookkeeping() {
        for mode in [Mode::Structureless, Mode::StructureBased] {
            let (window, cfg, _) = perfect_window(5, 40, mode, 9);
            let prior = marginalize_oldest(&window, &cfg).unwrap();
            // PSD up to Schur roundoff, which scales with the largest
            // eigenvalue
            let max_eig = prior
                .h
                .clone()
                .symmetric_eigen()
                .eigenvalues
                .iter()
                .cloned()
                .fold(0.0f64, f64::max);
            assert!(
                prior.min_eig_raw > -1e-9 * max_eig.max(1.0),
                "{mode:?}: min {:e} vs max {max_eig:e}",
                prior.min_eig_raw
            );
            assert!(prior.index_map.contains(&1));
            assert!(!prior.index_map.contains(&0));
        }
    }

    #[test]
    fn marginalization_without_visual_factors_is_imu_schur() {
        // drop every track that observes slot 0, so only the gauge and the
        // first preintegration factor touch the marginalized state
        let (mut window, cfg, _) = perfect_window(4, 40, Mode::Structureless, 10);
        window.tracks.retain(|t| t.obs.iter().all(|(k, _)| *k != 0));
        let prior = marginalize_oldest(&window, &cfg).unwrap();
        assert_eq!(prior.index_map, vec![1]);

        // manual Schur of [gauge + preint(0,1)] over slot 0
        let dim = 2 * STATE_DIM;
        let mut h = DMatrix::zeros(dim, dim);
        let mut b = DVector::zeros(dim);
        let gauge = *window.gauge.as_ref().unwrap();
        gauge.accumulate(&window.states[0], &mut h, &mut b, 0);
        let (r, j_i, j_j) = imu_residual(
            &window.preints[0],
            &window.states[0],
            &window.states[1],
            &window.gravity,
        );
        let li = preint_whitener(&window.preints[0]).unwrap();
        let (rw, jiw, jjw) = (li * r, li * j_i, li * j_j);
        for a in 0..STATE_DIM {
            for c in 0..STATE_DIM {
                let mut hij = 0.0;
                let mut hii = 0.0;
                let mut hjj = 0.0;
                for rr in 0..STATE_DIM {
                    hii += jiw[(rr, a)] * jiw[(rr, c)];
                    hij += jiw[(rr, a)] * jjw[(rr, c)];
                    hjj += jjw[(rr, a)] * jjw[(rr, c)];
                }
                h[(a, c)] += hii;
                h[(a, STATE_DIM + c)] += hij;
                h[(STATE_DIM + c, a)] += hij;
                h[(STATE_DIM + a, STATE_DIM + c)] += hjj;
            }
            let mut bi = 0.0;
            let mut bj = 0.0;
            for rr in 0..STATE_DIM {
                bi += jiw[(rr, a)] * rw[rr];
                bj += jjw[(rr, a)] * rw[rr];
            }
            b[a] += bi;
            b[STATE_DIM + a] += bj;
        }
        let (h_ref, b_ref) = schur_marginalize(&h, &b, STATE_DIM);
        // the stored prior went through the clamped eigendecomposition, so
        // allow its reconstruction roundoff
        let h_err = (&prior.h - &h_ref).norm() / h_ref.norm().max(1.0);
        let b_err = (&prior.b - &b_ref).norm() / b_ref.norm().max(1.0);
        assert!(h_err < 1e-8, "H mismatch {h_err:e}");
        assert!(b_err < 1e-8, "b mismatch {b_err:e}");
    }

    #[test]
    fn underdetermined_window_rejected() {
        let window = WindowProblem::new(
            forward_extrinsics(),
            Mode::Structureless,
            test_noise().gravity,
        );
        let cfg = WindowConfig::default();
        assert!(matches!(
            build_problem(&window, &cfg),
            Err(Error::Underdetermined(0))
        ));
    }

    #[test]
    fn estimator_streams_frames_and_replaces_non_keyframes() {
        // stationary scene: after bootstrap every frame is a non-keyframe
        // and the window stops growing
        let noise = test_noise();
        let ext = forward_extrinsics();
        let mut cfg = WindowConfig {
            mode: Mode::Structureless,
            ..WindowConfig::default()
        };
        cfg.keyframe.min_tracked = 5;
        let init = ImuState::at_rest();
        let mut est = Estimator::new(cfg, noise, ext, init);

        let landmarks: Vec<Vec3> = (0..30)
            .map(|i| {
                let a = i as f64 * 0.21;
                Vec3::new(4.0 + (a * 1.3).sin(), 2.5 * a.sin(), 1.5 * (a * 0.7).cos())
            })
            .collect();
        let observe = |state: &ImuState| -> Vec<(u64, Bearing)> {
            landmarks
                .iter()
                .enumerate()
                .filter_map(|(fid, lm)| {
                    let rc = camera_rotation(state, &ext);
                    let pc = rc.transpose() * (lm - camera_center(state, &ext));
                    if pc.z < 0.5 {
                        return None;
                    }
                    Bearing::new(pc.x / pc.z, pc.y / pc.z)
                        .ok()
                        .map(|b| (fid as u64, b))
                })
                .collect()
        };

        let gravity = noise.gravity;
        let mut produced_non_keyframe = false;
        for f in 0..8 {
            let t = f as f64 * 0.1;
            let samples: Vec<ImuSample> = (0..=20)
                .map(|s| ImuSample {
                    t: (f - 1).max(0) as f64 * 0.1 + s as f64 / 200.0,
                    gyro: Vec3::zeros(),
                    accel: -gravity,
                })
                .collect();
            let frame = FrameInput {
                t,
                observations: observe(&init),
            };
            let out = est
                .process_keyframe(&frame, if f == 0 { &[] } else { &samples })
                .unwrap();
            if f >= 3 {
                assert!(!out.was_keyframe, "stationary frame {f} became keyframe");
                produced_non_keyframe = true;
                assert_eq!(est.window().states.len(), 3);
            }
            assert!((out.state.p - init.p).norm() < 1e-6);
        }
        assert!(produced_non_keyframe);
    }
}

