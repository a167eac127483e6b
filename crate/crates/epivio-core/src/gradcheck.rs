//! Central finite-difference verification of every analytic Jacobian in the
//! factor library. The differencing only ever calls the residual functions,
//! so it stays independent of the Jacobian code it checks.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::factors::{
    epipolar_residual, reprojection_residual, Bearing, Extrinsics,
};
use crate::imu::{imu_residual, preintegrate, ImuSample, ImuState, NoiseParams, STATE_DIM};
use crate::manifold::{so3_exp, Vec3};

const FD_STEP: f64 = 1e-6;

/// Outcome of one finite-difference suite.
#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub name: &'static str,
    pub trials: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

impl std::fmt::Display for SuiteResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<22} {} trials  max rel err {:9.3e}  (tol {:.0e})  {}",
            self.name,
            self.trials,
            self.max_rel_err,
            self.tolerance,
            if self.passed() { "ok" } else { "FAIL" }
        )
    }
}

fn rel_err(analytic: &DMatrix<f64>, fd: &DMatrix<f64>) -> f64 {
    (analytic - fd).norm() / fd.norm().max(1.0)
}

fn perturb(x: &ImuState, dim: usize, eps: f64) -> ImuState {
    let mut dx = crate::imu::StateVec::zeros();
    dx[dim] = eps;
    x.retract(&dx)
}

fn random_state(rng: &mut ChaCha8Rng) -> ImuState {
    ImuState {
        p: Vec3::new(
            rng.gen_range(-5.0..5.0),
            rng.gen_range(-5.0..5.0),
            rng.gen_range(-5.0..5.0),
        ),
        v: Vec3::new(
            rng.gen_range(-2.0..2.0),
            rng.gen_range(-2.0..2.0),
            rng.gen_range(-2.0..2.0),
        ),
        q: so3_exp(&Vec3::new(
            rng.gen_range(-1.5..1.5),
            rng.gen_range(-1.5..1.5),
            rng.gen_range(-1.5..1.5),
        )),
        ba: Vec3::new(
            rng.gen_range(-0.05..0.05),
            rng.gen_range(-0.05..0.05),
            rng.gen_range(-0.05..0.05),
        ),
        bg: Vec3::new(
            rng.gen_range(-0.01..0.01),
            rng.gen_range(-0.01..0.01),
            rng.gen_range(-0.01..0.01),
        ),
    }
}

fn random_extrinsics(rng: &mut ChaCha8Rng) -> Extrinsics {
    Extrinsics {
        r_ic: so3_exp(&Vec3::new(
            rng.gen_range(-0.4..0.4),
            rng.gen_range(-0.4..0.4),
            rng.gen_range(-0.4..0.4),
        )),
        p_ic: Vec3::new(
            rng.gen_range(-0.15..0.15),
            rng.gen_range(-0.15..0.15),
            rng.gen_range(-0.15..0.15),
        ),
    }
}

/// Camera geometry with a landmark in front of both cameras, so both
/// residual types are well defined at the linearization point.
fn random_geometry(
    rng: &mut ChaCha8Rng,
) -> (ImuState, ImuState, Extrinsics, Bearing, Bearing, f64) {
    loop {
        let ext = random_extrinsics(rng);
        let xi = random_state(rng);
        let mut xj = random_state(rng);
        // keep a healthy baseline
        xj.p = xi.p
            + Vec3::new(
                rng.gen_range(0.3..1.5),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-0.5..0.5),
            );
        // landmark a few meters along the anchor optical axis
        let rc_i = crate::factors::camera_rotation(&xi, &ext);
        let ci = crate::factors::camera_center(&xi, &ext);
        let depth = rng.gen_range(3.0..10.0);
        let landmark = ci
            + rc_i
                * (Vec3::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), 1.0) * depth);

        let project = |x: &ImuState| -> Option<Bearing> {
            let rc = crate::factors::camera_rotation(x, &ext);
            let c = crate::factors::camera_center(x, &ext);
            let pc = rc.transpose() * (landmark - c);
            if pc.z < 0.5 {
                return None;
            }
            Bearing::new(pc.x / pc.z, pc.y / pc.z).ok()
        };
        let (Some(bi), Some(bj)) = (project(&xi), project(&xj)) else {
            continue;
        };
        let rc_i_t = rc_i.transpose();
        let depth_i = (rc_i_t * (landmark - ci)).z;
        return (xi, xj, ext, bi, bj, depth_i);
    }
}

/// Epipolar residual Jacobians vs central finite differences.
pub fn check_epipolar(trials: usize, seed: u64) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel: f64 = 0.0;
    let mut done = 0;
    while done < trials {
        let (xi, xj, ext, bi, bj, _) = random_geometry(&mut rng);
        let (zi, zj) = (bi.vec(), bj.vec());
        let Some(eval) = epipolar_residual(&xi, &xj, &ext, &zi, &zj, 1e-6) else {
            continue;
        };
        let value = |a: &ImuState, b: &ImuState| -> f64 {
            epipolar_residual(a, b, &ext, &zi, &zj, 1e-6).map(|e| e.r).unwrap()
        };
        let mut fd_i = DMatrix::zeros(1, STATE_DIM);
        let mut fd_j = DMatrix::zeros(1, STATE_DIM);
        for d in 0..STATE_DIM {
            fd_i[(0, d)] =
                (value(&perturb(&xi, d, FD_STEP), &xj) - value(&perturb(&xi, d, -FD_STEP), &xj))
                    / (2.0 * FD_STEP);
            fd_j[(0, d)] =
                (value(&xi, &perturb(&xj, d, FD_STEP)) - value(&xi, &perturb(&xj, d, -FD_STEP)))
                    / (2.0 * FD_STEP);
        }
        let a_i = DMatrix::from_row_slice(1, STATE_DIM, eval.j_i.as_slice());
        let a_j = DMatrix::from_row_slice(1, STATE_DIM, eval.j_j.as_slice());
        max_rel = max_rel.max(rel_err(&a_i, &fd_i)).max(rel_err(&a_j, &fd_j));
        done += 1;
    }
    SuiteResult {
        name: "epipolar",
        trials,
        max_rel_err: max_rel,
        tolerance: 1e-5,
    }
}

/// Reprojection residual Jacobians (both poses and the inverse depth) vs
/// central finite differences.
pub fn check_reprojection(trials: usize, seed: u64) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut max_rel: f64 = 0.0;
    let mut done = 0;
    while done < trials {
        let (xi, xj, ext, bi, bj, depth_i) = random_geometry(&mut rng);
        let lambda = 1.0 / depth_i;
        let Ok(eval) = reprojection_residual(&xi, &xj, &ext, &bi, &bj, lambda) else {
            continue;
        };
        let value = |a: &ImuState, b: &ImuState, lam: f64| -> Option<nalgebra::Vector2<f64>> {
            reprojection_residual(a, b, &ext, &bi, &bj, lam).ok().map(|e| e.r)
        };
        let mut ok = true;
        let mut fd_i = DMatrix::zeros(2, STATE_DIM);
        let mut fd_j = DMatrix::zeros(2, STATE_DIM);
        for d in 0..STATE_DIM {
            let (Some(pi), Some(mi)) = (
                value(&perturb(&xi, d, FD_STEP), &xj, lambda),
                value(&perturb(&xi, d, -FD_STEP), &xj, lambda),
            ) else {
                ok = false;
                break;
            };
            let (Some(pj), Some(mj)) = (
                value(&xi, &perturb(&xj, d, FD_STEP), lambda),
                value(&xi, &perturb(&xj, d, -FD_STEP), lambda),
            ) else {
                ok = false;
                break;
            };
            let col_i = (pi - mi) / (2.0 * FD_STEP);
            let col_j = (pj - mj) / (2.0 * FD_STEP);
            fd_i[(0, d)] = col_i.x;
            fd_i[(1, d)] = col_i.y;
            fd_j[(0, d)] = col_j.x;
            fd_j[(1, d)] = col_j.y;
        }
        if !ok {
            continue;
        }
        let (Some(pl), Some(ml)) = (
            value(&xi, &xj, lambda + FD_STEP),
            value(&xi, &xj, lambda - FD_STEP),
        ) else {
            continue;
        };
        let fd_l = (pl - ml) / (2.0 * FD_STEP);

        let a_i = DMatrix::from_iterator(2, STATE_DIM, eval.j_i.iter().copied());
        let a_j = DMatrix::from_iterator(2, STATE_DIM, eval.j_j.iter().copied());
        let a_l = DMatrix::from_column_slice(2, 1, eval.j_lambda.as_slice());
        let f_l = DMatrix::from_column_slice(2, 1, fd_l.as_slice());
        max_rel = max_rel
            .max(rel_err(&a_i, &fd_i))
            .max(rel_err(&a_j, &fd_j))
            .max(rel_err(&a_l, &f_l));
        done += 1;
    }
    SuiteResult {
        name: "reprojection",
        trials,
        max_rel_err: max_rel,
        tolerance: 1e-5,
    }
}

/// Preintegration residual Jacobians vs central finite differences over
/// random states and random short sample streams.
pub fn check_imu(trials: usize, seed: u64) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
    let noise = NoiseParams::default();
    let mut max_rel: f64 = 0.0;
    for _ in 0..trials {
        let samples: Vec<ImuSample> = (0..=40)
            .map(|k| ImuSample {
                t: k as f64 / 200.0,
                gyro: Vec3::new(
                    rng.gen_range(-0.6..0.6),
                    rng.gen_range(-0.6..0.6),
                    rng.gen_range(-0.6..0.6),
                ),
                accel: Vec3::new(
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(-3.0..3.0),
                    9.81 + rng.gen_range(-3.0..3.0),
                ),
            })
            .collect();
        let ba_lin = Vec3::new(
            rng.gen_range(-0.02..0.02),
            rng.gen_range(-0.02..0.02),
            rng.gen_range(-0.02..0.02),
        );
        let bg_lin = Vec3::new(
            rng.gen_range(-0.005..0.005),
            rng.gen_range(-0.005..0.005),
            rng.gen_range(-0.005..0.005),
        );
        let delta = preintegrate(&samples, &ba_lin, &bg_lin, &noise).unwrap();
        let xi = random_state(&mut rng);
        let xj = random_state(&mut rng);

        let (_, j_i, j_j) = imu_residual(&delta, &xi, &xj, &noise.gravity);
        let value = |a: &ImuState, b: &ImuState| -> crate::imu::StateVec {
            imu_residual(&delta, a, b, &noise.gravity).0
        };
        let mut fd_i = DMatrix::zeros(STATE_DIM, STATE_DIM);
        let mut fd_j = DMatrix::zeros(STATE_DIM, STATE_DIM);
        for d in 0..STATE_DIM {
            let ci = (value(&perturb(&xi, d, FD_STEP), &xj)
                - value(&perturb(&xi, d, -FD_STEP), &xj))
                / (2.0 * FD_STEP);
            let cj = (value(&xi, &perturb(&xj, d, FD_STEP))
                - value(&xi, &perturb(&xj, d, -FD_STEP)))
                / (2.0 * FD_STEP);
            for r in 0..STATE_DIM {
                fd_i[(r, d)] = ci[r];
                fd_j[(r, d)] = cj[r];
            }
        }
        let a_i = DMatrix::from_iterator(STATE_DIM, STATE_DIM, j_i.iter().copied());
        let a_j = DMatrix::from_iterator(STATE_DIM, STATE_DIM, j_j.iter().copied());
        max_rel = max_rel.max(rel_err(&a_i, &fd_i)).max(rel_err(&a_j, &fd_j));
    }
    SuiteResult {
        name: "imu_preintegration",
        trials,
        max_rel_err: max_rel,
        tolerance: 1e-5,
    }
}

/// Run every suite with the given trial count.
pub fn run_all(trials: usize, seed: u64) -> Vec<SuiteResult> {
    vec![
        check_epipolar(trials, seed),
        check_reprojection(trials, seed),
        check_imu(trials, seed),
    ]
}
