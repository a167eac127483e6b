//! Ground-truth trajectory, IMU stream, and feature-track synthesis.
//!
//! Trajectories are analytic, so sampled velocities and body rates are exact
//! derivatives and residual-zero tests can run at machine precision. All
//! randomness comes from ChaCha8, a counter-based stream cipher with a
//! portable, documented output sequence: a fixed seed reproduces streams
//! bit-for-bit on any platform.
//!
//! Timestamps live on an integer nanosecond grid, so writing them to file
//! and reading them back is lossless.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::factors::Extrinsics;
use crate::imu::{ImuSample, NoiseParams};
use crate::io::ns_to_seconds;
use crate::manifold::{so3_exp, UnitQuat, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrajectoryKind {
    Circle,
    Lissajous,
    Corridor,
}

/// Analytic trajectory parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct TrajectorySpec {
    pub kind: TrajectoryKind,
    /// Total duration, s.
    pub duration: f64,
    /// IMU sampling rate, Hz.
    pub imu_rate: f64,
    /// Camera frame rate, Hz; must divide the IMU rate.
    pub frame_rate: f64,
    /// Circle radius / lissajous amplitude / corridor sway amplitude, m.
    pub amplitude: f64,
    /// Circle and lissajous angular rate / corridor sway rate, rad/s.
    pub angular_rate: f64,
    /// Corridor forward speed, m/s.
    pub speed: f64,
    /// Roll oscillation, rad and rad/s; keeps all gyro axes excited.
    pub roll_amplitude: f64,
    pub roll_rate: f64,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        TrajectorySpec {
            kind: TrajectoryKind::Circle,
            duration: 60.0,
            imu_rate: 200.0,
            frame_rate: 10.0,
            amplitude: 3.0,
            angular_rate: 0.5,
            speed: 1.5,
            roll_amplitude: 0.1,
            roll_rate: 1.0,
        }
    }
}

/// Landmark placement scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Placement {
    /// Spherical shell around the origin; radius drawn from the depth range.
    Shell,
    /// Two walls flanking a corridor along +x.
    Walls,
}

/// Pinhole intrinsics; the image spans `[0, 2cx] x [0, 2cy]`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Default for Intrinsics {
    fn default() -> Self {
        Intrinsics {
            fx: 460.0,
            fy: 460.0,
            cx: 376.0,
            cy: 240.0,
        }
    }
}

impl Intrinsics {
    pub fn focal_avg(&self) -> f64 {
        0.5 * (self.fx + self.fy)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub landmark_count: usize,
    pub placement: Placement,
    /// Landmark distance range, m (shell radius / corridor wall offset and
    /// visible depth).
    pub depth_min: f64,
    pub depth_max: f64,
    /// Pixel observation noise, px.
    pub pixel_sigma: f64,
    /// Fraction of observations replaced by uniform in-image points.
    pub outlier_fraction: f64,
    pub intrinsics: Intrinsics,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            landmark_count: 600,
            placement: Placement::Shell,
            depth_min: 4.0,
            depth_max: 12.0,
            pixel_sigma: 1.0,
            outlier_fraction: 0.05,
            intrinsics: Intrinsics::default(),
            seed: 42,
        }
    }
}

/// One ground-truth sample with its exact analytic derivatives.
#[derive(Debug, Clone, Copy)]
pub struct TruthSample {
    pub t_ns: i64,
    pub t: f64,
    pub p: Vec3,
    pub v: Vec3,
    pub q: UnitQuat,
    /// Body-frame angular rate, rad/s.
    pub omega_body: Vec3,
    /// World-frame acceleration (second derivative of p), m/s².
    pub accel_world: Vec3,
}

/// Ground truth sampled at the IMU rate, with the camera frame stride.
#[derive(Debug, Clone)]
pub struct Truth {
    pub samples: Vec<TruthSample>,
    pub imu_rate: f64,
    pub frame_rate: f64,
    /// IMU samples per camera frame.
    pub frame_stride: usize,
}

impl Truth {
    pub fn frame_indices(&self) -> Vec<usize> {
        (0..self.samples.len()).step_by(self.frame_stride).collect()
    }
}

/// Position, velocity, acceleration, yaw, and yaw rate at time t.
fn kinematics(spec: &TrajectorySpec, t: f64) -> (Vec3, Vec3, Vec3, f64, f64) {
    match spec.kind {
        TrajectoryKind::Circle => {
            let (r, w) = (spec.amplitude, spec.angular_rate);
            let (s, c) = (w * t).sin_cos();
            let p = Vec3::new(r * c, r * s, 0.0);
            let v = Vec3::new(-r * w * s, r * w * c, 0.0);
            let a = Vec3::new(-r * w * w * c, -r * w * w * s, 0.0);
            (p, v, a, w * t + std::f64::consts::FRAC_PI_2, w)
        }
        TrajectoryKind::Lissajous => {
            let (amp, w) = (spec.amplitude, spec.angular_rate);
            let p = Vec3::new(
                amp * (w * t).sin(),
                0.8 * amp * (2.0 * w * t).sin(),
                0.2 * amp * (3.0 * w * t).sin(),
            );
            let v = Vec3::new(
                amp * w * (w * t).cos(),
                1.6 * amp * w * (2.0 * w * t).cos(),
                0.6 * amp * w * (3.0 * w * t).cos(),
            );
            let a = Vec3::new(
                -amp * w * w * (w * t).sin(),
                -3.2 * amp * w * w * (2.0 * w * t).sin(),
                -1.8 * amp * w * w * (3.0 * w * t).sin(),
            );
            let yaw = v.y.atan2(v.x);
            let h2 = v.x * v.x + v.y * v.y;
            let yaw_rate = (v.x * a.y - v.y * a.x) / h2;
            (p, v, a, yaw, yaw_rate)
        }
        TrajectoryKind::Corridor => {
            let (amp, w, s) = (spec.amplitude, spec.angular_rate, spec.speed);
            let p = Vec3::new(
                s * t,
                amp * (w * t).sin(),
                0.15 * amp * (0.7 * w * t).sin(),
            );
            let v = Vec3::new(
                s,
                amp * w * (w * t).cos(),
                0.105 * amp * w * (0.7 * w * t).cos(),
            );
            let a = Vec3::new(
                0.0,
                -amp * w * w * (w * t).sin(),
                -0.0735 * amp * w * w * (0.7 * w * t).sin(),
            );
            let yaw = v.y.atan2(v.x);
            let h2 = v.x * v.x + v.y * v.y;
            let yaw_rate = (v.x * a.y - v.y * a.x) / h2;
            (p, v, a, yaw, yaw_rate)
        }
    }
}

/// Sample the analytic trajectory at the IMU rate. The orientation follows
/// the (horizontal) velocity direction in yaw with a sinusoidal roll; both
/// angles and their rates are closed-form, so `omega_body` is exact.
pub fn generate_truth(spec: &TrajectorySpec) -> Truth {
    let n_steps = (spec.duration * spec.imu_rate).round() as usize;
    let ns_per_step = (1e9 / spec.imu_rate).round() as i64;
    let frame_stride = (spec.imu_rate / spec.frame_rate).round() as usize;

    let mut samples = Vec::with_capacity(n_steps + 1);
    for k in 0..=n_steps {
        let t_ns = k as i64 * ns_per_step;
        let t = ns_to_seconds(t_ns);
        let (p, v, a, yaw, yaw_rate) = kinematics(spec, t);
        let roll = spec.roll_amplitude * (spec.roll_rate * t).sin();
        let roll_rate = spec.roll_amplitude * spec.roll_rate * (spec.roll_rate * t).cos();
        // q = Rz(yaw) * Rx(roll): body x tracks the heading
        let q = so3_exp(&Vec3::new(0.0, 0.0, yaw)).compose(&so3_exp(&Vec3::new(roll, 0.0, 0.0)));
        let omega_body = Vec3::new(
            roll_rate,
            yaw_rate * roll.sin(),
            yaw_rate * roll.cos(),
        );
        samples.push(TruthSample {
            t_ns,
            t,
            p,
            v,
            q,
            omega_body,
            accel_world: a,
        });
    }
    Truth {
        samples,
        imu_rate: spec.imu_rate,
        frame_rate: spec.frame_rate,
        frame_stride,
    }
}

/// Corrupt the exact body rates and specific forces with constant biases
/// and white noise at the sample rate.
pub fn synthesize_imu(
    truth: &Truth,
    noise: &NoiseParams,
    bias_truth: (Vec3, Vec3),
    seed: u64,
) -> Vec<ImuSample> {
    let (ba, bg) = bias_truth;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let sqrt_rate = truth.imu_rate.sqrt();
    let sg = noise.sigma_g * sqrt_rate;
    let sa = noise.sigma_a * sqrt_rate;
    let mut randn = || -> Vec3 {
        Vec3::new(
            StandardNormal.sample(&mut rng),
            StandardNormal.sample(&mut rng),
            StandardNormal.sample(&mut rng),
        )
    };
    truth
        .samples
        .iter()
        .map(|s| {
            let r_t = s.q.rotation_matrix().transpose();
            let specific_force = r_t * (s.accel_world - noise.gravity);
            ImuSample {
                t: s.t,
                gyro: s.omega_body + bg + sg * randn(),
                accel: specific_force + ba + sa * randn(),
            }
        })
        .collect()
}

/// One pixel-level feature observation; `depth` is the ground-truth depth
/// in the observing camera (not written to file).
#[derive(Debug, Clone, Copy)]
pub struct PixelObservation {
    pub feature_id: u64,
    pub frame: usize,
    pub t_ns: i64,
    pub u: f64,
    pub v: f64,
    pub depth: f64,
    pub is_outlier: bool,
}

#[derive(Debug, Clone)]
pub struct SimScene {
    /// Sorted by frame, then feature id.
    pub observations: Vec<PixelObservation>,
    pub landmarks: Vec<Vec3>,
    pub frame_times_ns: Vec<i64>,
}

fn place_landmarks(truth: &Truth, scene: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<Vec3> {
    match scene.placement {
        Placement::Shell => (0..scene.landmark_count)
            .map(|_| {
                let dir = loop {
                    let v = Vec3::new(
                        StandardNormal.sample(rng),
                        StandardNormal.sample(rng),
                        StandardNormal.sample(rng),
                    );
                    if v.norm() > 1e-6 {
                        break v.normalize();
                    }
                };
                let radius = rng.gen_range(scene.depth_min..scene.depth_max);
                radius * dir
            })
            .collect(),
        Placement::Walls => {
            let x_max = truth.samples.last().map(|s| s.p.x).unwrap_or(10.0);
            (0..scene.landmark_count)
                .map(|_| {
                    let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                    Vec3::new(
                        rng.gen_range(-2.0..x_max + scene.depth_max),
                        side * rng.gen_range(scene.depth_min..scene.depth_min + 1.5),
                        rng.gen_range(-1.0..3.0),
                    )
                })
                .collect()
        }
    }
}

/// Project the landmark cloud through the ground-truth camera poses,
/// producing pixel tracks with noise and outliers.
pub fn synthesize_tracks(truth: &Truth, scene: &SceneSpec, ext: &Extrinsics) -> SimScene {
    let mut rng = ChaCha8Rng::seed_from_u64(scene.seed);
    rng.set_stream(2);
    let landmarks = place_landmarks(truth, scene, &mut rng);

    let mut noise_rng = ChaCha8Rng::seed_from_u64(scene.seed);
    noise_rng.set_stream(3);
    let mut outlier_rng = ChaCha8Rng::seed_from_u64(scene.seed);
    outlier_rng.set_stream(4);

    let k = &scene.intrinsics;
    let (u_max, v_max) = (2.0 * k.cx, 2.0 * k.cy);
    let r_ic = ext.r_ic.rotation_matrix();

    let mut observations = Vec::new();
    let mut frame_times_ns = Vec::new();
    for (frame, &idx) in truth.frame_indices().iter().enumerate() {
        let s = &truth.samples[idx];
        frame_times_ns.push(s.t_ns);
        let r_cam = s.q.rotation_matrix() * r_ic;
        let c = s.p + s.q.rotate(&ext.p_ic);
        for (fid, lm) in landmarks.iter().enumerate() {
            let pc = r_cam.transpose() * (lm - c);
            if pc.z < 0.2 {
                continue;
            }
            let u0 = k.fx * pc.x / pc.z + k.cx;
            let v0 = k.fy * pc.y / pc.z + k.cy;
            if !(0.0..=u_max).contains(&u0) || !(0.0..=v_max).contains(&v0) {
                continue;
            }
            let nu: f64 = StandardNormal.sample(&mut noise_rng);
            let nv: f64 = StandardNormal.sample(&mut noise_rng);
            let (mut u, mut v) = (u0 + scene.pixel_sigma * nu, v0 + scene.pixel_sigma * nv);
            let is_outlier = scene.outlier_fraction > 0.0
                && outlier_rng.gen_bool(scene.outlier_fraction);
            if is_outlier {
                u = outlier_rng.gen_range(0.0..u_max);
                v = outlier_rng.gen_range(0.0..v_max);
            }
            u = u.clamp(0.0, u_max);
            v = v.clamp(0.0, v_max);
            observations.push(PixelObservation {
                feature_id: fid as u64,
                frame,
                t_ns: s.t_ns,
                u,
                v,
                depth: pc.z,
                is_outlier,
            });
        }
    }
    SimScene {
        observations,
        landmarks,
        frame_times_ns,
    }
}
