//! File formats and configuration.
//!
//! - `imu.csv`: EuRoC ASL layout, one header line then
//!   `timestamp_ns,gx,gy,gz,ax,ay,az` per sample.
//! - `tracks.csv`: precomputed front-end output, one header line then
//!   `feature_id,frame_id,timestamp_ns,u_px,v_px` per observation.
//! - trajectory files: TUM convention, `t tx ty tz qx qy qz qw` per line,
//!   `#` comments, quaternion in xyzw order.
//!
//! Timestamps are integer nanoseconds on disk and are converted to seconds
//! by exact integer splitting, so a write/read round trip is lossless.
//! Configuration is a TOML file; see the repository README for the schema.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{KeyframePolicy, LmParams, Mode, WindowConfig};
use crate::eval::TrajPose;
use crate::factors::{Bearing, Extrinsics, FeatureTrack, HuberParams, PairPolicy};
use crate::imu::{ImuSample, NoiseParams};
use crate::manifold::{UnitQuat, Vec3};
use crate::sim::{Intrinsics, PixelObservation, SceneSpec, SimScene, TrajectorySpec};

/// Exact integer split of nanoseconds into seconds.
pub fn ns_to_seconds(ns: i64) -> f64 {
    (ns / 1_000_000_000) as f64 + (ns % 1_000_000_000) as f64 * 1e-9
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

fn is_header(line: &str) -> bool {
    let t = line.trim_start();
    t.starts_with('#') || t.chars().next().map(|c| c.is_alphabetic()).unwrap_or(false)
}

/// Load an EuRoC-style IMU CSV. Nanosecond timestamps are parsed as
/// integers before conversion; row order must be strictly increasing.
pub fn load_imu_csv(path: &Path) -> Result<Vec<ImuSample>> {
    let file = fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut samples: Vec<ImuSample> = Vec::new();
    let mut last_ns: Option<i64> = None;
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || (idx == 0 && is_header(trimmed)) || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').map(|f| f.trim()).collect();
        if fields.len() != 7 {
            return Err(parse_err(
                path,
                lineno,
                format!("expected 7 comma-separated fields, got {}", fields.len()),
            ));
        }
        let ns: i64 = fields[0]
            .parse()
            .map_err(|e| parse_err(path, lineno, format!("bad timestamp: {e}")))?;
        if let Some(prev) = last_ns {
            if ns <= prev {
                return Err(parse_err(path, lineno, "timestamp not increasing"));
            }
        }
        last_ns = Some(ns);
        let mut vals = [0.0f64; 6];
        for (k, v) in vals.iter_mut().enumerate() {
            *v = fields[k + 1]
                .parse()
                .map_err(|e| parse_err(path, lineno, format!("bad field {}: {e}", k + 1)))?;
        }
        samples.push(ImuSample {
            t: ns_to_seconds(ns),
            gyro: Vec3::new(vals[0], vals[1], vals[2]),
            accel: Vec3::new(vals[3], vals[4], vals[5]),
        });
    }
    Ok(samples)
}

/// Write an IMU CSV from (nanosecond timestamp, sample) pairs.
pub fn write_imu_csv<'a, I>(path: &Path, rows: I) -> Result<()>
where
    I: IntoIterator<Item = (i64, &'a ImuSample)>,
{
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(
        w,
        "#timestamp [ns],w_x [rad s^-1],w_y [rad s^-1],w_z [rad s^-1],a_x [m s^-2],a_y [m s^-2],a_z [m s^-2]"
    )?;
    for (ns, s) in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            ns, s.gyro.x, s.gyro.y, s.gyro.z, s.accel.x, s.accel.y, s.accel.z
        )?;
    }
    Ok(())
}

/// Feature tracks grouped from a pixel-observation CSV; observation indices
/// are global frame ids.
#[derive(Debug, Clone)]
pub struct LoadedTracks {
    pub tracks: Vec<FeatureTrack>,
    /// Frame id to timestamp, seconds.
    pub frame_times: BTreeMap<usize, f64>,
}

/// Load a tracks CSV and convert pixels to normalized coordinates through
/// the intrinsics.
pub fn load_tracks_csv(path: &Path, intr: &Intrinsics) -> Result<LoadedTracks> {
    let file = fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut per_feature: BTreeMap<u64, Vec<(usize, f64, f64)>> = BTreeMap::new();
    let mut frame_times = BTreeMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || (idx == 0 && is_header(trimmed)) || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').map(|f| f.trim()).collect();
        if fields.len() != 5 {
            return Err(parse_err(
                path,
                lineno,
                format!("expected 5 comma-separated fields, got {}", fields.len()),
            ));
        }
        let fid: u64 = fields[0]
            .parse()
            .map_err(|e| parse_err(path, lineno, format!("bad feature id: {e}")))?;
        let frame: usize = fields[1]
            .parse()
            .map_err(|e| parse_err(path, lineno, format!("bad frame id: {e}")))?;
        let ns: i64 = fields[2]
            .parse()
            .map_err(|e| parse_err(path, lineno, format!("bad timestamp: {e}")))?;
        let u: f64 = fields[3]
            .parse()
            .map_err(|e| parse_err(path, lineno, format!("bad u: {e}")))?;
        let v: f64 = fields[4]
            .parse()
            .map_err(|e| parse_err(path, lineno, format!("bad v: {e}")))?;
        frame_times.insert(frame, ns_to_seconds(ns));
        per_feature.entry(fid).or_default().push((frame, u, v));
    }

    let mut tracks = Vec::with_capacity(per_feature.len());
    for (fid, mut obs) in per_feature {
        obs.sort_by_key(|(frame, _, _)| *frame);
        for pair in obs.windows(2) {
            if pair[0].0 == pair[1].0 {
                return Err(Error::DuplicateObservation {
                    feature: fid,
                    frame: pair[0].0 as u64,
                });
            }
        }
        let mut track = FeatureTrack::new(fid);
        for (frame, u, v) in obs {
            let x = (u - intr.cx) / intr.fx;
            let y = (v - intr.cy) / intr.fy;
            track.push(frame, Bearing::new(x, y)?)?;
        }
        tracks.push(track);
    }
    Ok(LoadedTracks {
        tracks,
        frame_times,
    })
}

/// Write the simulator's pixel observations as a tracks CSV.
pub fn write_tracks_csv(path: &Path, scene: &SimScene) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "#feature_id,frame_id,timestamp [ns],u [px],v [px]")?;
    let mut rows: Vec<&PixelObservation> = scene.observations.iter().collect();
    rows.sort_by_key(|o| (o.frame, o.feature_id));
    for o in rows {
        writeln!(w, "{},{},{},{},{}", o.feature_id, o.frame, o.t_ns, o.u, o.v)?;
    }
    Ok(())
}

/// Read a TUM trajectory file. Quaternions must be unit within 1e-6 and
/// timestamps strictly increasing.
pub fn read_trajectory(path: &Path) -> Result<Vec<TrajPose>> {
    let file = fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut poses: Vec<TrajPose> = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 8 {
            return Err(parse_err(
                path,
                lineno,
                format!("expected 8 whitespace-separated fields, got {}", fields.len()),
            ));
        }
        let mut vals = [0.0f64; 8];
        for (k, v) in vals.iter_mut().enumerate() {
            *v = fields[k]
                .parse()
                .map_err(|e| parse_err(path, lineno, format!("bad field {k}: {e}")))?;
        }
        let (t, px, py, pz, qx, qy, qz, qw) = (
            vals[0], vals[1], vals[2], vals[3], vals[4], vals[5], vals[6], vals[7],
        );
        let norm = (qw * qw + qx * qx + qy * qy + qz * qz).sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(parse_err(
                path,
                lineno,
                format!("quaternion norm {norm} deviates from 1 by more than 1e-6"),
            ));
        }
        if let Some(prev) = poses.last() {
            if t <= prev.t {
                return Err(parse_err(path, lineno, "timestamp not increasing"));
            }
        }
        poses.push(TrajPose {
            t,
            p: Vec3::new(px, py, pz),
            q: UnitQuat::new(qw, qx, qy, qz).map_err(|_| {
                parse_err(path, lineno, "degenerate quaternion")
            })?,
        });
    }
    Ok(poses)
}

/// Write a TUM trajectory file (xyzw quaternion order).
pub fn write_trajectory(path: &Path, poses: &[TrajPose]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "# timestamp tx ty tz qx qy qz qw")?;
    for p in poses {
        writeln!(
            w,
            "{:.9} {:.9} {:.9} {:.9} {:.12} {:.12} {:.12} {:.12}",
            p.t,
            p.p.x,
            p.p.y,
            p.p.z,
            p.q.x(),
            p.q.y(),
            p.q.z(),
            p.q.w()
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowSection {
    pub size: usize,
    pub mode: Mode,
    pub pair_policy: PairPolicy,
    pub huber_delta: f64,
    pub baseline_gate: f64,
    pub min_parallax: f64,
    pub min_tracked: usize,
    pub outlier_gate: f64,
    pub reject_outliers: bool,
    pub parallel: bool,
    pub max_bias_accel: f64,
    pub max_bias_gyro: f64,
}

impl Default for WindowSection {
    fn default() -> Self {
        let d = WindowConfig::default();
        WindowSection {
            size: d.window_size,
            mode: d.mode,
            pair_policy: d.pair_policy,
            huber_delta: d.huber.delta,
            baseline_gate: d.baseline_gate,
            min_parallax: d.keyframe.min_parallax,
            min_tracked: d.keyframe.min_tracked,
            outlier_gate: d.outlier_gate,
            reject_outliers: d.reject_outliers,
            parallel: d.parallel,
            max_bias_accel: d.max_bias_accel,
            max_bias_gyro: d.max_bias_gyro,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSection {
    pub sigma_g: f64,
    pub sigma_a: f64,
    pub sigma_bg: f64,
    pub sigma_ba: f64,
    /// Pixel noise assumed by the estimator when whitening visual
    /// residuals, px.
    pub pixel_sigma: f64,
    pub gravity: [f64; 3],
}

impl Default for NoiseSection {
    fn default() -> Self {
        let d = NoiseParams::default();
        NoiseSection {
            sigma_g: d.sigma_g,
            sigma_a: d.sigma_a,
            sigma_bg: d.sigma_bg,
            sigma_ba: d.sigma_ba,
            pixel_sigma: 1.5,
            gravity: [d.gravity.x, d.gravity.y, d.gravity.z],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtrinsicsSection {
    /// Camera-to-IMU rotation quaternion, wxyz order.
    pub q_ic: [f64; 4],
    /// Camera position in the IMU frame, m.
    pub p_ic: [f64; 3],
}

impl Default for ExtrinsicsSection {
    fn default() -> Self {
        // camera z forward along body x, camera x right (body -y),
        // camera y down (body -z)
        ExtrinsicsSection {
            q_ic: [0.5, -0.5, 0.5, -0.5],
            p_ic: [0.05, 0.0, 0.0],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSection {
    pub trajectory: TrajectorySpec,
    pub scene: SceneSpec,
    /// True constant accelerometer bias injected into the stream, m/s².
    pub bias_accel: [f64; 3],
    /// True constant gyroscope bias, rad/s.
    pub bias_gyro: [f64; 3],
}

impl Default for SimSection {
    fn default() -> Self {
        SimSection {
            trajectory: TrajectorySpec::default(),
            scene: SceneSpec::default(),
            bias_accel: [0.02, -0.015, 0.01],
            bias_gyro: [0.002, -0.001, 0.0015],
        }
    }
}

/// The full configuration file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub window: WindowSection,
    pub lm: LmParams,
    pub noise: NoiseSection,
    pub extrinsics: ExtrinsicsSection,
    pub camera: Intrinsics,
    pub sim: SimSection,
}

impl Config {
    pub fn load(path: &Path) -> Result<Config> {
        let text = fs::read_to_string(path)?;
        let cfg: Config = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window.size < 3 {
            return Err(Error::Config("window.size must be at least 3".into()));
        }
        for (name, v) in [
            ("noise.sigma_g", self.noise.sigma_g),
            ("noise.sigma_a", self.noise.sigma_a),
            ("noise.sigma_bg", self.noise.sigma_bg),
            ("noise.sigma_ba", self.noise.sigma_ba),
            ("noise.pixel_sigma", self.noise.pixel_sigma),
        ] {
            if v <= 0.0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        let g = Vec3::new(self.noise.gravity[0], self.noise.gravity[1], self.noise.gravity[2]);
        if !(9.5..=10.1).contains(&g.norm()) {
            return Err(Error::Config(format!(
                "gravity norm {:.3} outside [9.5, 10.1]",
                g.norm()
            )));
        }
        if !(0.0..0.5).contains(&self.sim.scene.outlier_fraction) {
            return Err(Error::Config("scene.outlier_fraction must be in [0, 0.5)".into()));
        }
        Ok(())
    }

    pub fn window_config(&self) -> WindowConfig {
        WindowConfig {
            window_size: self.window.size,
            mode: self.window.mode,
            pair_policy: self.window.pair_policy,
            huber: HuberParams {
                delta: self.window.huber_delta,
            },
            lm: self.lm,
            baseline_gate: self.window.baseline_gate,
            keyframe: KeyframePolicy {
                min_parallax: self.window.min_parallax,
                min_tracked: self.window.min_tracked,
            },
            sigma_vis: self.noise.pixel_sigma / self.camera.focal_avg(),
            outlier_gate: self.window.outlier_gate,
            reject_outliers: self.window.reject_outliers,
            parallel: self.window.parallel,
            max_bias_accel: self.window.max_bias_accel,
            max_bias_gyro: self.window.max_bias_gyro,
        }
    }

    pub fn noise_params(&self) -> NoiseParams {
        NoiseParams {
            sigma_g: self.noise.sigma_g,
            sigma_a: self.noise.sigma_a,
            sigma_bg: self.noise.sigma_bg,
            sigma_ba: self.noise.sigma_ba,
            gravity: Vec3::new(
                self.noise.gravity[0],
                self.noise.gravity[1],
                self.noise.gravity[2],
            ),
        }
    }

    pub fn extrinsics(&self) -> Result<Extrinsics> {
        let q = self.extrinsics.q_ic;
        Ok(Extrinsics {
            r_ic: UnitQuat::new(q[0], q[1], q[2], q[3])?,
            p_ic: Vec3::new(
                self.extrinsics.p_ic[0],
                self.extrinsics.p_ic[1],
                self.extrinsics.p_ic[2],
            ),
        })
    }

    /// Scene spec with the shared camera intrinsics injected.
    pub fn scene_spec(&self) -> SceneSpec {
        SceneSpec {
            intrinsics: self.camera,
            ..self.sim.scene
        }
    }
}
