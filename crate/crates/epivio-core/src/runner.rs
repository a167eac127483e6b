//! End-to-end dataset runner: feeds frames and IMU slices through the
//! sliding-window estimator and collects the trajectory and per-window
//! timing.

use std::path::Path;

use crate::error::{Error, Result};
use crate::estimator::{Estimator, FrameInput, WindowConfig};
use crate::eval::{BenchReport, TrajPose};
use crate::factors::Extrinsics;
use crate::imu::{ImuSample, ImuState, NoiseParams};
use crate::io;
use crate::manifold::Vec3;
use crate::sim::Intrinsics;

/// A runnable dataset: the raw IMU stream plus per-frame feature
/// observations, sorted by time.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub imu: Vec<ImuSample>,
    pub frames: Vec<FrameInput>,
}

impl Dataset {
    /// Load `imu.csv` and `tracks.csv` from a directory.
    pub fn load(dir: &Path, intr: &Intrinsics) -> Result<Dataset> {
        let imu = io::load_imu_csv(&dir.join("imu.csv"))?;
        let loaded = io::load_tracks_csv(&dir.join("tracks.csv"), intr)?;
        Ok(Dataset {
            imu,
            frames: frames_from_tracks(&loaded),
        })
    }
}

/// Regroup per-feature tracks into per-frame observation sets.
pub fn frames_from_tracks(loaded: &io::LoadedTracks) -> Vec<FrameInput> {
    let mut frames: Vec<FrameInput> = loaded
        .frame_times
        .iter()
        .map(|(_, &t)| FrameInput {
            t,
            observations: Vec::new(),
        })
        .collect();
    let index_of: std::collections::BTreeMap<usize, usize> = loaded
        .frame_times
        .keys()
        .enumerate()
        .map(|(i, &f)| (f, i))
        .collect();
    for track in &loaded.tracks {
        for (frame, bearing) in &track.obs {
            let idx = index_of[frame];
            frames[idx].observations.push((track.feature_id, *bearing));
        }
    }
    frames
}

/// Seed state from the first two poses of a ground-truth trajectory:
/// pose from the first entry, velocity by finite difference, zero biases.
pub fn initial_state_from_trajectory(truth: &[TrajPose]) -> Result<ImuState> {
    if truth.len() < 2 {
        return Err(Error::InsufficientOverlap(truth.len()));
    }
    let v = (truth[1].p - truth[0].p) / (truth[1].t - truth[0].t);
    Ok(ImuState {
        p: truth[0].p,
        v,
        q: truth[0].q,
        ba: Vec3::zeros(),
        bg: Vec3::zeros(),
    })
}

#[derive(Debug, Clone)]
pub struct RunResult {
    /// Newest pose estimate after each processed frame.
    pub trajectory: Vec<TrajPose>,
    pub report: BenchReport,
    /// Tracks with at least two in-window observations, per solved frame.
    pub active_tracks: Vec<usize>,
}

/// Drive the estimator over a dataset. IMU slices passed to each frame
/// include both boundary samples.
pub fn run_estimator(
    dataset: &Dataset,
    cfg: &WindowConfig,
    noise: &NoiseParams,
    ext: &Extrinsics,
    init: ImuState,
) -> Result<RunResult> {
    let mut est = Estimator::new(cfg.clone(), *noise, *ext, init);
    let mut trajectory = Vec::with_capacity(dataset.frames.len());
    let mut report = BenchReport {
        mode: cfg.mode.to_string(),
        ..BenchReport::default()
    };
    let mut active_tracks = Vec::new();

    let eps = 1e-9;
    let mut prev_t: Option<f64> = None;
    for frame in &dataset.frames {
        let slice: &[ImuSample] = match prev_t {
            None => &[],
            Some(t0) => {
                let lo = dataset.imu.partition_point(|s| s.t < t0 - eps);
                let hi = dataset.imu.partition_point(|s| s.t <= frame.t + eps);
                &dataset.imu[lo..hi]
            }
        };
        let out = est.process_keyframe(frame, slice)?;
        prev_t = Some(frame.t);
        trajectory.push(TrajPose {
            t: frame.t,
            p: out.state.p,
            q: out.state.q,
        });
        if let Some(solve) = &out.solve {
            report.solve_ms.push(solve.solve_seconds * 1e3);
            report.iterations.push(solve.iterations);
            active_tracks.push(
                est.window()
                    .tracks
                    .iter()
                    .filter(|t| t.obs.len() >= 2)
                    .count(),
            );
        }
        if let Some(marg) = out.marg_seconds {
            report.marg_ms.push(marg * 1e3);
        }
    }
    Ok(RunResult {
        trajectory,
        report,
        active_tracks,
    })
}
