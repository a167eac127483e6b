//! Trajectory evaluation: timestamp association, closed-form alignment, and
//! absolute trajectory error, plus the per-run benchmark report.

use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use nalgebra::SVD;

use crate::error::{Error, Result};
use crate::manifold::{Mat3, UnitQuat, Vec3};

/// One pose of a TUM-format trajectory.
#[derive(Debug, Clone, Copy)]
pub struct TrajPose {
    pub t: f64,
    pub p: Vec3,
    pub q: UnitQuat,
}

/// Alignment applied before computing ATE. Neither variant estimates scale;
/// the IMU makes scale observable, so an honest evaluation must not remove
/// it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Alignment {
    /// Full 6-dof rigid alignment (rotation from the SVD of the
    /// cross-covariance).
    Se3,
    /// Position plus yaw only: the four dofs VIO cannot observe.
    PosYaw,
}

impl FromStr for Alignment {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "se3" => Ok(Alignment::Se3),
            "posyaw" => Ok(Alignment::PosYaw),
            other => Err(Error::Config(format!(
                "unknown alignment '{other}' (expected se3 or posyaw)"
            ))),
        }
    }
}

/// Nearest-neighbor timestamp association within `max_dt` seconds.
/// Both trajectories must be sorted by time.
pub fn associate(est: &[TrajPose], truth: &[TrajPose], max_dt: f64) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    let mut j0 = 0usize;
    for (i, e) in est.iter().enumerate() {
        while j0 + 1 < truth.len() && truth[j0 + 1].t <= e.t {
            j0 += 1;
        }
        let mut best: Option<(usize, f64)> = None;
        for j in [j0, j0 + 1] {
            if let Some(g) = truth.get(j) {
                let dt = (g.t - e.t).abs();
                if dt <= max_dt && best.map(|(_, d)| dt < d).unwrap_or(true) {
                    best = Some((j, dt));
                }
            }
        }
        if let Some((j, _)) = best {
            pairs.push((i, j));
        }
    }
    pairs
}

/// Rigid transform (R, t) minimizing Σ‖R a_i + t − b_i‖² (no scale).
pub fn align_se3(a: &[Vec3], b: &[Vec3]) -> (Mat3, Vec3) {
    let n = a.len() as f64;
    let mu_a: Vec3 = a.iter().sum::<Vec3>() / n;
    let mu_b: Vec3 = b.iter().sum::<Vec3>() / n;
    let mut w = Mat3::zeros();
    for (pa, pb) in a.iter().zip(b.iter()) {
        w += (pb - mu_b) * (pa - mu_a).transpose();
    }
    let svd = SVD::new(w, true, true);
    let u = svd.u.unwrap();
    let v_t = svd.v_t.unwrap();
    let mut s = Mat3::identity();
    if (u * v_t).determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let r = u * s * v_t;
    let t = mu_b - r * mu_a;
    (r, t)
}

/// Yaw-plus-translation transform minimizing the same objective with the
/// rotation restricted to the gravity axis.
pub fn align_posyaw(a: &[Vec3], b: &[Vec3]) -> (Mat3, Vec3) {
    let n = a.len() as f64;
    let mu_a: Vec3 = a.iter().sum::<Vec3>() / n;
    let mu_b: Vec3 = b.iter().sum::<Vec3>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (pa, pb) in a.iter().zip(b.iter()) {
        let ca = pa - mu_a;
        let cb = pb - mu_b;
        num += ca.x * cb.y - ca.y * cb.x;
        den += ca.x * cb.x + ca.y * cb.y;
    }
    let yaw = num.atan2(den);
    let (sy, cy) = yaw.sin_cos();
    let r = Mat3::new(cy, -sy, 0.0, sy, cy, 0.0, 0.0, 0.0, 1.0);
    let t = mu_b - r * mu_a;
    (r, t)
}

/// RMSE of aligned position errors after nearest-neighbor association
/// (10 ms gate). Needs at least 3 overlapping poses.
pub fn compute_ate(est: &[TrajPose], truth: &[TrajPose], alignment: Alignment) -> Result<f64> {
    let pairs = associate(est, truth, 0.01);
    if pairs.len() < 3 {
        return Err(Error::InsufficientOverlap(pairs.len()));
    }
    let a: Vec<Vec3> = pairs.iter().map(|&(i, _)| est[i].p).collect();
    let b: Vec<Vec3> = pairs.iter().map(|&(_, j)| truth[j].p).collect();
    let (r, t) = match alignment {
        Alignment::Se3 => align_se3(&a, &b),
        Alignment::PosYaw => align_posyaw(&a, &b),
    };
    let sum_sq: f64 = a
        .iter()
        .zip(b.iter())
        .map(|(pa, pb)| (r * pa + t - pb).norm_squared())
        .sum();
    Ok((sum_sq / a.len() as f64).sqrt())
}

/// Per-run benchmark record: every window's solve time, marginalization
/// time, and iteration count, plus the trajectory error when ground truth
/// is available.
#[derive(Debug, Clone, Default)]
pub struct BenchReport {
    pub mode: String,
    pub solve_ms: Vec<f64>,
    pub marg_ms: Vec<f64>,
    pub iterations: Vec<usize>,
    pub ate_m: Option<f64>,
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn percentile(xs: &[f64], q: f64) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mut sorted = xs.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let idx = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1;
    sorted[idx]
}

impl BenchReport {
    pub fn windows(&self) -> usize {
        self.solve_ms.len()
    }

    pub fn solve_ms_mean(&self) -> f64 {
        mean(&self.solve_ms)
    }

    pub fn solve_ms_median(&self) -> f64 {
        percentile(&self.solve_ms, 0.5)
    }

    pub fn solve_ms_p95(&self) -> f64 {
        percentile(&self.solve_ms, 0.95)
    }

    pub fn marg_ms_mean(&self) -> f64 {
        mean(&self.marg_ms)
    }

    pub fn iterations_mean(&self) -> f64 {
        if self.iterations.is_empty() {
            0.0
        } else {
            self.iterations.iter().sum::<usize>() as f64 / self.iterations.len() as f64
        }
    }

    /// Plain-text report; `solve_ms_samples:` is followed by one
    /// full-precision sample per line so the mean can be recomputed.
    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "mode: {}", self.mode)?;
        writeln!(w, "windows: {}", self.windows())?;
        writeln!(w, "solve_ms_mean: {:.6}", self.solve_ms_mean())?;
        writeln!(w, "solve_ms_median: {:.6}", self.solve_ms_median())?;
        writeln!(w, "solve_ms_p95: {:.6}", self.solve_ms_p95())?;
        writeln!(w, "marg_ms_mean: {:.6}", self.marg_ms_mean())?;
        writeln!(w, "iterations_mean: {:.3}", self.iterations_mean())?;
        if let Some(ate) = self.ate_m {
            writeln!(w, "ate_m: {ate:.6}")?;
        }
        writeln!(w, "solve_ms_samples:")?;
        for s in &self.solve_ms {
            writeln!(w, "{s}")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        Ok(())
    }

    /// Parse a report back; used by tests and the bench comparison.
    pub fn load(path: &Path) -> Result<BenchReport> {
        let text = std::fs::read_to_string(path)?;
        let mut report = BenchReport::default();
        let mut in_samples = false;
        for line in text.lines() {
            if in_samples {
                if !line.trim().is_empty() {
                    report.solve_ms.push(line.trim().parse().map_err(|e| {
                        Error::Config(format!("bad sample line '{line}': {e}"))
                    })?);
                }
                continue;
            }
            if line.starts_with("solve_ms_samples:") {
                in_samples = true;
            } else if let Some(rest) = line.strip_prefix("mode: ") {
                report.mode = rest.trim().to_string();
            } else if let Some(rest) = line.strip_prefix("ate_m: ") {
                report.ate_m = Some(rest.trim().parse().map_err(|e| {
                    Error::Config(format!("bad ate_m: {e}"))
                })?);
            }
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::so3_exp;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn wiggle_trajectory(n: usize) -> Vec<TrajPose> {
        (0..n)
            .map(|k| {
                let t = k as f64 * 0.1;
                TrajPose {
                    t,
                    p: Vec3::new(t.sin() * 2.0, (0.7 * t).cos() * 1.5, 0.3 * t),
                    q: UnitQuat::identity(),
                }
            })
            .collect()
    }

    #[test]
    fn ate_zero_for_identical_trajectories() {
        let traj = wiggle_trajectory(100);
        for align in [Alignment::Se3, Alignment::PosYaw] {
            let ate = compute_ate(&traj, &traj, align).unwrap();
            assert!(ate < 1e-12);
        }
    }

    #[test]
    fn ate_removes_rigid_shift() {
        let truth = wiggle_trajectory(100);
        let shifted: Vec<TrajPose> = truth
            .iter()
            .map(|p| TrajPose {
                p: p.p + Vec3::new(1.0, 2.0, 3.0),
                ..*p
            })
            .collect();
        let ate = compute_ate(&shifted, &truth, Alignment::Se3).unwrap();
        assert!(ate < 1e-9, "ATE {ate:e}");
        // posyaw also removes a pure translation
        let ate = compute_ate(&shifted, &truth, Alignment::PosYaw).unwrap();
        assert!(ate < 1e-9, "ATE {ate:e}");
    }

    #[test]
    fn ate_se3_invariant_under_rigid_transform_of_estimate() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let truth = wiggle_trajectory(150);
        let noisy: Vec<TrajPose> = truth
            .iter()
            .map(|p| TrajPose {
                p: p.p
                    + 0.05
                        * Vec3::new(
                            StandardNormal.sample(&mut rng),
                            StandardNormal.sample(&mut rng),
                            StandardNormal.sample(&mut rng),
                        ),
                ..*p
            })
            .collect();
        let base = compute_ate(&noisy, &truth, Alignment::Se3).unwrap();
        for _ in 0..5 {
            let r0 = so3_exp(&Vec3::new(
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
            ));
            let t0 = Vec3::new(
                rng.gen_range(-10.0..10.0),
                rng.gen_range(-10.0..10.0),
                rng.gen_range(-10.0..10.0),
            );
            let moved: Vec<TrajPose> = noisy
                .iter()
                .map(|p| TrajPose {
                    p: r0.rotate(&p.p) + t0,
                    q: r0.compose(&p.q),
                    ..*p
                })
                .collect();
            let ate = compute_ate(&moved, &truth, Alignment::Se3).unwrap();
            assert!((ate - base).abs() < 1e-9);
        }
    }

    #[test]
    fn ate_posyaw_removes_yaw_offset() {
        let truth = wiggle_trajectory(100);
        let r = so3_exp(&Vec3::new(0.0, 0.0, 0.7));
        let moved: Vec<TrajPose> = truth
            .iter()
            .map(|p| TrajPose {
                p: r.rotate(&p.p) + Vec3::new(-2.0, 1.0, 0.5),
                ..*p
            })
            .collect();
        let ate = compute_ate(&moved, &truth, Alignment::PosYaw).unwrap();
        assert!(ate < 1e-9, "ATE {ate:e}");
    }

    #[test]
    fn ate_tracks_known_noise_level() {
        // total position noise std 0.1 m; aligned RMSE concentrates near it
        let truth = wiggle_trajectory(300);
        let per_axis = 0.1 / 3.0f64.sqrt();
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noisy: Vec<TrajPose> = truth
                .iter()
                .map(|p| TrajPose {
                    p: p.p
                        + per_axis
                            * Vec3::new(
                                StandardNormal.sample(&mut rng),
                                StandardNormal.sample(&mut rng),
                                StandardNormal.sample(&mut rng),
                            ),
                    ..*p
                })
                .collect();
            let ate = compute_ate(&noisy, &truth, Alignment::Se3).unwrap();
            assert!(
                (0.07..=0.13).contains(&ate),
                "seed {seed}: ATE {ate} outside [0.07, 0.13]"
            );
        }
    }

    #[test]
    fn association_rejects_disjoint_trajectories() {
        let a = wiggle_trajectory(50);
        let b: Vec<TrajPose> = wiggle_trajectory(50)
            .into_iter()
            .map(|p| TrajPose {
                t: p.t + 1000.0,
                ..p
            })
            .collect();
        assert!(matches!(
            compute_ate(&a, &b, Alignment::Se3),
            Err(Error::InsufficientOverlap(0))
        ));
    }

    #[test]
    fn association_is_nearest_within_gate() {
        let est = vec![
            TrajPose {
                t: 0.100,
                p: Vec3::zeros(),
                q: UnitQuat::identity(),
            },
            TrajPose {
                t: 0.250,
                p: Vec3::zeros(),
                q: UnitQuat::identity(),
            },
        ];
        let truth = wiggle_trajectory(10); // t = 0.0, 0.1, ...
        let pairs = associate(&est, &truth, 0.01);
        assert_eq!(pairs, vec![(0, 1)]); // 0.25 is 50 ms from both neighbors
    }

    #[test]
    fn bench_report_mean_matches_samples() {
        let report = BenchReport {
            mode: "structureless".into(),
            solve_ms: vec![1.25, 0.75, 2.0, 1.5],
            marg_ms: vec![0.3, 0.4],
            iterations: vec![4, 5, 3, 6],
            ate_m: Some(0.042),
        };
        let recomputed = report.solve_ms.iter().sum::<f64>() / report.solve_ms.len() as f64;
        assert!((report.solve_ms_mean() - recomputed).abs() < 1e-9);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.txt");
        report.save(&path).unwrap();
        let back = BenchReport::load(&path).unwrap();
        assert_eq!(back.mode, "structureless");
        assert_eq!(back.solve_ms.len(), 4);
        let mean_back = back.solve_ms.iter().sum::<f64>() / back.solve_ms.len() as f64;
        assert!((mean_back - report.solve_ms_mean()).abs() < 1e-9);
        assert!((back.ate_m.unwrap() - 0.042).abs() < 1e-9);
    }
}
