//! Command-line front end: synthesize datasets, run the estimator in either
//! mode, evaluate trajectories, verify Jacobians, and benchmark both modes
//! side by side.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use epivio_core::estimator::Mode;
use epivio_core::eval::{compute_ate, Alignment, BenchReport, TrajPose};
use epivio_core::gradcheck;
use epivio_core::imu::ImuState;
use epivio_core::io::{self, Config};
use epivio_core::manifold::Vec3;
use epivio_core::runner::{initial_state_from_trajectory, run_estimator, Dataset};
use epivio_core::sim::{generate_truth, synthesize_imu, synthesize_tracks};

#[derive(Parser)]
#[command(name = "epivio", about = "Sliding-window visual-inertial odometry toolkit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// TOML configuration file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> anyhow::Result<Config> {
        match &self.config {
            Some(path) => Config::load(path).with_context(|| format!("loading {}", path.display())),
            None => Ok(Config::default()),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize imu.csv, tracks.csv, and truth.txt into a directory.
    Simulate {
        #[command(flatten)]
        config: ConfigArg,
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the estimator over a dataset directory.
    Run {
        #[command(flatten)]
        config: ConfigArg,
        /// Visual residual formulation; overrides the config file.
        #[arg(long, value_parser = parse_mode)]
        mode: Option<Mode>,
        /// Dataset directory containing imu.csv and tracks.csv.
        #[arg(long)]
        data: PathBuf,
        /// Estimated trajectory output (TUM format).
        #[arg(long)]
        out: PathBuf,
        /// Benchmark report output.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Evaluate visual factors on worker threads.
        #[arg(long)]
        parallel: bool,
    },
    /// Print the ATE between an estimate and the ground truth.
    Eval {
        #[arg(long)]
        est: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Alignment: se3 or posyaw.
        #[arg(long, default_value = "posyaw")]
        align: String,
    },
    /// Verify every analytic Jacobian against central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 20240901)]
        seed: u64,
    },
    /// Run both modes on identical data and print the comparison.
    Bench {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        data: PathBuf,
        /// Optionally write per-mode reports into this directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        parallel: bool,
    },
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    match s {
        "structureless" => Ok(Mode::Structureless),
        "structure-based" => Ok(Mode::StructureBased),
        other => Err(format!(
            "unknown mode '{other}' (expected structureless or structure-based)"
        )),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(command: Command) -> anyhow::Result<ExitCode> {
    match command {
        Command::Simulate { config, out } => {
            let cfg = config.load()?;
            simulate(&cfg, &out)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Run {
            config,
            mode,
            data,
            out,
            report,
            parallel,
        } => {
            let cfg = config.load()?;
            run(&cfg, mode, &data, &out, report.as_deref(), parallel)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval { est, truth, align } => {
            let alignment: Alignment = align.parse()?;
            let est = io::read_trajectory(&est)?;
            let truth = io::read_trajectory(&truth)?;
            let ate = compute_ate(&est, &truth, alignment)?;
            println!("{ate:.6}");
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck { trials, seed } => {
            let results = gradcheck::run_all(trials, seed);
            let mut ok = true;
            for r in &results {
                println!("{r}");
                ok &= r.passed();
            }
            Ok(if ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
        Command::Bench {
            config,
            data,
            out_dir,
            parallel,
        } => {
            let cfg = config.load()?;
            bench(&cfg, &data, out_dir.as_deref(), parallel)?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn simulate(cfg: &Config, out: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(out)?;
    let truth = generate_truth(&cfg.sim.trajectory);
    let noise = cfg.noise_params();
    let ext = cfg.extrinsics()?;
    let ba = Vec3::new(cfg.sim.bias_accel[0], cfg.sim.bias_accel[1], cfg.sim.bias_accel[2]);
    let bg = Vec3::new(cfg.sim.bias_gyro[0], cfg.sim.bias_gyro[1], cfg.sim.bias_gyro[2]);
    let imu = synthesize_imu(&truth, &noise, (ba, bg), cfg.sim.scene.seed);
    let scene = synthesize_tracks(&truth, &cfg.scene_spec(), &ext);

    io::write_imu_csv(
        &out.join("imu.csv"),
        truth.samples.iter().map(|s| s.t_ns).zip(imu.iter()),
    )?;
    io::write_tracks_csv(&out.join("tracks.csv"), &scene)?;
    let poses: Vec<TrajPose> = truth
        .frame_indices()
        .iter()
        .map(|&i| {
            let s = &truth.samples[i];
            TrajPose {
                t: s.t,
                p: s.p,
                q: s.q,
            }
        })
        .collect();
    io::write_trajectory(&out.join("truth.txt"), &poses)?;
    println!(
        "wrote {} IMU samples, {} observations over {} frames, {} truth poses to {}",
        imu.len(),
        scene.observations.len(),
        scene.frame_times_ns.len(),
        poses.len(),
        out.display()
    );
    Ok(())
}

fn load_init(data: &Path) -> anyhow::Result<(Option<Vec<TrajPose>>, ImuState)> {
    let truth_path = data.join("truth.txt");
    if truth_path.exists() {
        let truth = io::read_trajectory(&truth_path)?;
        let init = initial_state_from_trajectory(&truth)?;
        Ok((Some(truth), init))
    } else {
        Ok((None, ImuState::at_rest()))
    }
}

fn run_mode(
    cfg: &Config,
    mode: Mode,
    data: &Path,
    parallel: bool,
) -> anyhow::Result<(Vec<TrajPose>, BenchReport)> {
    let mut wcfg = cfg.window_config();
    wcfg.mode = mode;
    wcfg.parallel = wcfg.parallel || parallel;
    let noise = cfg.noise_params();
    let ext = cfg.extrinsics()?;
    let dataset = Dataset::load(data, &cfg.camera)?;
    if dataset.frames.is_empty() {
        bail!("dataset at {} contains no frames", data.display());
    }
    let (truth, init) = load_init(data)?;
    let result = run_estimator(&dataset, &wcfg, &noise, &ext, init)?;
    let mut report = result.report;
    if let Some(truth) = &truth {
        report.ate_m = Some(compute_ate(&result.trajectory, truth, Alignment::PosYaw)?);
    }
    Ok((result.trajectory, report))
}

fn run(
    cfg: &Config,
    mode: Option<Mode>,
    data: &Path,
    out: &Path,
    report_path: Option<&Path>,
    parallel: bool,
) -> anyhow::Result<()> {
    let mode = mode.unwrap_or(cfg.window.mode);
    let (trajectory, report) = run_mode(cfg, mode, data, parallel)?;
    io::write_trajectory(out, &trajectory)?;
    if let Some(path) = report_path {
        report.save(path)?;
    }
    println!(
        "mode {}: {} frames, solve {:.3} ms mean, {}",
        report.mode,
        trajectory.len(),
        report.solve_ms_mean(),
        report
            .ate_m
            .map(|a| format!("ATE {a:.4} m (posyaw)"))
            .unwrap_or_else(|| "no ground truth".into()),
    );
    Ok(())
}

fn bench(cfg: &Config, data: &Path, out_dir: Option<&Path>, parallel: bool) -> anyhow::Result<()> {
    let mut rows = Vec::new();
    for mode in [Mode::StructureBased, Mode::Structureless] {
        let (_, report) = run_mode(cfg, mode, data, parallel)?;
        if let Some(dir) = out_dir {
            fs::create_dir_all(dir)?;
            report.save(&dir.join(format!("report_{}.txt", report.mode)))?;
        }
        rows.push(report);
    }
    println!(
        "{:<18} {:>9} {:>16} {:>14} {:>9}",
        "mode", "ate_m", "solve_ms_mean", "marg_ms_mean", "windows"
    );
    for r in &rows {
        println!(
            "{:<18} {:>9} {:>16.3} {:>14.3} {:>9}",
            r.mode,
            r.ate_m.map(|a| format!("{a:.4}")).unwrap_or_else(|| "-".into()),
            r.solve_ms_mean(),
            r.marg_ms_mean(),
            r.windows()
        );
    }
    let (sb, sl) = (&rows[0], &rows[1]);
    if sl.solve_ms_mean() > 0.0 {
        println!(
            "solve-time ratio (structure-based / structureless): {:.2}x",
            sb.solve_ms_mean() / sl.solve_ms_mean()
        );
    }
    Ok(())
}
