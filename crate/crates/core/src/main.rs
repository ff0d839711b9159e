use anyhow::{bail, Context, Result};
use capsule_slam::camera::{CameraIntrinsics, DepthImage};
use capsule_slam::config::{load_or_default, PipelineConfig};
use capsule_slam::eval::{
    ate_rmse, run_pipeline, sample_gt_surface, summarize, surface_rmse, write_outputs,
    SurfaceParams,
};
use capsule_slam::fusion::{
    write_fusion_log, ConstantVelocity, FusionLogRow, SensorObservation, SwitchingFilter,
};
use capsule_slam::geometry::{compose, Pose};
use capsule_slam::handeye::{motion_pairs, solve_hand_eye};
use capsule_slam::image::{read_ppm, write_pgm8};
use capsule_slam::magnetic::{localize_5dof, subtract_actuator, Pose5};
use capsule_slam::sfs::depth_from_shading;
use capsule_slam::sim::{
    render_dataset, DatasetConfig, FailureMode, FailureSchedule, FailureWindow, LoadedDataset,
    SensorKind,
};
use capsule_slam::surfel::load_map_ply;
use capsule_slam::tracker::{track, Frame, ModelView};
use capsule_slam::trajectory::{
    read_heading_trajectory, read_trajectory, write_heading_trajectory, write_trajectory,
    TimedPose,
};
use capsule_slam::vessel::enhance_gray;
use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "capsule-slam",
    about = "Magnetic-visual sensor-fusion SLAM for capsule robots: simulation, per-stage tools, and the full pipeline"
)]
struct Cli {
    /// Seed override for anything stochastic.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML pipeline configuration; defaults are used when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset (frames, depth, magnetic readings, ground truth).
    Simulate(SimulateArgs),
    /// Vessel-enhance a color or grayscale image.
    Enhance(EnhanceArgs),
    /// Recover depth from a single shaded image.
    Sfs(SfsArgs),
    /// Frame-to-frame visual odometry over a dataset.
    Track(TrackArgs),
    /// Magnetic 5-DoF localization over a dataset's readings.
    Maglocalize(MaglocalizeArgs),
    /// Fuse precomputed visual and magnetic trajectories.
    Fuse(FuseArgs),
    /// Full pipeline: enhance, depth, track, localize, fuse, map.
    Slam(SlamArgs),
    /// Hand-eye calibration from paired trajectories.
    Calibrate(CalibrateArgs),
    /// Absolute trajectory error between two trajectory files.
    Ate(AteArgs),
    /// Map-to-surface RMSE between a PLY map and dataset ground truth.
    Surface(SurfaceArgs),
    /// Per-frame pipeline timing.
    Bench(BenchArgs),
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    archetype: u8,
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long)]
    rate: Option<f64>,
    /// Use the small fast preset (64x48, 5 Hz, 12 s).
    #[arg(long)]
    small: bool,
    /// Visual failure window as start:end:mode (mode: dropout|garbage|bias).
    #[arg(long)]
    visual_failure: Option<String>,
    /// Magnetic failure window as start:end:mode.
    #[arg(long)]
    magnetic_failure: Option<String>,
}

#[derive(Args)]
struct EnhanceArgs {
    /// Input image, .ppm color or .pgm grayscale.
    #[arg(long)]
    input: PathBuf,
    /// Output 8-bit PGM.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SfsArgs {
    #[arg(long)]
    input: PathBuf,
    /// Output 16-bit PGM depth (centimeters x100).
    #[arg(long)]
    out: PathBuf,
    /// Focal length in pixels; defaults to 0.44 x image width.
    #[arg(long)]
    focal: Option<f64>,
}

#[derive(Args)]
struct TrackArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Output trajectory file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    stride: usize,
}

#[derive(Args)]
struct MaglocalizeArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Output 5-DoF trajectory file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FuseArgs {
    /// Visual pose trajectory file.
    #[arg(long)]
    visual: PathBuf,
    /// Magnetic 5-DoF trajectory file.
    #[arg(long)]
    magnetic: PathBuf,
    /// Output directory for the fused trajectory and fusion log.
    #[arg(long)]
    out: PathBuf,
    /// Matching window between the two streams, seconds.
    #[arg(long, default_value_t = 0.05)]
    max_dt: f64,
}

#[derive(Args)]
struct SlamArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CalibrateArgs {
    /// Camera trajectory file (timestamp + pose per line).
    #[arg(long)]
    camera: PathBuf,
    /// Magnet 5-DoF trajectory file (timestamp tx ty tz hx hy hz).
    #[arg(long)]
    magnet: PathBuf,
    /// Roll assumed when completing magnet poses, radians.
    #[arg(long, default_value_t = 0.0)]
    roll: f64,
    #[arg(long, default_value_t = 0.05)]
    max_dt: f64,
    /// Motions rotating less than this are dropped, radians.
    #[arg(long, default_value_t = 0.02)]
    min_angle: f64,
    /// Optional file for the recovered transform.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AteArgs {
    #[arg(long)]
    est: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    max_dt: f64,
    /// Optional CSV report.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SurfaceArgs {
    /// PLY map export.
    #[arg(long)]
    map: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 5)]
    frame_stride: usize,
    #[arg(long, default_value_t = 3)]
    px_stride: usize,
    /// Optional CSV report.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Process only this many frames (0 = all).
    #[arg(long, default_value_t = 0)]
    frames: usize,
}

fn pipeline_config(cli_config: &Option<PathBuf>, seed: Option<u64>) -> Result<PipelineConfig> {
    let mut config = load_or_default(cli_config.as_deref())?;
    if let Some(s) = seed {
        config.seed = s;
    }
    Ok(config)
}

fn parse_window(text: &str, sensor: SensorKind) -> Result<FailureWindow> {
    let parts: Vec<&str> = text.split(':').collect();
    if parts.len() != 3 {
        bail!("failure window must be start:end:mode, got '{text}'");
    }
    let start: f64 = parts[0].parse().context("bad window start")?;
    let end: f64 = parts[1].parse().context("bad window end")?;
    let mode: FailureMode = parts[2].parse().map_err(|e: String| anyhow::anyhow!(e))?;
    Ok(FailureWindow {
        sensor,
        mode,
        start,
        end,
    })
}

fn load_gray(path: &Path) -> Result<capsule_slam::image::GrayImage> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    if ext.eq_ignore_ascii_case("ppm") {
        Ok(read_ppm(path)?.luminance())
    } else {
        Ok(capsule_slam::image::read_pgm8_gray(path)?)
    }
}

fn cmd_simulate(args: &SimulateArgs, seed: Option<u64>) -> Result<()> {
    let seed = seed.unwrap_or(0);
    let mut config = if args.small {
        DatasetConfig::small(seed)
    } else {
        DatasetConfig::desk_default(seed)
    };
    config.archetype = args.archetype;
    if let Some(d) = args.duration {
        config.duration = d;
    }
    if let Some(r) = args.rate {
        config.rate = r;
    }
    let mut schedule = FailureSchedule::empty();
    if let Some(w) = &args.visual_failure {
        schedule.windows.push(parse_window(w, SensorKind::Visual)?);
    }
    if let Some(w) = &args.magnetic_failure {
        schedule
            .windows
            .push(parse_window(w, SensorKind::Magnetic)?);
    }
    let frames = render_dataset(&args.out, &config, &schedule)?;
    println!(
        "wrote {frames} frames (archetype {}, {:.0} s at {:.0} Hz, seed {seed}) to {}",
        config.archetype,
        config.duration,
        config.rate,
        args.out.display()
    );
    Ok(())
}

fn cmd_enhance(args: &EnhanceArgs, config: &PipelineConfig) -> Result<()> {
    let gray = load_gray(&args.input)?;
    let enhanced = enhance_gray(&gray, &config.vessel)?;
    write_pgm8(&args.out, &enhanced)?;
    let (lo, hi) = enhanced.min_max();
    println!(
        "enhanced {} -> {} (range {:.3}..{:.3})",
        args.input.display(),
        args.out.display(),
        lo,
        hi
    );
    Ok(())
}

fn cmd_sfs(args: &SfsArgs, config: &PipelineConfig) -> Result<()> {
    let gray = load_gray(&args.input)?;
    let f = args.focal.unwrap_or(0.44 * gray.width as f64);
    let k = CameraIntrinsics::new(
        f,
        f,
        (gray.width as f64 - 1.0) / 2.0,
        (gray.height as f64 - 1.0) / 2.0,
        gray.width,
        gray.height,
    );
    let init = DepthImage::new_constant(k.width, k.height, 5.0);
    let solution = depth_from_shading(&gray, &k, &config.shading, &config.sfs, &init)?;
    solution.depth.save_pgm16(&args.out)?;
    println!(
        "depth written to {} (mean {:.2} cm, {} iterations, converged: {})",
        args.out.display(),
        solution.depth.mean_depth().unwrap_or(0.0),
        solution.iterations,
        solution.converged
    );
    Ok(())
}

fn cmd_track(args: &TrackArgs, config: &PipelineConfig) -> Result<()> {
    let ds = LoadedDataset::load(&args.dataset)?;
    if ds.is_empty() {
        bail!("dataset is empty");
    }
    let mut pose = ds.gt[0].pose;
    let mut out = vec![TimedPose {
        timestamp: ds.gt[0].timestamp,
        pose,
    }];
    let mut prev: Option<Frame> = None;
    let mut failed = 0usize;
    for i in (0..ds.len()).step_by(args.stride.max(1)) {
        let (rgb, depth) = ds.frame(i)?;
        let intensity = enhance_gray(&rgb.luminance(), &config.vessel)?;
        let frame = Frame::new(ds.gt[i].timestamp, None, intensity, depth, &ds.config.k);
        if let Some(p) = &prev {
            let view = ModelView::from_frame(p);
            let result = track(&frame, &view, &ds.config.k, &Pose::identity(), &config.tracker);
            if result.degenerate {
                failed += 1;
            } else {
                pose = compose(&pose, &result.pose);
                out.push(TimedPose {
                    timestamp: frame.timestamp,
                    pose,
                });
            }
        }
        prev = Some(frame);
    }
    write_trajectory(&args.out, &out)?;
    println!(
        "tracked {} poses ({} degenerate frames) -> {}",
        out.len(),
        failed,
        args.out.display()
    );
    if let Ok(report) = ate_rmse(&out, &ds.gt, 0.5 / ds.config.rate) {
        println!("ATE RMSE vs ground truth: {:.4} cm over {} pairs", report.rmse, report.pairs);
    }
    Ok(())
}

fn cmd_maglocalize(args: &MaglocalizeArgs) -> Result<()> {
    let ds = LoadedDataset::load(&args.dataset)?;
    if ds.readings.is_empty() {
        bail!("dataset has no magnetic readings");
    }
    let mut warm = Pose5::from_pose(&ds.gt[0].pose, &ds.config.magnet);
    let mut fixes = Vec::new();
    let mut unreliable = 0usize;
    let mut failed = 0usize;
    let mut residual_sum = 0.0;
    for reading in &ds.readings {
        let corrected = subtract_actuator(reading, &ds.config.array, &ds.config.actuators)?;
        match localize_5dof(&corrected, &ds.config.array, &ds.config.magnet, &warm) {
            Ok(loc) => {
                residual_sum += loc.residual_norm;
                if loc.unreliable {
                    unreliable += 1;
                } else {
                    warm = loc.pose;
                    fixes.push(capsule_slam::trajectory::TimedPose5 {
                        timestamp: reading.timestamp,
                        pose: loc.pose,
                    });
                }
            }
            Err(_) => failed += 1,
        }
    }
    write_heading_trajectory(&args.out, &fixes)?;
    println!(
        "{} fixes ({} unreliable, {} failed), mean residual {:.2} uT -> {}",
        fixes.len(),
        unreliable,
        failed,
        residual_sum / ds.readings.len() as f64,
        args.out.display()
    );
    Ok(())
}

fn cmd_fuse(args: &FuseArgs, config: &PipelineConfig) -> Result<()> {
    let visual = read_trajectory(&args.visual)?;
    let magnetic = read_heading_trajectory(&args.magnetic)?;
    if visual.is_empty() {
        bail!("visual trajectory is empty");
    }
    let mut filter = SwitchingFilter::new(config.fusion.clone(), &visual[0].pose, config.seed);
    let mut fused = Vec::with_capacity(visual.len());
    let mut rows = Vec::with_capacity(visual.len());
    let mut mag_idx = 0usize;
    let mut prev_t = visual[0].timestamp;
    for (step, tp) in visual.iter().enumerate() {
        let mut observations = vec![SensorObservation::Visual {
            pose: tp.pose,
            valid: true,
        }];
        while mag_idx + 1 < magnetic.len()
            && (magnetic[mag_idx + 1].timestamp - tp.timestamp).abs()
                < (magnetic[mag_idx].timestamp - tp.timestamp).abs()
        {
            mag_idx += 1;
        }
        if mag_idx < magnetic.len()
            && (magnetic[mag_idx].timestamp - tp.timestamp).abs() <= args.max_dt
        {
            observations.push(SensorObservation::Magnetic {
                pose: magnetic[mag_idx].pose,
                valid: true,
            });
        }
        let output = if step == 0 {
            filter.update(&observations)
        } else {
            filter.step(&ConstantVelocity, tp.timestamp - prev_t, &observations)
        };
        fused.push(TimedPose {
            timestamp: tp.timestamp,
            pose: output.pose,
        });
        rows.push(FusionLogRow::from_output(tp.timestamp, &output));
        prev_t = tp.timestamp;
    }
    std::fs::create_dir_all(&args.out)?;
    write_trajectory(&args.out.join("fused_trajectory.txt"), &fused)?;
    write_fusion_log(&args.out.join("fusion_log.csv"), &rows)?;
    let last = rows.last().unwrap();
    println!(
        "fused {} steps -> {} (final P(nominal): visual {:.3}, magnetic {:.3})",
        fused.len(),
        args.out.display(),
        last.p_visual,
        last.p_magnetic
    );
    Ok(())
}

fn cmd_slam(args: &SlamArgs, config: &PipelineConfig) -> Result<()> {
    let ds = LoadedDataset::load(&args.dataset)?;
    let out = run_pipeline(&ds, config)?;
    let ate = ate_rmse(&out.trajectory, &ds.gt, 0.5 / ds.config.rate).ok();
    write_outputs(&args.out, &out, ate.as_ref())?;
    print!("{}", summarize(&out, ate.as_ref()));
    println!("outputs in {}", args.out.display());
    Ok(())
}

fn cmd_calibrate(args: &CalibrateArgs) -> Result<()> {
    let cam = read_trajectory(&args.camera)?;
    let mag = read_heading_trajectory(&args.magnet)?;
    let pairs = motion_pairs(&cam, &mag, args.roll, args.max_dt, args.min_angle);
    let result = solve_hand_eye(&pairs)?;
    println!(
        "pairs used {} of {}, axis sufficiency {:.3}, residual {:.3e}",
        result.pairs_used,
        pairs.len(),
        result.sufficiency,
        result.residual
    );
    let r = result.x.rotation;
    let t = result.x.translation;
    for i in 0..3 {
        println!(
            "[{:+.6} {:+.6} {:+.6} | {:+.4}]",
            r[(i, 0)],
            r[(i, 1)],
            r[(i, 2)],
            t[i]
        );
    }
    if let Some(path) = &args.out {
        let mut text = String::from("# magnet-to-camera transform: rows of [R | t]\n");
        for i in 0..3 {
            text.push_str(&format!(
                "{} {} {} {}\n",
                r[(i, 0)],
                r[(i, 1)],
                r[(i, 2)],
                t[i]
            ));
        }
        std::fs::write(path, text)?;
        println!("written to {}", path.display());
    }
    Ok(())
}

fn cmd_ate(args: &AteArgs) -> Result<()> {
    let est = read_trajectory(&args.est)?;
    let gt = read_trajectory(&args.gt)?;
    let report = ate_rmse(&est, &gt, args.max_dt)?;
    println!(
        "ATE RMSE {:.4} cm (x {:.4}, y {:.4}, z {:.4}) over {} pairs",
        report.rmse, report.per_axis[0], report.per_axis[1], report.per_axis[2], report.pairs
    );
    if let Some(path) = &args.out {
        let text = format!(
            "rmse_cm,x_cm,y_cm,z_cm,pairs\n{:.6},{:.6},{:.6},{:.6},{}\n",
            report.rmse,
            report.per_axis[0],
            report.per_axis[1],
            report.per_axis[2],
            report.pairs
        );
        std::fs::write(path, text)?;
    }
    Ok(())
}

fn cmd_surface(args: &SurfaceArgs) -> Result<()> {
    let map = load_map_ply(&args.map)?;
    let ds = LoadedDataset::load(&args.dataset)?;
    let gt = sample_gt_surface(&ds, args.frame_stride, args.px_stride)?;
    let points: Vec<_> = map.surfels.iter().map(|s| s.position).collect();
    let report = surface_rmse(&points, &gt, &SurfaceParams::default())?;
    println!(
        "surface RMSE ({}) {:.4} cm, inliers {:.1}%, {} of {} matched, {} ICP iterations{}",
        report.direction,
        report.rmse,
        100.0 * report.inlier_fraction,
        report.matched,
        points.len(),
        report.iterations,
        if report.diverged { " [DIVERGED]" } else { "" }
    );
    if let Some(path) = &args.out {
        let text = format!(
            "rmse_cm,inlier_fraction,matched,iterations,diverged\n{:.6},{:.6},{},{},{}\n",
            report.rmse, report.inlier_fraction, report.matched, report.iterations, report.diverged
        );
        std::fs::write(path, text)?;
    }
    Ok(())
}

fn cmd_bench(args: &BenchArgs, config: &PipelineConfig) -> Result<()> {
    let ds = LoadedDataset::load(&args.dataset)?;
    let mut config = config.clone();
    if args.frames > 0 {
        config.max_frames = args.frames;
    }
    let out = run_pipeline(&ds, &config)?;
    let timing = &out.timing;
    println!(
        "{} frames: mean {:.1} ms, peak {:.1} ms over any {} consecutive frames",
        timing.times_ms.len(),
        timing.mean_ms,
        timing.peak_window_ms,
        timing.window
    );
    println!(
        "throughput {:.1} frames/s (dataset rate {:.1} Hz)",
        1000.0 / timing.mean_ms.max(1e-9),
        ds.config.rate
    );
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let config = pipeline_config(&cli.config, cli.seed)?;
    match &cli.command {
        Command::Simulate(args) => cmd_simulate(args, cli.seed),
        Command::Enhance(args) => cmd_enhance(args, &config),
        Command::Sfs(args) => cmd_sfs(args, &config),
        Command::Track(args) => cmd_track(args, &config),
        Command::Maglocalize(args) => cmd_maglocalize(args),
        Command::Fuse(args) => cmd_fuse(args, &config),
        Command::Slam(args) => cmd_slam(args, &config),
        Command::Calibrate(args) => cmd_calibrate(args),
        Command::Ate(args) => cmd_ate(args),
        Command::Surface(args) => cmd_surface(args),
        Command::Bench(args) => cmd_bench(args, &config),
    }
}
