//! Accuracy metrics (trajectory ATE, surface RMSE, per-frame timing) and
//! the sequential driver that runs the full pipeline over a recorded
//! dataset: enhance, depth, frame-to-model tracking, magnetic
//! localization, switching fusion, surfel integration, periodic loop
//! closure.

use crate::camera::DepthImage;
use crate::config::{ConfigError, DepthSource, PipelineConfig};
use crate::fusion::{
    write_fusion_log, ConstantVelocity, FusionError, FusionLogRow, SensorObservation,
    SwitchingFilter,
};
use crate::geometry::{compose, Pose};
use crate::magnetic::{localize_5dof, subtract_actuator, Pose5};
use crate::sfs::depth_from_shading;
use crate::sim::{LoadedDataset, SimError};
use crate::surfel::{close_loop, integrate_frame, predict_view, save_map_ply, SurfelError, SurfelMap};
use crate::tracker::{track, Frame};
use crate::trajectory::{
    associate_by_time, write_heading_trajectory, write_trajectory, TimedPose, TimedPose5,
    TrajectoryError,
};
use crate::vessel::enhance_gray;
use nalgebra::{Matrix3, Vector3};
use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("need at least {need} associated pose pairs, got {got}")]
    TooFewPairs { need: usize, got: usize },
    #[error("point set is empty")]
    EmptyPointSet,
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Surfel(#[from] SurfelError),
    #[error(transparent)]
    Image(#[from] crate::image::ImageError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("writing {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Least-squares rigid transform (R, t) mapping `src` points onto `dst`:
/// rotation from the SVD of the centered cross-covariance with a
/// reflection guard, translation from the centroids.
pub fn rigid_align(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> (Matrix3<f64>, Vector3<f64>) {
    assert_eq!(src.len(), dst.len());
    assert!(!src.is_empty());
    let n = src.len() as f64;
    let cs: Vector3<f64> = src.iter().sum::<Vector3<f64>>() / n;
    let cd: Vector3<f64> = dst.iter().sum::<Vector3<f64>>() / n;
    let mut w = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        w += (d - cd) * (s - cs).transpose();
    }
    let svd = w.svd(true, true);
    let u = svd.u.unwrap();
    let vt = svd.v_t.unwrap();
    let mut r = u * vt;
    if r.determinant() < 0.0 {
        let mut flip = Matrix3::identity();
        flip[(2, 2)] = -1.0;
        r = u * flip * vt;
    }
    (r, cd - r * cs)
}

/// Absolute trajectory error after closed-form rigid alignment of the
/// estimate onto the ground truth.
#[derive(Debug, Clone)]
pub struct AteReport {
    /// RMSE of the aligned translation residuals, cm.
    pub rmse: f64,
    pub per_axis: [f64; 3],
    pub pairs: usize,
    /// Alignment applied to the estimate.
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    /// The estimate after alignment, at its own timestamps.
    pub aligned: Vec<TimedPose>,
}

pub fn ate_rmse(
    est: &[TimedPose],
    gt: &[TimedPose],
    max_dt: f64,
) -> Result<AteReport, EvalError> {
    let pairs = associate_by_time(est, gt, max_dt);
    if pairs.len() < 3 {
        return Err(EvalError::TooFewPairs {
            need: 3,
            got: pairs.len(),
        });
    }
    let src: Vec<Vector3<f64>> = pairs.iter().map(|&(i, _)| est[i].pose.translation).collect();
    let dst: Vec<Vector3<f64>> = pairs.iter().map(|&(_, j)| gt[j].pose.translation).collect();
    let (r, t) = rigid_align(&src, &dst);
    let mut sq = [0.0f64; 3];
    for (s, d) in src.iter().zip(&dst) {
        let res = r * s + t - d;
        for a in 0..3 {
            sq[a] += res[a] * res[a];
        }
    }
    let n = pairs.len() as f64;
    let per_axis = [
        (sq[0] / n).sqrt(),
        (sq[1] / n).sqrt(),
        (sq[2] / n).sqrt(),
    ];
    let rmse = ((sq[0] + sq[1] + sq[2]) / n).sqrt();
    let align = Pose::new(crate::geometry::project_so3(&r), t);
    let aligned = est
        .iter()
        .map(|tp| TimedPose {
            timestamp: tp.timestamp,
            pose: compose(&align, &tp.pose),
        })
        .collect();
    Ok(AteReport {
        rmse,
        per_axis,
        pairs: pairs.len(),
        rotation: r,
        translation: t,
        aligned,
    })
}

/// Hash-grid nearest-neighbor index over a fixed point set.
struct PointGrid<'a> {
    cell: f64,
    points: &'a [Vector3<f64>],
    bins: HashMap<(i64, i64, i64), Vec<u32>>,
}

impl<'a> PointGrid<'a> {
    fn build(points: &'a [Vector3<f64>], cell: f64) -> PointGrid<'a> {
        let mut bins: HashMap<(i64, i64, i64), Vec<u32>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            bins.entry(Self::key(p, cell)).or_default().push(i as u32);
        }
        PointGrid { cell, points, bins }
    }

    fn key(p: &Vector3<f64>, cell: f64) -> (i64, i64, i64) {
        (
            (p.x / cell).floor() as i64,
            (p.y / cell).floor() as i64,
            (p.z / cell).floor() as i64,
        )
    }

    /// Nearest point within `max_dist`, searched over expanding cell
    /// rings. A point in ring r is at least (r-1)*cell away, so the scan
    /// stops once that bound exceeds the best hit.
    fn nearest(&self, q: &Vector3<f64>, max_dist: f64) -> Option<(usize, f64)> {
        let (kx, ky, kz) = Self::key(q, self.cell);
        let r_max = (max_dist / self.cell).ceil() as i64 + 1;
        let mut best: Option<(usize, f64)> = None;
        for r in 0..=r_max {
            let bound = (r - 1).max(0) as f64 * self.cell;
            if let Some((_, d)) = best {
                if bound > d {
                    break;
                }
            }
            for dx in -r..=r {
                for dy in -r..=r {
                    for dz in -r..=r {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != r {
                            continue;
                        }
                        let Some(bin) = self.bins.get(&(kx + dx, ky + dy, kz + dz)) else {
                            continue;
                        };
                        for &i in bin {
                            let d = (self.points[i as usize] - q).norm();
                            if d <= max_dist && best.map_or(true, |(_, bd)| d < bd) {
                                best = Some((i as usize, d));
                            }
                        }
                    }
                }
            }
        }
        best
    }
}

#[derive(Debug, Clone)]
pub struct SurfaceParams {
    pub max_iters: usize,
    /// Correspondence search radius, cm.
    pub match_dist: f64,
    /// Distance below which a map point counts as an inlier, cm.
    pub inlier_dist: f64,
    /// Relative RMSE change that counts as converged.
    pub rel_tol: f64,
    /// Nearest-neighbor grid cell size, cm.
    pub cell: f64,
}

impl Default for SurfaceParams {
    fn default() -> Self {
        SurfaceParams {
            max_iters: 50,
            match_dist: 5.0,
            inlier_dist: 0.5,
            rel_tol: 1e-6,
            cell: 1.0,
        }
    }
}

/// Map-to-surface error after rigid ICP. The distance direction is fixed:
/// map points are measured against their nearest ground-truth point, so
/// swapping the arguments measures a different (coverage-weighted)
/// quantity.
#[derive(Debug, Clone)]
pub struct SurfaceReport {
    /// RMSE of nearest-neighbor distances after alignment, cm; infinite
    /// when nothing matched.
    pub rmse: f64,
    /// Fraction of map points within `inlier_dist` of the surface.
    pub inlier_fraction: f64,
    pub matched: usize,
    pub iterations: usize,
    /// ICP failed: correspondence starvation or the RMSE rose five
    /// iterations in a row.
    pub diverged: bool,
    /// Alignment applied to the map points.
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    /// Distance direction label.
    pub direction: &'static str,
}

pub fn surface_rmse(
    map_points: &[Vector3<f64>],
    gt_points: &[Vector3<f64>],
    params: &SurfaceParams,
) -> Result<SurfaceReport, EvalError> {
    if map_points.is_empty() || gt_points.is_empty() {
        return Err(EvalError::EmptyPointSet);
    }
    let grid = PointGrid::build(gt_points, params.cell);
    let mut cur: Vec<Vector3<f64>> = map_points.to_vec();
    let mut r_total = Matrix3::identity();
    let mut t_total = Vector3::zeros();
    let mut prev_rmse = f64::INFINITY;
    let mut increases = 0usize;
    let mut diverged = false;
    let mut iterations = 0usize;
    for _ in 0..params.max_iters {
        let mut src = Vec::new();
        let mut dst = Vec::new();
        let mut sq = 0.0;
        for p in &cur {
            if let Some((j, d)) = grid.nearest(p, params.match_dist) {
                src.push(*p);
                dst.push(gt_points[j]);
                sq += d * d;
            }
        }
        if src.len() < 3 {
            diverged = true;
            break;
        }
        let rmse = (sq / src.len() as f64).sqrt();
        if rmse > prev_rmse + 1e-12 {
            increases += 1;
            if increases >= 5 {
                diverged = true;
                break;
            }
        } else {
            increases = 0;
        }
        if prev_rmse.is_finite() && (prev_rmse - rmse).abs() <= params.rel_tol * prev_rmse.max(1e-12)
        {
            break;
        }
        prev_rmse = rmse;
        let (r, t) = rigid_align(&src, &dst);
        for p in &mut cur {
            *p = r * *p + t;
        }
        r_total = r * r_total;
        t_total = r * t_total + t;
        iterations += 1;
    }
    let mut sq = 0.0;
    let mut matched = 0usize;
    let mut inliers = 0usize;
    for p in &cur {
        if let Some((_, d)) = grid.nearest(p, params.match_dist) {
            sq += d * d;
            matched += 1;
            if d <= params.inlier_dist {
                inliers += 1;
            }
        }
    }
    let rmse = if matched == 0 {
        diverged = true;
        f64::INFINITY
    } else {
        (sq / matched as f64).sqrt()
    };
    Ok(SurfaceReport {
        rmse,
        inlier_fraction: inliers as f64 / map_points.len() as f64,
        matched,
        iterations,
        diverged,
        rotation: r_total,
        translation: t_total,
        direction: "map_to_gt",
    })
}

#[derive(Debug, Clone)]
pub struct TimingReport {
    pub times_ms: Vec<f64>,
    pub mean_ms: f64,
    /// Largest mean over any `window` consecutive frames.
    pub peak_window_ms: f64,
    pub window: usize,
}

impl TimingReport {
    pub fn from_times(times_ms: Vec<f64>, window: usize) -> TimingReport {
        let mean_ms = if times_ms.is_empty() {
            0.0
        } else {
            times_ms.iter().sum::<f64>() / times_ms.len() as f64
        };
        let w = window.max(1).min(times_ms.len().max(1));
        let mut peak: f64 = 0.0;
        if !times_ms.is_empty() {
            let mut sum: f64 = times_ms[..w].iter().sum();
            peak = sum / w as f64;
            for i in w..times_ms.len() {
                sum += times_ms[i] - times_ms[i - w];
                peak = peak.max(sum / w as f64);
            }
        }
        TimingReport {
            times_ms,
            mean_ms,
            peak_window_ms: peak,
            window: w,
        }
    }
}

/// A stage that failed on one frame; the frame still advances with the
/// remaining sensors.
#[derive(Debug, Clone)]
pub struct FrameFailure {
    pub frame: usize,
    pub stage: &'static str,
    pub message: String,
}

#[derive(Debug)]
pub struct PipelineOutput {
    /// Fused pose per processed frame.
    pub trajectory: Vec<TimedPose>,
    /// Tracker poses for frames where tracking succeeded.
    pub visual: Vec<TimedPose>,
    /// Reliable magnetic fixes.
    pub magnetic: Vec<TimedPose5>,
    pub fusion_rows: Vec<FusionLogRow>,
    pub timing: TimingReport,
    pub map: SurfelMap,
    pub failures: Vec<FrameFailure>,
    pub closures_attempted: usize,
    pub closures_applied: usize,
    pub frames_processed: usize,
}

/// Run the full pipeline over a dataset.
///
/// The filter starts from the dataset's first ground-truth pose (the
/// docked start position); everything after that comes from the sensors.
/// Per-frame stage failures are recorded and the frame continues with the
/// remaining observations; only I/O errors abort. Deterministic for a
/// fixed dataset and config.
pub fn run_pipeline(
    ds: &LoadedDataset,
    config: &PipelineConfig,
) -> Result<PipelineOutput, EvalError> {
    config.validate()?;
    if ds.is_empty() {
        return Err(EvalError::EmptyPointSet);
    }
    let k = ds.config.k;
    let mut fusion_params = config.fusion.clone();
    // the dataset's sensor geometry wins over config defaults
    fusion_params.magnet = ds.config.magnet;
    fusion_params.workspace_min = ds.config.array.workspace_min;
    fusion_params.workspace_max = ds.config.array.workspace_max;
    let init = ds.gt[0].pose;
    let mut filter = SwitchingFilter::new(fusion_params, &init, config.seed);
    let mut map = SurfelMap::new(config.surfel);
    let mut indices: Vec<usize> = (0..ds.len()).step_by(config.frame_stride).collect();
    if config.max_frames > 0 {
        indices.truncate(config.max_frames);
    }

    let mut out = PipelineOutput {
        trajectory: Vec::with_capacity(indices.len()),
        visual: Vec::new(),
        magnetic: Vec::new(),
        fusion_rows: Vec::with_capacity(indices.len()),
        timing: TimingReport::from_times(Vec::new(), 1),
        map: SurfelMap::new(config.surfel),
        failures: Vec::new(),
        closures_attempted: 0,
        closures_applied: 0,
        frames_processed: 0,
    };
    let mut times_ms = Vec::with_capacity(indices.len());
    let mut pose_guess = init;
    let mut prev_t = ds.gt[indices[0]].timestamp;
    let mut prev_depth: Option<DepthImage> = None;

    for (step, &i) in indices.iter().enumerate() {
        let started = Instant::now();
        let timestamp = ds.gt[i].timestamp;
        let (rgb, stored_depth) = ds.frame(i)?;
        let raw_gray = rgb.luminance();
        let intensity = if config.enhance {
            match enhance_gray(&raw_gray, &config.vessel) {
                Ok(e) => e,
                Err(e) => {
                    out.failures.push(FrameFailure {
                        frame: i,
                        stage: "enhance",
                        message: e.to_string(),
                    });
                    raw_gray.clone()
                }
            }
        } else {
            raw_gray.clone()
        };
        // depth recovery sees the raw shading, not the enhanced image
        let depth = match config.depth_source {
            DepthSource::Dataset => stored_depth,
            DepthSource::Shading => {
                let init_depth = prev_depth
                    .take()
                    .unwrap_or_else(|| DepthImage::new_constant(k.width, k.height, 5.0));
                match depth_from_shading(&raw_gray, &k, &config.shading, &config.sfs, &init_depth)
                {
                    Ok(sol) => sol.depth,
                    Err(e) => {
                        out.failures.push(FrameFailure {
                            frame: i,
                            stage: "depth",
                            message: e.to_string(),
                        });
                        DepthImage::new_invalid(k.width, k.height)
                    }
                }
            }
        };
        if config.depth_source == DepthSource::Shading && depth.valid_count() > 0 {
            prev_depth = Some(depth.clone());
        }
        let frame = Frame::new(timestamp, None, intensity, depth, &k);

        let mut observations: Vec<SensorObservation> = Vec::with_capacity(2);
        let mut tracked: Option<(f64, Pose)> = None;
        let mut model_covers = false;
        if !map.surfels.is_empty() && frame.depth.valid_count() > 0 {
            let predicted = predict_view(&map, &pose_guess, &k);
            if predicted.empty {
                out.failures.push(FrameFailure {
                    frame: i,
                    stage: "predict",
                    message: "model view empty".into(),
                });
            } else {
                model_covers = true;
                let result = track(&frame, &predicted.view, &k, &Pose::identity(), &config.tracker);
                if result.degenerate {
                    out.failures.push(FrameFailure {
                        frame: i,
                        stage: "track",
                        message: format!(
                            "degenerate ({} iterations, inliers {:.2})",
                            result.iterations, result.inlier_fraction
                        ),
                    });
                } else {
                    let pose = compose(&pose_guess, &result.pose);
                    out.visual.push(TimedPose { timestamp, pose });
                    observations.push(SensorObservation::Visual { pose, valid: true });
                    tracked = Some((result.inlier_fraction, pose));
                }
            }
        }

        match subtract_actuator(&ds.readings[i], &ds.config.array, &ds.config.actuators) {
            Ok(corrected) => {
                let warm = Pose5::from_pose(&pose_guess, &ds.config.magnet);
                match localize_5dof(&corrected, &ds.config.array, &ds.config.magnet, &warm) {
                    Ok(loc) => {
                        if !loc.unreliable {
                            out.magnetic.push(TimedPose5 {
                                timestamp,
                                pose: loc.pose,
                            });
                        }
                        observations.push(SensorObservation::Magnetic {
                            pose: loc.pose,
                            valid: !loc.unreliable,
                        });
                    }
                    Err(e) => out.failures.push(FrameFailure {
                        frame: i,
                        stage: "maglocalize",
                        message: e.to_string(),
                    }),
                }
            }
            Err(e) => out.failures.push(FrameFailure {
                frame: i,
                stage: "maglocalize",
                message: e.to_string(),
            }),
        }

        // the first frame has no prior interval: measurement update only
        let output = if step == 0 {
            filter.update(&observations)
        } else {
            filter.step(&ConstantVelocity, timestamp - prev_t, &observations)
        };
        let fused = output.pose;
        out.fusion_rows.push(FusionLogRow::from_output(timestamp, &output));
        out.trajectory.push(TimedPose {
            timestamp,
            pose: fused,
        });

        // integrate only frames the model agrees with: a corrupted frame can
        // register with decent inliers yet land centimetres from the fused
        // posterior, and once it is in the map every later prediction is
        // poisoned. Where the map has no coverage there is nothing to
        // disagree with, so those frames bootstrap on the fused pose alone.
        let visual_ok = tracked.is_some_and(|(inliers, pose)| {
            let gap = compose(&crate::geometry::invert(&fused), &pose);
            inliers >= config.min_map_inliers
                && gap.translation.norm() <= config.max_map_offset
                && gap.rotation_angle() <= config.max_map_tilt
        });
        if frame.depth.valid_count() > 0 && (!model_covers || visual_ok) {
            integrate_frame(&mut map, &frame, &fused, &k);
        }
        if config.close_loop_every > 0 && step > 0 && step % config.close_loop_every == 0 {
            out.closures_attempted += 1;
            let outcome = close_loop(&mut map, &frame, &fused, &k, &config.close_loop);
            if outcome.applied {
                out.closures_applied += 1;
            }
        }

        pose_guess = fused;
        prev_t = timestamp;
        out.frames_processed += 1;
        times_ms.push(started.elapsed().as_secs_f64() * 1e3);
    }

    out.timing = TimingReport::from_times(times_ms, (ds.config.rate.round() as usize).max(1));
    out.map = map;
    Ok(out)
}

/// Sample the ground-truth surface by backprojecting stored depth frames
/// through the ground-truth poses.
pub fn sample_gt_surface(
    ds: &LoadedDataset,
    frame_stride: usize,
    px_stride: usize,
) -> Result<Vec<Vector3<f64>>, EvalError> {
    let k = ds.config.k;
    let mut points = Vec::new();
    for i in (0..ds.len()).step_by(frame_stride.max(1)) {
        let depth = DepthImage::load_pgm16(&ds.depth_path(i))?;
        let pose = ds.gt[i].pose;
        for y in (0..k.height).step_by(px_stride.max(1)) {
            for x in (0..k.width).step_by(px_stride.max(1)) {
                if let Some(z) = depth.get(x, y) {
                    let p = k.backproject(x as f64, y as f64, z);
                    points.push(pose.transform(&p));
                }
            }
        }
    }
    Ok(points)
}

/// Human-readable run summary.
pub fn summarize(out: &PipelineOutput, ate: Option<&AteReport>) -> String {
    let mut s = String::new();
    s.push_str(&format!("frames processed   {}\n", out.frames_processed));
    s.push_str(&format!(
        "tracking poses     {} ({} failures logged)\n",
        out.visual.len(),
        out.failures.len()
    ));
    s.push_str(&format!("magnetic fixes     {}\n", out.magnetic.len()));
    s.push_str(&format!(
        "surfels            {} ({} active)\n",
        out.map.surfels.len(),
        out.map.partition_counts().active
    ));
    s.push_str(&format!(
        "loop closures      {} applied of {} attempted\n",
        out.closures_applied, out.closures_attempted
    ));
    s.push_str(&format!(
        "frame time         mean {:.1} ms, peak {:.1} ms over {} frames\n",
        out.timing.mean_ms, out.timing.peak_window_ms, out.timing.window
    ));
    if let Some(a) = ate {
        s.push_str(&format!(
            "ATE RMSE           {:.4} cm (x {:.4}, y {:.4}, z {:.4}; {} pairs)\n",
            a.rmse, a.per_axis[0], a.per_axis[1], a.per_axis[2], a.pairs
        ));
    }
    s
}

/// Write trajectories, fusion log, map, timing CSV, optional ATE CSV, and
/// the text summary into `dir`.
pub fn write_outputs(
    dir: &Path,
    out: &PipelineOutput,
    ate: Option<&AteReport>,
) -> Result<(), EvalError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_trajectory(&dir.join("trajectory.txt"), &out.trajectory)?;
    write_trajectory(&dir.join("visual_trajectory.txt"), &out.visual)?;
    write_heading_trajectory(&dir.join("magnetic_trajectory.txt"), &out.magnetic)?;
    write_fusion_log(&dir.join("fusion_log.csv"), &out.fusion_rows)?;
    save_map_ply(&dir.join("map.ply"), &out.map)?;
    let timing_path = dir.join("timing.csv");
    let mut timing = String::from("frame,ms\n");
    for (i, ms) in out.timing.times_ms.iter().enumerate() {
        timing.push_str(&format!("{i},{ms:.3}\n"));
    }
    std::fs::write(&timing_path, timing).map_err(io_err(&timing_path))?;
    if let Some(a) = ate {
        let ate_path = dir.join("ate.csv");
        let text = format!(
            "rmse_cm,x_cm,y_cm,z_cm,pairs\n{:.6},{:.6},{:.6},{:.6},{}\n",
            a.rmse, a.per_axis[0], a.per_axis[1], a.per_axis[2], a.pairs
        );
        std::fs::write(&ate_path, text).map_err(io_err(&ate_path))?;
    }
    let failures_path = dir.join("failures.csv");
    let mut failures = String::from("frame,stage,message\n");
    for f in &out.failures {
        failures.push_str(&format!(
            "{},{},{}\n",
            f.frame,
            f.stage,
            f.message.replace(',', ";")
        ));
    }
    std::fs::write(&failures_path, failures).map_err(io_err(&failures_path))?;
    let summary_path = dir.join("summary.txt");
    std::fs::write(&summary_path, summarize(out, ate)).map_err(io_err(&summary_path))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{render_dataset, DatasetConfig, FailureMode, FailureSchedule};
    use nalgebra::{Rotation3, Unit};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn grid_track(n: usize, seed: u64) -> Vec<TimedPose> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| TimedPose {
                timestamp: i as f64,
                pose: Pose::new(
                    Matrix3::identity(),
                    Vector3::new(
                        rng.gen_range(-10.0..10.0),
                        rng.gen_range(-10.0..10.0),
                        rng.gen_range(-10.0..10.0),
                    ),
                ),
            })
            .collect()
    }

    fn random_rigid(rng: &mut ChaCha8Rng) -> Pose {
        let axis = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        Pose::new(
            Rotation3::from_axis_angle(&Unit::new_normalize(axis), rng.gen_range(0.1..2.0))
                .into_inner(),
            Vector3::new(
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
            ),
        )
    }

    #[test]
    fn identical_trajectories_have_zero_ate() {
        let gt = grid_track(40, 1);
        let report = ate_rmse(&gt, &gt, 0.1).unwrap();
        // the closed-form alignment leaves only rounding dust
        assert!(report.rmse < 1e-12, "rmse {}", report.rmse);
        assert!(report.per_axis.iter().all(|&a| a < 1e-12));
        assert_eq!(report.pairs, 40);
    }

    #[test]
    fn rigid_offset_is_absorbed_by_alignment() {
        let gt = grid_track(40, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let offset = random_rigid(&mut rng);
        let est: Vec<TimedPose> = gt
            .iter()
            .map(|tp| TimedPose {
                timestamp: tp.timestamp,
                pose: compose(&offset, &tp.pose),
            })
            .collect();
        let report = ate_rmse(&est, &gt, 0.1).unwrap();
        assert!(report.rmse < 1e-9, "rmse {}", report.rmse);
    }

    #[test]
    fn ate_is_invariant_to_rigid_pretransforms() {
        let gt = grid_track(50, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let noise = Normal::new(0.0, 0.3).unwrap();
        let est: Vec<TimedPose> = gt
            .iter()
            .map(|tp| TimedPose {
                timestamp: tp.timestamp,
                pose: Pose::new(
                    tp.pose.rotation,
                    tp.pose.translation
                        + Vector3::new(
                            noise.sample(&mut rng),
                            noise.sample(&mut rng),
                            noise.sample(&mut rng),
                        ),
                ),
            })
            .collect();
        let base = ate_rmse(&est, &gt, 0.1).unwrap().rmse;
        for seed in 0..5u64 {
            let mut prng = ChaCha8Rng::seed_from_u64(90 + seed);
            let pre = random_rigid(&mut prng);
            let moved: Vec<TimedPose> = est
                .iter()
                .map(|tp| TimedPose {
                    timestamp: tp.timestamp,
                    pose: compose(&pre, &tp.pose),
                })
                .collect();
            let rmse = ate_rmse(&moved, &gt, 0.1).unwrap().rmse;
            assert!((rmse - base).abs() < 1e-9, "{rmse} vs {base}");
        }
    }

    #[test]
    fn too_few_pairs_is_an_error() {
        let gt = grid_track(2, 6);
        assert!(matches!(
            ate_rmse(&gt, &gt, 0.1),
            Err(EvalError::TooFewPairs { got: 2, .. })
        ));
        // timestamps out of range associate nothing
        let est: Vec<TimedPose> = grid_track(10, 7)
            .into_iter()
            .map(|mut tp| {
                tp.timestamp += 100.0;
                tp
            })
            .collect();
        let gt = grid_track(10, 7);
        assert!(matches!(
            ate_rmse(&est, &gt, 0.2),
            Err(EvalError::TooFewPairs { got: 0, .. })
        ));
    }

    /// iid Gaussian position noise of std sigma per axis gives RMSE near
    /// sigma*sqrt(3); the rigid alignment absorbs only ~6 of 3n degrees of
    /// freedom.
    #[test]
    fn gaussian_noise_rmse_matches_the_expected_band() {
        let expected = 0.5 * 3.0f64.sqrt();
        let mut ratios = Vec::new();
        for seed in 0..10u64 {
            let gt = grid_track(300, 100 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
            let noise = Normal::new(0.0, 0.5).unwrap();
            let est: Vec<TimedPose> = gt
                .iter()
                .map(|tp| TimedPose {
                    timestamp: tp.timestamp,
                    pose: Pose::new(
                        tp.pose.rotation,
                        tp.pose.translation
                            + Vector3::new(
                                noise.sample(&mut rng),
                                noise.sample(&mut rng),
                                noise.sample(&mut rng),
                            ),
                    ),
                })
                .collect();
            let ratio = ate_rmse(&est, &gt, 0.1).unwrap().rmse / expected;
            assert!((0.8..1.1).contains(&ratio), "trial ratio {ratio}");
            ratios.push(ratio);
        }
        let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
        assert!((0.93..1.03).contains(&mean), "mean ratio {mean}");
    }

    #[test]
    fn association_respects_the_time_gate() {
        let gt = grid_track(10, 8);
        let est: Vec<TimedPose> = gt
            .iter()
            .map(|tp| TimedPose {
                timestamp: tp.timestamp + 0.1,
                pose: tp.pose,
            })
            .collect();
        assert_eq!(ate_rmse(&est, &gt, 0.2).unwrap().pairs, 10);
        assert!(ate_rmse(&est, &gt, 0.05).is_err());
    }

    fn plane_grid(n: usize, spacing: f64) -> Vec<Vector3<f64>> {
        let mut pts = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                pts.push(Vector3::new(i as f64 * spacing, j as f64 * spacing, 0.0));
            }
        }
        pts
    }

    #[test]
    fn subsampled_surface_has_near_zero_rmse() {
        let gt = plane_grid(80, 0.1);
        let map: Vec<Vector3<f64>> = gt.iter().step_by(7).copied().collect();
        let report = surface_rmse(&map, &gt, &SurfaceParams::default()).unwrap();
        assert!(report.rmse < 1e-6, "rmse {}", report.rmse);
        assert!(!report.diverged);
        assert_eq!(report.inlier_fraction, 1.0);
    }

    #[test]
    fn normal_noise_sets_the_rmse_level() {
        let gt = plane_grid(100, 0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let noise = Normal::new(0.0, 0.2).unwrap();
        let map: Vec<Vector3<f64>> = gt
            .iter()
            .map(|p| p + Vector3::new(0.0, 0.0, noise.sample(&mut rng)))
            .collect();
        let report = surface_rmse(&map, &gt, &SurfaceParams::default()).unwrap();
        assert!(
            (report.rmse - 0.2).abs() < 0.04,
            "rmse {} should be near 0.2",
            report.rmse
        );
        assert!(!report.diverged);
    }

    #[test]
    fn disjoint_point_sets_are_flagged_divergent() {
        let gt = plane_grid(20, 0.1);
        let map: Vec<Vector3<f64>> = plane_grid(20, 0.1)
            .into_iter()
            .map(|p| p + Vector3::new(100.0, 0.0, 0.0))
            .collect();
        let report = surface_rmse(&map, &gt, &SurfaceParams::default()).unwrap();
        assert!(report.diverged);
        assert!(!report.rmse.is_finite());
        assert_eq!(report.matched, 0);
    }

    #[test]
    fn icp_recovers_a_small_rigid_offset() {
        // curved random cloud: a regular flat lattice would alias under
        // in-plane shifts and stall ICP at a half-spacing register
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let gt: Vec<Vector3<f64>> = (0..4000)
            .map(|_| {
                let x = rng.gen_range(0.0..6.0);
                let y = rng.gen_range(0.0..6.0);
                Vector3::new(x, y, 0.05 * (x * x + y * y))
            })
            .collect();
        let offset = Pose::new(
            Rotation3::from_axis_angle(&Vector3::z_axis(), 2.0f64.to_radians()).into_inner(),
            Vector3::new(0.3, -0.2, 0.1),
        );
        let map: Vec<Vector3<f64>> = gt.iter().map(|p| offset.transform(p)).collect();
        let report = surface_rmse(&map, &gt, &SurfaceParams::default()).unwrap();
        assert!(report.rmse < 0.01, "rmse {}", report.rmse);
        assert!(!report.diverged);
        let inv = crate::geometry::invert(&offset);
        assert!((report.rotation - inv.rotation).norm() < 0.02);
        assert!((report.translation - inv.translation).norm() < 0.05);
    }

    #[test]
    fn direction_is_map_to_gt_and_matters() {
        let dense = plane_grid(50, 0.1);
        // sparse subset plus nothing else: subset -> dense is exact,
        // dense -> subset pays the coverage gap
        let sparse: Vec<Vector3<f64>> = dense.iter().step_by(91).copied().collect();
        let forward = surface_rmse(&sparse, &dense, &SurfaceParams::default()).unwrap();
        let reverse = surface_rmse(&dense, &sparse, &SurfaceParams::default()).unwrap();
        assert_eq!(forward.direction, "map_to_gt");
        assert!(forward.rmse < 1e-6);
        assert!(reverse.rmse > 10.0 * (forward.rmse + 1e-9));
    }

    #[test]
    fn timing_report_windows_behave() {
        let report = TimingReport::from_times(vec![1.0, 1.0, 10.0, 10.0, 1.0, 1.0], 2);
        assert!((report.mean_ms - 4.0).abs() < 1e-12);
        assert!((report.peak_window_ms - 10.0).abs() < 1e-12);
        let empty = TimingReport::from_times(Vec::new(), 5);
        assert_eq!(empty.mean_ms, 0.0);
        assert_eq!(empty.peak_window_ms, 0.0);
    }

    fn small_dataset(dir: &Path, seed: u64, schedule: &FailureSchedule) -> LoadedDataset {
        let config = DatasetConfig::small(seed);
        render_dataset(dir, &config, schedule).unwrap();
        LoadedDataset::load(dir).unwrap()
    }

    fn fast_config(seed: u64) -> PipelineConfig {
        let mut config = PipelineConfig::default();
        config.seed = seed;
        config.fusion.n_particles = 300;
        config
    }

    #[test]
    fn pipeline_tracks_a_clean_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let ds = small_dataset(dir.path(), 5, &FailureSchedule::empty());
        let out = run_pipeline(&ds, &fast_config(5)).unwrap();
        assert_eq!(out.frames_processed, ds.len());
        assert_eq!(out.trajectory.len(), ds.len());
        assert_eq!(out.fusion_rows.len(), ds.len());
        assert!(out.visual.len() > ds.len() / 2, "tracking mostly succeeds");
        assert!(!out.map.surfels.is_empty());
        let ate = ate_rmse(&out.trajectory, &ds.gt, 0.5 / ds.config.rate).unwrap();
        assert!(ate.rmse < 1.0, "clean small run should stay under 1 cm, got {}", ate.rmse);
    }

    #[test]
    fn pipeline_is_deterministic_per_seed() {
        let dir = tempfile::tempdir().unwrap();
        let ds = small_dataset(dir.path(), 6, &FailureSchedule::empty());
        let mut config = fast_config(6);
        config.max_frames = 20;
        let a = run_pipeline(&ds, &config).unwrap();
        let b = run_pipeline(&ds, &config).unwrap();
        assert_eq!(a.trajectory.len(), b.trajectory.len());
        for (x, y) in a.trajectory.iter().zip(&b.trajectory) {
            assert_eq!(x.pose.translation, y.pose.translation);
            assert_eq!(x.pose.rotation, y.pose.rotation);
        }
        let da = tempfile::tempdir().unwrap();
        let db = tempfile::tempdir().unwrap();
        write_outputs(da.path(), &a, None).unwrap();
        write_outputs(db.path(), &b, None).unwrap();
        let ta = std::fs::read(da.path().join("trajectory.txt")).unwrap();
        let tb = std::fs::read(db.path().join("trajectory.txt")).unwrap();
        assert_eq!(ta, tb, "trajectory files must be bit-identical");
    }

    #[test]
    fn pipeline_survives_sensor_failures_and_writes_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let schedule = FailureSchedule::staggered(
            (3.0, 6.0),
            FailureMode::Garbage,
            (8.0, 10.0),
            FailureMode::Garbage,
        );
        let ds = small_dataset(dir.path(), 7, &schedule);
        let out = run_pipeline(&ds, &fast_config(7)).unwrap();
        assert_eq!(out.frames_processed, ds.len());
        let ate = ate_rmse(&out.trajectory, &ds.gt, 0.5 / ds.config.rate).unwrap();
        assert!(ate.rmse < 3.0, "failures tolerated, got {}", ate.rmse);
        let odir = tempfile::tempdir().unwrap();
        write_outputs(odir.path(), &out, Some(&ate)).unwrap();
        for name in [
            "trajectory.txt",
            "visual_trajectory.txt",
            "magnetic_trajectory.txt",
            "fusion_log.csv",
            "map.ply",
            "timing.csv",
            "ate.csv",
            "failures.csv",
            "summary.txt",
        ] {
            assert!(odir.path().join(name).exists(), "missing {name}");
        }
        let back = crate::trajectory::read_trajectory(&odir.path().join("trajectory.txt")).unwrap();
        assert_eq!(back.len(), out.trajectory.len());
        let summary = std::fs::read_to_string(odir.path().join("summary.txt")).unwrap();
        assert!(summary.contains("ATE RMSE"));
    }

    #[test]
    fn mapped_surface_stays_near_the_ground_truth_surface() {
        let dir = tempfile::tempdir().unwrap();
        let ds = small_dataset(dir.path(), 8, &FailureSchedule::empty());
        let out = run_pipeline(&ds, &fast_config(8)).unwrap();
        let gt = sample_gt_surface(&ds, 5, 3).unwrap();
        let map_points: Vec<Vector3<f64>> =
            out.map.surfels.iter().map(|s| s.position).collect();
        let report = surface_rmse(&map_points, &gt, &SurfaceParams::default()).unwrap();
        assert!(!report.diverged);
        assert!(report.rmse < 0.5, "surface rmse {}", report.rmse);
    }
}
