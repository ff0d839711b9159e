//! Frame-to-model pose tracking: joint point-to-plane ICP and photometric
//! alignment minimized by Gauss-Newton over a 3-level image pyramid.
//!
//! The estimated pose maps frame-camera coordinates into view-camera
//! coordinates and is updated left-multiplicatively, `T <- exp(xi) T`.
//! Twist vectors order rotation first, translation second, matching
//! [`crate::geometry::Twist`].

use crate::camera::{normal_map, point_cloud, CameraIntrinsics, DepthImage};
use crate::geometry::{exp_se3, Pose, Twist};
use crate::image::{GrayImage, RgbImage};
use nalgebra::{Matrix6, Vector3, Vector6};

/// Input frame with derived geometry. The point map is the back-projection
/// of the depth map through the intrinsics; normals are unit length where
/// defined.
#[derive(Debug, Clone)]
pub struct Frame {
    pub timestamp: f64,
    pub color: Option<RgbImage>,
    /// Intensity used by the photometric term (vessel-enhanced grayscale
    /// in the full pipeline).
    pub intensity: GrayImage,
    pub depth: DepthImage,
    pub points: Vec<Option<Vector3<f64>>>,
    pub normals: Vec<Option<Vector3<f64>>>,
}

impl Frame {
    pub fn new(
        timestamp: f64,
        color: Option<RgbImage>,
        intensity: GrayImage,
        depth: DepthImage,
        k: &CameraIntrinsics,
    ) -> Frame {
        assert_eq!(intensity.width, depth.width);
        assert_eq!(intensity.height, depth.height);
        let points = point_cloud(&depth, k);
        let normals = normal_map(&points, depth.width, depth.height);
        Frame {
            timestamp,
            color,
            intensity,
            depth,
            points,
            normals,
        }
    }
}

/// Model prediction rendered at the previous pose: what the tracker aligns
/// the incoming frame against.
#[derive(Debug, Clone)]
pub struct ModelView {
    pub intensity: GrayImage,
    pub depth: DepthImage,
    pub points: Vec<Option<Vector3<f64>>>,
    pub normals: Vec<Option<Vector3<f64>>>,
}

impl ModelView {
    pub fn new(intensity: GrayImage, depth: DepthImage, k: &CameraIntrinsics) -> ModelView {
        assert_eq!(intensity.width, depth.width);
        assert_eq!(intensity.height, depth.height);
        let points = point_cloud(&depth, k);
        let normals = normal_map(&points, depth.width, depth.height);
        ModelView {
            intensity,
            depth,
            points,
            normals,
        }
    }

    /// Treat a frame as the model prediction (frame-to-frame tracking).
    pub fn from_frame(frame: &Frame) -> ModelView {
        ModelView {
            intensity: frame.intensity.clone(),
            depth: frame.depth.clone(),
            points: frame.points.clone(),
            normals: frame.normals.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrackerParams {
    /// Photometric weight in E = E_icp + w_rgb * E_rgb.
    pub w_rgb: f64,
    pub pyramid_levels: usize,
    pub max_iters_per_level: usize,
    /// Below this many ICP correspondences the pose is unreliable.
    pub min_correspondences: usize,
    /// Depth compatibility gate for association, cm.
    pub depth_gate: f64,
    /// Normal compatibility gate for association, radians.
    pub normal_gate: f64,
    /// Huber thresholds: cm for geometry, intensity units for photometry.
    pub huber_icp: f64,
    pub huber_rgb: f64,
    /// Normal-equation condition number above which the solve is declared
    /// degenerate.
    pub condition_limit: f64,
    /// Convergence threshold on the accepted twist norm.
    pub step_tol: f64,
    /// Re-associate ICP pairs only after the pose has moved this far
    /// (twist norm) since the last association. Sub-threshold steps leave
    /// the pixel-rounded matches unchanged anyway, and a fixed pair set
    /// near the optimum lets Gauss-Newton terminate quadratically instead
    /// of chasing association flips.
    pub reassoc_tol: f64,
}

impl Default for TrackerParams {
    fn default() -> Self {
        TrackerParams {
            w_rgb: 0.13,
            pyramid_levels: 3,
            max_iters_per_level: 10,
            min_correspondences: 50,
            depth_gate: 5.0,
            normal_gate: 30.0_f64.to_radians(),
            huber_icp: 0.3,
            huber_rgb: 0.05,
            condition_limit: 1e8,
            step_tol: 1e-6,
            reassoc_tol: 1e-3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrackingResult {
    /// Frame-to-view pose (applies to frame-camera points).
    pub pose: Pose,
    /// Final plain sum-of-squares energies at the finest level.
    pub e_icp: f64,
    pub e_rgb: f64,
    /// Accepted Gauss-Newton steps across all levels.
    pub iterations: usize,
    /// Associated fraction of valid frame pixels at the finest level.
    pub inlier_fraction: f64,
    /// Too few correspondences or ill-conditioned normal equations; the
    /// caller should treat this pose as a failed sensor sample.
    pub degenerate: bool,
    /// (before, after) robust energy of each accepted step, finest level.
    pub energy_steps: Vec<(f64, f64)>,
}

/// One associated point-to-plane constraint. `p_frame` is in frame-camera
/// coordinates; the matched vertex and normal are in view-camera
/// coordinates.
#[derive(Debug, Clone, Copy)]
pub struct IcpPair {
    pub p_frame: Vector3<f64>,
    pub v_view: Vector3<f64>,
    pub n_view: Vector3<f64>,
}

/// A frame pixel carrying intensity and depth for photometric warping.
#[derive(Debug, Clone, Copy)]
pub struct RgbPair {
    pub p_frame: Vector3<f64>,
    pub i_frame: f64,
}

struct Level {
    intensity: GrayImage,
    depth: DepthImage,
    points: Vec<Option<Vector3<f64>>>,
    normals: Vec<Option<Vector3<f64>>>,
    k: CameraIntrinsics,
}

fn build_levels(
    intensity: &GrayImage,
    depth: &DepthImage,
    k: &CameraIntrinsics,
    levels: usize,
) -> Vec<Level> {
    let mut out: Vec<Level> = Vec::with_capacity(levels);
    for i in 0..levels {
        let (intensity, depth, k) = if i == 0 {
            (intensity.clone(), depth.clone(), *k)
        } else {
            let prev = &out[i - 1];
            if prev.k.width / 2 < 16 || prev.k.height / 2 < 16 {
                break;
            }
            (
                prev.intensity.downsample_half(),
                prev.depth.downsample_half(),
                prev.k.half(),
            )
        };
        let points = point_cloud(&depth, &k);
        let normals = normal_map(&points, depth.width, depth.height);
        out.push(Level {
            intensity,
            depth,
            points,
            normals,
            k,
        });
    }
    out
}

/// Projective data association: transform each frame vertex by T, project
/// into the view, and keep matches passing the depth and normal gates.
/// Returns the pairs plus the number of valid frame pixels considered.
pub fn associate(
    frame_points: &[Option<Vector3<f64>>],
    frame_normals: &[Option<Vector3<f64>>],
    view: &ModelView,
    k: &CameraIntrinsics,
    t: &Pose,
    depth_gate: f64,
    normal_gate: f64,
) -> (Vec<IcpPair>, usize) {
    let width = view.depth.width;
    let height = view.depth.height;
    let mut pairs = Vec::new();
    let mut candidates = 0usize;
    let cos_gate = normal_gate.cos();
    for (i, fp) in frame_points.iter().enumerate() {
        let (Some(pf), Some(nf)) = (fp, frame_normals[i]) else {
            continue;
        };
        candidates += 1;
        let p = t.transform(pf);
        let Some((px, py)) = k.project(&p) else {
            continue;
        };
        let (ux, uy) = (px.round(), py.round());
        if ux < 0.0 || uy < 0.0 || ux >= width as f64 || uy >= height as f64 {
            continue;
        }
        let idx = uy as usize * width + ux as usize;
        let (Some(v), Some(n)) = (view.points[idx], view.normals[idx]) else {
            continue;
        };
        if (v.z - p.z).abs() > depth_gate {
            continue;
        }
        if t.rotate(&nf).dot(&n) < cos_gate {
            continue;
        }
        pairs.push(IcpPair {
            p_frame: *pf,
            v_view: v,
            n_view: n,
        });
    }
    (pairs, candidates)
}

/// Point-to-plane residual r = (v - T p) . n for fixed pairs.
pub fn icp_residuals(pairs: &[IcpPair], t: &Pose) -> Vec<f64> {
    pairs
        .iter()
        .map(|pr| (pr.v_view - t.transform(&pr.p_frame)).dot(&pr.n_view))
        .collect()
}

/// Jacobian of each residual with respect to the left-multiplied twist
/// (rotation block first): dr/dw = -(T p) x n, dr/dv = -n.
pub fn icp_jacobians(pairs: &[IcpPair], t: &Pose) -> Vec<Vector6<f64>> {
    pairs
        .iter()
        .map(|pr| {
            let p = t.transform(&pr.p_frame);
            let jw = -p.cross(&pr.n_view);
            let n = pr.n_view;
            Vector6::new(jw.x, jw.y, jw.z, -n.x, -n.y, -n.z)
        })
        .collect()
}

/// Value and exact gradient of the bilinear interpolant at (x, y).
fn bilinear_with_gradient(img: &GrayImage, x: f64, y: f64) -> Option<(f64, f64, f64)> {
    if img.width < 2 || img.height < 2 {
        return None;
    }
    let (wm, hm) = (img.width as f64 - 1.0, img.height as f64 - 1.0);
    if !(0.0..=wm).contains(&x) || !(0.0..=hm).contains(&y) {
        return None;
    }
    let x0 = (x.floor() as usize).min(img.width - 2);
    let y0 = (y.floor() as usize).min(img.height - 2);
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let v00 = img.get(x0, y0);
    let v10 = img.get(x0 + 1, y0);
    let v01 = img.get(x0, y0 + 1);
    let v11 = img.get(x0 + 1, y0 + 1);
    let value = v00 * (1.0 - fx) * (1.0 - fy) + v10 * fx * (1.0 - fy) + v01 * (1.0 - fx) * fy
        + v11 * fx * fy;
    let gx = (v10 - v00) * (1.0 - fy) + (v11 - v01) * fy;
    let gy = (v01 - v00) * (1.0 - fx) + (v11 - v10) * fx;
    Some((value, gx, gy))
}

/// Photometric residual r = I_frame(u) - I_view(pi(K T p(u))); None when
/// the warp leaves the view.
pub fn rgb_residuals(
    pairs: &[RgbPair],
    view_intensity: &GrayImage,
    k: &CameraIntrinsics,
    t: &Pose,
) -> Vec<Option<f64>> {
    pairs
        .iter()
        .map(|pr| {
            let p = t.transform(&pr.p_frame);
            let (px, py) = k.project(&p)?;
            let (value, _, _) = bilinear_with_gradient(view_intensity, px, py)?;
            Some(pr.i_frame - value)
        })
        .collect()
}

/// Chain-rule Jacobian of each photometric residual through projection and
/// the bilinear image gradient; None where the residual is undefined.
pub fn rgb_jacobians(
    pairs: &[RgbPair],
    view_intensity: &GrayImage,
    k: &CameraIntrinsics,
    t: &Pose,
) -> Vec<Option<Vector6<f64>>> {
    pairs
        .iter()
        .map(|pr| {
            let p = t.transform(&pr.p_frame);
            let (px, py) = k.project(&p)?;
            let (_, gx, gy) = bilinear_with_gradient(view_intensity, px, py)?;
            // a = J_pi^T (gx, gy); dr/dw = a x p, dr/dv = -a
            let a = Vector3::new(
                gx * k.fx / p.z,
                gy * k.fy / p.z,
                -(gx * k.fx * p.x + gy * k.fy * p.y) / (p.z * p.z),
            );
            let jw = a.cross(&p);
            Some(Vector6::new(jw.x, jw.y, jw.z, -a.x, -a.y, -a.z))
        })
        .collect()
}

/// All valid-depth frame pixels as photometric constraints.
pub fn rgb_pairs(frame_points: &[Option<Vector3<f64>>], intensity: &GrayImage) -> Vec<RgbPair> {
    let mut out = Vec::new();
    for y in 0..intensity.height {
        for x in 0..intensity.width {
            if let Some(p) = frame_points[y * intensity.width + x] {
                out.push(RgbPair {
                    p_frame: p,
                    i_frame: intensity.get(x, y),
                });
            }
        }
    }
    out
}

/// Geometric energy, residuals, and Jacobians at T. The energy is the
/// plain sum of squared point-to-plane residuals.
pub struct IcpEval {
    pub energy: f64,
    pub residuals: Vec<f64>,
    pub jacobians: Vec<Vector6<f64>>,
    pub pairs: Vec<IcpPair>,
    pub candidates: usize,
}

pub fn icp_energy(frame: &Frame, view: &ModelView, k: &CameraIntrinsics, t: &Pose) -> IcpEval {
    let params = TrackerParams::default();
    let (pairs, candidates) = associate(
        &frame.points,
        &frame.normals,
        view,
        k,
        t,
        params.depth_gate,
        params.normal_gate,
    );
    let residuals = icp_residuals(&pairs, t);
    let jacobians = icp_jacobians(&pairs, t);
    let energy = residuals.iter().map(|r| r * r).sum();
    IcpEval {
        energy,
        residuals,
        jacobians,
        pairs,
        candidates,
    }
}

/// Photometric energy, residuals, and Jacobians at T, skipping pixels that
/// warp outside the view.
pub struct RgbEval {
    pub energy: f64,
    pub residuals: Vec<f64>,
    pub jacobians: Vec<Vector6<f64>>,
}

pub fn rgb_energy(frame: &Frame, view: &ModelView, k: &CameraIntrinsics, t: &Pose) -> RgbEval {
    let pairs = rgb_pairs(&frame.points, &frame.intensity);
    let res = rgb_residuals(&pairs, &view.intensity, k, t);
    let jac = rgb_jacobians(&pairs, &view.intensity, k, t);
    let mut residuals = Vec::new();
    let mut jacobians = Vec::new();
    for (r, j) in res.into_iter().zip(jac) {
        if let (Some(r), Some(j)) = (r, j) {
            residuals.push(r);
            jacobians.push(j);
        }
    }
    let energy = residuals.iter().map(|r| r * r).sum();
    RgbEval {
        energy,
        residuals,
        jacobians,
    }
}

fn huber_weight(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        1.0
    } else {
        delta / a
    }
}

fn huber_cost(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        r * r
    } else {
        2.0 * delta * a - delta * delta
    }
}

/// Robust E_track at T for fixed ICP pairs and photometric pixel set.
fn robust_energy(
    icp_pairs: &[IcpPair],
    rgb_pairs: &[RgbPair],
    view_intensity: &GrayImage,
    k: &CameraIntrinsics,
    t: &Pose,
    params: &TrackerParams,
) -> f64 {
    let mut e: f64 = icp_residuals(icp_pairs, t)
        .iter()
        .map(|r| huber_cost(*r, params.huber_icp))
        .sum();
    for r in rgb_residuals(rgb_pairs, view_intensity, k, t).into_iter().flatten() {
        e += params.w_rgb * huber_cost(r, params.huber_rgb);
    }
    e
}

/// Minimize E_icp + w_rgb * E_rgb coarse-to-fine, updating T by
/// left-multiplied twists with step halving.
pub fn track(
    frame: &Frame,
    view: &ModelView,
    k: &CameraIntrinsics,
    t_init: &Pose,
    params: &TrackerParams,
) -> TrackingResult {
    let frame_levels = build_levels(&frame.intensity, &frame.depth, k, params.pyramid_levels);
    let view_levels = build_levels(&view.intensity, &view.depth, k, params.pyramid_levels);
    let levels = frame_levels.len().min(view_levels.len());
    let mut t = *t_init;
    let mut iterations = 0usize;
    let mut degenerate = false;
    let mut energy_steps = Vec::new();
    let mut final_inliers = 0.0;
    'levels: for li in (0..levels).rev() {
        let fl = &frame_levels[li];
        let vl = &view_levels[li];
        let view_level = ModelView {
            intensity: vl.intensity.clone(),
            depth: vl.depth.clone(),
            points: vl.points.clone(),
            normals: vl.normals.clone(),
        };
        let rgb_px = rgb_pairs(&fl.points, &fl.intensity);
        let finest = li == 0;
        let mut pairs: Vec<IcpPair> = Vec::new();
        let mut moved = f64::INFINITY; // force association at level entry
        for _ in 0..params.max_iters_per_level {
            if moved > params.reassoc_tol {
                pairs = associate(
                    &fl.points,
                    &fl.normals,
                    &view_level,
                    &fl.k,
                    &t,
                    params.depth_gate,
                    params.normal_gate,
                )
                .0;
                moved = 0.0;
            }
            if pairs.len() < params.min_correspondences {
                degenerate = true;
                break 'levels;
            }
            let icp_r = icp_residuals(&pairs, &t);
            let icp_j = icp_jacobians(&pairs, &t);
            let rgb_r = rgb_residuals(&rgb_px, &view_level.intensity, &fl.k, &t);
            let rgb_j = rgb_jacobians(&rgb_px, &view_level.intensity, &fl.k, &t);
            let mut h = Matrix6::<f64>::zeros();
            let mut g = Vector6::<f64>::zeros();
            for (r, j) in icp_r.iter().zip(&icp_j) {
                let w = huber_weight(*r, params.huber_icp);
                h.syger(w, j, j, 1.0);
                g += j * (w * r);
            }
            for (r, j) in rgb_r.iter().zip(&rgb_j) {
                if let (Some(r), Some(j)) = (r, j) {
                    let w = params.w_rgb * huber_weight(*r, params.huber_rgb);
                    h.syger(w, j, j, 1.0);
                    g += j * (w * r);
                }
            }
            // syger fills the lower triangle; mirror it
            for a in 0..6 {
                for b in (a + 1)..6 {
                    h[(a, b)] = h[(b, a)];
                }
            }
            let eig = h.symmetric_eigenvalues();
            let (lmin, lmax) = (eig.min(), eig.max());
            if lmin <= 0.0 || lmax / lmin > params.condition_limit {
                degenerate = true;
                break 'levels;
            }
            let Some(chol) = h.cholesky() else {
                degenerate = true;
                break 'levels;
            };
            let delta = chol.solve(&-g);
            if delta.norm() < params.step_tol {
                break; // converged: the proposed update is a no-op
            }
            let e0 = robust_energy(&pairs, &rgb_px, &view_level.intensity, &fl.k, &t, params);
            let mut accepted = false;
            let mut step = 1.0;
            for _ in 0..8 {
                let xi = Twist::from_vector(&(delta * step));
                let trial = exp_se3(&xi).orthonormalized();
                let t_trial = crate::geometry::compose(&trial, &t);
                let e1 = robust_energy(
                    &pairs,
                    &rgb_px,
                    &view_level.intensity,
                    &fl.k,
                    &t_trial,
                    params,
                );
                // sufficient decrease, not bare e1 < e0: accepting
                // float-noise improvements would spin at the optimum
                if e1 < e0 * (1.0 - 1e-10) {
                    t = t_trial;
                    iterations += 1;
                    moved += (delta * step).norm();
                    if finest {
                        energy_steps.push((e0, e1));
                    }
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                break;
            }
        }
    }
    let (pairs, candidates) = associate(
        &frame.points,
        &frame.normals,
        view,
        k,
        &t,
        params.depth_gate,
        params.normal_gate,
    );
    if candidates > 0 {
        final_inliers = pairs.len() as f64 / candidates as f64;
    }
    let e_icp = icp_residuals(&pairs, &t).iter().map(|r| r * r).sum();
    let rgb_px = rgb_pairs(&frame.points, &frame.intensity);
    let e_rgb = rgb_residuals(&rgb_px, &view.intensity, k, &t)
        .into_iter()
        .flatten()
        .map(|r| r * r)
        .sum();
    TrackingResult {
        pose: t,
        e_icp,
        e_rgb,
        iterations,
        inlier_fraction: final_inliers,
        degenerate,
        energy_steps,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{compose, invert};
    use crate::sim::{generate_scene, generate_trajectory, render_frame, TrajectorySpec};
    use approx::assert_relative_eq;

    fn test_k() -> CameraIntrinsics {
        CameraIntrinsics::new(70.0, 70.0, 79.5, 59.5, 160, 120)
    }

    /// Two renders of the same scene with a known relative pose.
    /// Returns (frame, view, k, true frame-to-view pose).
    fn render_pair(seed: u64, delta: &Twist) -> (Frame, ModelView, CameraIntrinsics, Pose) {
        let scene = generate_scene(seed);
        let k = test_k();
        let spec = TrajectorySpec {
            duration: 2.0,
            rate: 1.0,
            ..Default::default()
        };
        let track = generate_trajectory(&spec, &scene, seed).unwrap();
        let w_view = track[0].pose;
        let t_true = exp_se3(delta);
        let w_frame = compose(&w_view, &t_true);
        let (rgb_v, depth_v) = render_frame(&scene, &k, &w_view);
        let (rgb_f, depth_f) = render_frame(&scene, &k, &w_frame);
        let frame = Frame::new(0.0, None, rgb_f.luminance(), depth_f, &k);
        let view = ModelView::new(rgb_v.luminance(), depth_v, &k);
        (frame, view, k, t_true)
    }

    fn plane_depth(k: &CameraIntrinsics, z: f64) -> DepthImage {
        DepthImage::new_constant(k.width, k.height, z)
    }

    fn pose_error(est: &Pose, truth: &Pose) -> (f64, f64) {
        let rel = compose(&invert(truth), est);
        let angle = rel.rotation_angle();
        (rel.translation.norm(), angle)
    }

    #[test]
    fn backprojection_matches_pinhole_geometry() {
        let k = test_k();
        let depth = plane_depth(&k, 4.0);
        let points = point_cloud(&depth, &k);
        let at = |x: usize, y: usize| points[y * k.width + x].unwrap();
        // principal point lies on the optical axis
        let c = at(79, 59); // cx=79.5 so probe half a pixel off
        assert_relative_eq!(c, Vector3::new(-0.5 / 70.0 * 4.0, -0.5 / 70.0 * 4.0, 4.0), epsilon = 1e-12);
        let k2 = CameraIntrinsics::new(20.0, 20.0, 50.0, 30.0, 101, 61);
        let d2 = plane_depth(&k2, 3.0);
        let p2 = point_cloud(&d2, &k2);
        assert_relative_eq!(
            p2[30 * k2.width + 50].unwrap(),
            Vector3::new(0.0, 0.0, 3.0),
            epsilon = 1e-12
        );
        assert_relative_eq!(
            p2[30 * k2.width + 70].unwrap(),
            Vector3::new(3.0, 0.0, 3.0),
            epsilon = 1e-12
        ); // (cx + fx, cy) at depth d backprojects to (d, 0, d)
        for (i, p) in p2.iter().enumerate() {
            let p = p.unwrap();
            let (px, py) = k2.project(&p).unwrap();
            let (x, y) = (i % k2.width, i / k2.width);
            assert!((px - x as f64).abs() < 1e-9 && (py - y as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn plane_normals_point_at_the_camera() {
        let k = test_k();
        let depth = plane_depth(&k, 5.0);
        let points = point_cloud(&depth, &k);
        let normals = normal_map(&points, k.width, k.height);
        for y in 1..k.height - 1 {
            for x in 1..k.width - 1 {
                let n = normals[y * k.width + x].unwrap();
                assert_relative_eq!(n, Vector3::new(0.0, 0.0, -1.0), epsilon = 1e-9);
            }
        }
        assert!(normals[0].is_none(), "border pixels have no normal");
    }

    #[test]
    fn inclined_plane_normal_recovered() {
        let k = test_k();
        // plane x - z = -5 (45 degrees to the optical axis)
        let depth = DepthImage::from_fn(k.width, k.height, |x, y| {
            let a = (x as f64 - k.cx) / k.fx;
            let _ = y;
            let d = 5.0 / (1.0 - a);
            (d > 0.0).then_some(d)
        });
        let points = point_cloud(&depth, &k);
        let normals = normal_map(&points, k.width, k.height);
        let expected = Vector3::new(1.0, 0.0, -1.0) / 2.0_f64.sqrt();
        let n = normals[60 * k.width + 80].unwrap();
        assert!((n - expected).norm() < 1e-3, "normal {n:?}");
        let angle = n.dot(&Vector3::z()).abs().acos().to_degrees();
        assert!((angle - 45.0).abs() < 0.1);
    }

    #[test]
    fn degenerate_neighborhood_has_no_normal() {
        let k = CameraIntrinsics::new(20.0, 20.0, 15.5, 11.5, 32, 24);
        let mut depth = plane_depth(&k, 5.0);
        depth.invalidate(10, 10);
        let points = point_cloud(&depth, &k);
        let normals = normal_map(&points, k.width, k.height);
        assert!(normals[10 * k.width + 11].is_none());
        assert!(normals[10 * k.width + 9].is_none());
        assert!(normals[9 * k.width + 10].is_none());
    }

    #[test]
    fn identical_views_have_zero_icp_energy() {
        let (frame, _, k, _) = render_pair(21, &Twist::zero());
        let view = ModelView::from_frame(&frame);
        let eval = icp_energy(&frame, &view, &k, &Pose::identity());
        assert!(eval.pairs.len() > 10_000);
        assert!(eval.energy < 1e-18, "E_icp = {}", eval.energy);
    }

    #[test]
    fn plane_offset_along_normal_costs_n_d_squared() {
        let k = test_k();
        let intensity = GrayImage::from_fn(k.width, k.height, |_, _| 0.5);
        let view = ModelView::new(intensity.clone(), plane_depth(&k, 5.0), &k);
        let frame = Frame::new(0.0, None, intensity, plane_depth(&k, 6.0), &k);
        let eval = icp_energy(&frame, &view, &k, &Pose::identity());
        let n = eval.residuals.len();
        assert!(n > 10_000);
        assert_relative_eq!(eval.energy, n as f64, epsilon = 1e-9);
        for r in &eval.residuals {
            assert_relative_eq!(r.abs(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn icp_jacobian_matches_finite_differences() {
        let twist = Twist::new(
            Vector3::new(0.01, -0.02, 0.015),
            Vector3::new(0.2, -0.1, 0.3),
        );
        let (frame, view, k, _) = render_pair(22, &twist);
        let t = exp_se3(&Twist::new(
            Vector3::new(0.005, -0.01, 0.02),
            Vector3::new(0.1, 0.05, -0.2),
        ));
        let eval = icp_energy(&frame, &view, &k, &t);
        let pairs = &eval.pairs[..eval.pairs.len().min(500)];
        let jac = icp_jacobians(pairs, &t);
        let h = 1e-6;
        for axis in 0..6 {
            let mut dv = Vector6::zeros();
            dv[axis] = h;
            let tp = compose(&exp_se3(&Twist::from_vector(&dv)), &t);
            let tm = compose(&exp_se3(&Twist::from_vector(&(-dv))), &t);
            let rp = icp_residuals(pairs, &tp);
            let rm = icp_residuals(pairs, &tm);
            for i in 0..pairs.len() {
                let fd = (rp[i] - rm[i]) / (2.0 * h);
                let an = jac[i][axis];
                let denom = an.abs().max(1e-6);
                assert!(
                    (fd - an).abs() / denom < 1e-4,
                    "pair {i} axis {axis}: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn identical_views_have_zero_rgb_energy() {
        let (frame, _, k, _) = render_pair(23, &Twist::zero());
        let view = ModelView::from_frame(&frame);
        let eval = rgb_energy(&frame, &view, &k, &Pose::identity());
        assert!(eval.energy < 1e-18, "E_rgb = {}", eval.energy);
    }

    #[test]
    fn uniform_intensity_is_photometrically_degenerate() {
        let k = test_k();
        let intensity = GrayImage::from_fn(k.width, k.height, |_, _| 0.37);
        let view = ModelView::new(intensity.clone(), plane_depth(&k, 5.0), &k);
        let frame = Frame::new(0.0, None, intensity, plane_depth(&k, 5.0), &k);
        let t = exp_se3(&Twist::new(
            Vector3::new(0.0, 0.01, 0.0),
            Vector3::new(0.3, 0.0, 0.1),
        ));
        let eval = rgb_energy(&frame, &view, &k, &t);
        assert!(eval.energy < 1e-18);
        for j in &eval.jacobians {
            assert!(j.norm() < 1e-12, "gradient must vanish on uniform images");
        }
    }

    #[test]
    fn rgb_jacobian_matches_finite_differences() {
        let twist = Twist::new(
            Vector3::new(-0.01, 0.02, 0.01),
            Vector3::new(0.15, -0.2, 0.1),
        );
        let (frame, view, k, _) = render_pair(24, &twist);
        let t = exp_se3(&Twist::new(
            Vector3::new(0.004, 0.008, -0.012),
            Vector3::new(-0.08, 0.12, 0.15),
        ));
        let all_pairs = rgb_pairs(&frame.points, &frame.intensity);
        // keep pairs whose warp lands well inside a bilinear cell so the
        // interpolant is differentiable there
        let mut pairs = Vec::new();
        for pr in all_pairs.iter().step_by(37) {
            let p = t.transform(&pr.p_frame);
            if let Some((px, py)) = k.project(&p) {
                let (fx, fy) = (px.fract(), py.fract());
                if (0.05..0.95).contains(&fx)
                    && (0.05..0.95).contains(&fy)
                    && px > 1.0
                    && py > 1.0
                    && px < k.width as f64 - 2.0
                    && py < k.height as f64 - 2.0
                {
                    pairs.push(*pr);
                }
            }
        }
        assert!(pairs.len() > 100);
        let jac = rgb_jacobians(&pairs, &view.intensity, &k, &t);
        let h = 1e-7;
        for axis in 0..6 {
            let mut dv = Vector6::zeros();
            dv[axis] = h;
            let tp = compose(&exp_se3(&Twist::from_vector(&dv)), &t);
            let tm = compose(&exp_se3(&Twist::from_vector(&(-dv))), &t);
            let rp = rgb_residuals(&pairs, &view.intensity, &k, &tp);
            let rm = rgb_residuals(&pairs, &view.intensity, &k, &tm);
            for i in 0..pairs.len() {
                let (Some(rp), Some(rm), Some(j)) = (rp[i], rm[i], jac[i]) else {
                    continue;
                };
                let fd = (rp - rm) / (2.0 * h);
                let an = j[axis];
                let denom = an.abs().max(1e-3);
                assert!(
                    (fd - an).abs() / denom < 1e-4,
                    "pair {i} axis {axis}: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn zero_motion_recovers_identity() {
        let (frame, view, k, _) = render_pair(25, &Twist::zero());
        let result = track(&frame, &view, &k, &Pose::identity(), &TrackerParams::default());
        assert!(!result.degenerate);
        let (dt, dr) = pose_error(&result.pose, &Pose::identity());
        assert!(dt < 1e-4, "translation error {dt} cm");
        assert!(dr < 1e-5, "rotation error {dr} rad");
    }

    #[test]
    fn known_displacement_recovered() {
        for seed in [26u64, 27, 28] {
            let axis = Vector3::new(0.3, 1.0, 0.2).normalize();
            let twist = Twist::new(
                axis * 2.0_f64.to_radians(),
                Vector3::new(1.0, -0.5, 0.25).normalize() * 0.5,
            );
            let (frame, view, k, t_true) = render_pair(seed, &twist);
            let result = track(&frame, &view, &k, &Pose::identity(), &TrackerParams::default());
            assert!(!result.degenerate, "seed {seed} flagged degenerate");
            let (dt, dr) = pose_error(&result.pose, &t_true);
            assert!(dt < 0.05, "seed {seed}: translation error {dt} cm");
            assert!(
                dr < 0.1_f64.to_radians(),
                "seed {seed}: rotation error {} deg",
                dr.to_degrees()
            );
        }
    }

    #[test]
    fn accepted_steps_always_reduce_energy() {
        let twist = Twist::new(
            Vector3::new(0.02, -0.015, 0.01),
            Vector3::new(0.4, 0.2, -0.3),
        );
        let (frame, view, k, _) = render_pair(29, &twist);
        let result = track(&frame, &view, &k, &Pose::identity(), &TrackerParams::default());
        assert!(!result.energy_steps.is_empty());
        for (before, after) in &result.energy_steps {
            assert!(after < before, "accepted step raised energy: {before} -> {after}");
        }
    }

    /// With surface-attached intensity the energy minimum coincides with
    /// the geometric ground truth, so a warm start there must terminate
    /// almost immediately. (The shaded renderer cannot test this: its
    /// camera-attached light shifts the photometric optimum slightly off
    /// the true pose.)
    #[test]
    fn warm_start_converges_immediately() {
        use crate::sim::render_unshaded;
        let twist = Twist::new(
            Vector3::new(0.01, 0.02, -0.01),
            Vector3::new(0.3, -0.2, 0.2),
        );
        let scene = generate_scene(30);
        let k = test_k();
        let spec = TrajectorySpec {
            duration: 2.0,
            rate: 1.0,
            ..Default::default()
        };
        let gt = generate_trajectory(&spec, &scene, 30).unwrap();
        let w_view = gt[0].pose;
        let t_true = exp_se3(&twist);
        let w_frame = compose(&w_view, &t_true);
        let (gray_v, depth_v) = render_unshaded(&scene, &k, &w_view);
        let (gray_f, depth_f) = render_unshaded(&scene, &k, &w_frame);
        let frame = Frame::new(0.0, None, gray_f, depth_f, &k);
        let view = ModelView::new(gray_v, depth_v, &k);
        let params = TrackerParams {
            pyramid_levels: 1,
            ..Default::default()
        };
        let result = track(&frame, &view, &k, &t_true, &params);
        assert!(!result.degenerate);
        assert!(
            result.iterations <= 2,
            "{} iterations from ground truth",
            result.iterations
        );
        let (dt, dr) = pose_error(&result.pose, &t_true);
        assert!(dt < 0.05 && dr < 0.1_f64.to_radians());
    }

    /// Re-tracking from a converged answer is a fixed point: the practical
    /// warm-start guarantee for shaded imagery.
    #[test]
    fn retrack_from_converged_pose_is_stable() {
        let twist = Twist::new(
            Vector3::new(0.01, 0.02, -0.01),
            Vector3::new(0.3, -0.2, 0.2),
        );
        let (frame, view, k, _) = render_pair(30, &twist);
        let params = TrackerParams {
            pyramid_levels: 1,
            ..Default::default()
        };
        let first = track(&frame, &view, &k, &Pose::identity(), &params);
        assert!(!first.degenerate);
        let second = track(&frame, &view, &k, &first.pose, &params);
        assert!(
            second.iterations <= 2,
            "{} iterations when re-tracking from the converged pose",
            second.iterations
        );
        let (dt, dr) = pose_error(&second.pose, &first.pose);
        assert!(dt < 1e-3 && dr < 1e-4, "re-track moved the pose by {dt} cm");
    }

    #[test]
    fn textureless_plane_translation_is_degenerate() {
        let k = test_k();
        let intensity = GrayImage::from_fn(k.width, k.height, |_, _| 0.5);
        let view = ModelView::new(intensity.clone(), plane_depth(&k, 5.0), &k);
        let frame = Frame::new(0.0, None, intensity, plane_depth(&k, 5.0), &k);
        let result = track(&frame, &view, &k, &Pose::identity(), &TrackerParams::default());
        assert!(
            result.degenerate,
            "in-plane translation of a textureless plane must be flagged"
        );
    }

    #[test]
    fn reported_pose_aligns_frame_onto_view() {
        let twist = Twist::new(
            Vector3::new(0.015, -0.01, 0.02),
            Vector3::new(0.3, 0.25, -0.2),
        );
        let (frame, view, k, _) = render_pair(31, &twist);
        let result = track(&frame, &view, &k, &Pose::identity(), &TrackerParams::default());
        assert!(!result.degenerate);
        let (pairs, _) = associate(
            &frame.points,
            &frame.normals,
            &view,
            &k,
            &result.pose,
            5.0,
            30.0_f64.to_radians(),
        );
        let mut dists: Vec<f64> = icp_residuals(&pairs, &result.pose)
            .iter()
            .map(|r| r.abs())
            .collect();
        dists.sort_by(f64::total_cmp);
        let median = dists[dists.len() / 2];
        assert!(median < 0.05, "median point-to-plane distance {median} cm");
    }

    #[test]
    fn convergence_from_ground_truth_start_is_tight() {
        let twist = Twist::new(
            Vector3::new(-0.02, 0.01, 0.015),
            Vector3::new(0.2, 0.3, -0.25),
        );
        let (frame, view, k, t_true) = render_pair(32, &twist);
        let result = track(&frame, &view, &k, &t_true, &TrackerParams::default());
        let (dt, dr) = pose_error(&result.pose, &t_true);
        assert!(dt < 0.02, "drifted {dt} cm away from the optimum");
        assert!(dr < 0.05_f64.to_radians());
    }
}
