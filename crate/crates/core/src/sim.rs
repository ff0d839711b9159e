//! Synthetic ground-truth generator: stomach-like cavity scenes, camera
//! trajectories, RGB-D renders, magnetic readings, and failure injection.
//!
//! The scene is a star-shaped closed surface (deformed ellipsoid, radial
//! bump field) observed from inside, so every camera ray hits the wall and
//! ray casting doubles as the ground-truth depth oracle. Rendering uses
//! the same camera-light Lambertian model the shape-from-shading solver
//! inverts. All generation is deterministic per seed.

use crate::camera::{CameraIntrinsics, DepthImage};
use crate::geometry::Pose;
use crate::image::{read_ppm, write_ppm, GrayImage, RgbImage};
use crate::magnetic::{
    self, simulate_reading, ActuatorModel, MagneticReading, MagnetModel, Pose5, SensorArray,
};
use crate::trajectory::{read_trajectory, write_trajectory, TimedPose};
use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("bad configuration: {0}")]
    BadConfig(String),
    #[error("bad failure schedule: {0}")]
    BadSchedule(String),
    #[error("trajectory leaves the cavity at t={0}")]
    CameraOutsideScene(f64),
    #[error(transparent)]
    Image(#[from] crate::image::ImageError),
    #[error(transparent)]
    Magnetic(#[from] crate::magnetic::MagneticError),
    #[error(transparent)]
    Trajectory(#[from] crate::trajectory::TrajectoryError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SimError + '_ {
    move |e| SimError::Io {
        path: path.display().to_string(),
        source: e,
    }
}

/// Radial bump on the unit sphere: a von Mises-Fisher lobe scaling the
/// cavity radius by `1 + amplitude * exp((dir.dot(center) - 1)/width²)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Bump {
    pub center: Vector3<f64>,
    pub amplitude: f64,
    pub width: f64,
}

const TEXTURE_HEIGHT: usize = 256;
const TEXTURE_WIDTH: usize = 512;

/// Closed star-shaped cavity with a procedural vessel texture.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneModel {
    pub center: Vector3<f64>,
    pub semi_axes: Vector3<f64>,
    pub bumps: Vec<Bump>,
    /// Vessel darkening in [0,1] over (polar, azimuth) texture coordinates.
    pub texture: GrayImage,
    /// Lambertian albedo scale of clean tissue.
    pub base_albedo: f64,
    /// Fraction of albedo removed where the vessel texture is 1.
    pub vessel_darkening: f64,
    pub tissue_color: [f64; 3],
}

impl SceneModel {
    /// Radius of the surface along a unit direction from the center.
    pub fn radial(&self, dir: &Vector3<f64>) -> f64 {
        let e = Vector3::new(
            dir.x / self.semi_axes.x,
            dir.y / self.semi_axes.y,
            dir.z / self.semi_axes.z,
        )
        .norm();
        let mut rho = 1.0;
        for b in &self.bumps {
            rho += b.amplitude * ((dir.dot(&b.center) - 1.0) / (b.width * b.width)).exp();
        }
        rho / e
    }

    /// Signed implicit function: negative inside the cavity, zero on the
    /// wall.
    pub fn implicit(&self, p: &Vector3<f64>) -> f64 {
        let q = p - self.center;
        let r = q.norm();
        if r < 1e-12 {
            return -self.radial(&Vector3::z());
        }
        r - self.radial(&(q / r))
    }

    pub fn surface_point(&self, dir: &Vector3<f64>) -> Vector3<f64> {
        self.center + dir * self.radial(dir)
    }

    /// Outward unit normal (away from the cavity interior).
    pub fn surface_normal_outward(&self, dir: &Vector3<f64>) -> Vector3<f64> {
        let t1 = if dir.x.abs() < 0.9 {
            Vector3::x().cross(dir).normalize()
        } else {
            Vector3::y().cross(dir).normalize()
        };
        let t2 = dir.cross(&t1);
        let h: f64 = 1e-5;
        let (ch, sh) = (h.cos(), h.sin());
        let du = self.surface_point(&(dir * ch + t1 * sh)) - self.surface_point(&(dir * ch - t1 * sh));
        let dv = self.surface_point(&(dir * ch + t2 * sh)) - self.surface_point(&(dir * ch - t2 * sh));
        let mut n = du.cross(&dv).normalize();
        if n.dot(dir) < 0.0 {
            n = -n;
        }
        n
    }

    /// Vessel darkening in [0,1] at a surface direction.
    pub fn vessel(&self, dir: &Vector3<f64>) -> f64 {
        let theta = dir.z.clamp(-1.0, 1.0).acos();
        let phi = dir.y.atan2(dir.x);
        let v = theta / std::f64::consts::PI * self.texture.height as f64 - 0.5;
        let u = (phi + std::f64::consts::PI) / (2.0 * std::f64::consts::PI)
            * self.texture.width as f64
            - 0.5;
        let (w, h) = (self.texture.width as isize, self.texture.height as isize);
        let (u0, v0) = (u.floor(), v.floor());
        let (fu, fv) = (u - u0, v - v0);
        let wrap = |x: isize| ((x % w) + w) % w;
        let clampv = |y: isize| y.clamp(0, h - 1);
        let mut acc = 0.0;
        for (dy, wy) in [(0, 1.0 - fv), (1, fv)] {
            for (dx, wx) in [(0, 1.0 - fu), (1, fu)] {
                let x = wrap(u0 as isize + dx) as usize;
                let y = clampv(v0 as isize + dy) as usize;
                acc += wx * wy * self.texture.get(x, y);
            }
        }
        acc
    }

    pub fn albedo_at(&self, dir: &Vector3<f64>) -> f64 {
        self.base_albedo * (1.0 - self.vessel_darkening * self.vessel(dir))
    }

    /// Distance along a unit ray from an interior point to the wall.
    pub fn cast_ray(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        if self.implicit(origin) >= 0.0 {
            return None;
        }
        let t_max = 3.0 * self.semi_axes.max() + (origin - self.center).norm() + 5.0;
        let step = 0.5;
        let mut t0 = 0.0;
        let mut t1 = step;
        while t1 <= t_max {
            if self.implicit(&(origin + dir * t1)) >= 0.0 {
                // bracketed; bisect to well below render tolerance
                for _ in 0..50 {
                    let tm = 0.5 * (t0 + t1);
                    if self.implicit(&(origin + dir * tm)) >= 0.0 {
                        t1 = tm;
                    } else {
                        t0 = tm;
                    }
                }
                return Some(0.5 * (t0 + t1));
            }
            t0 = t1;
            t1 += step;
        }
        None
    }

    /// Surface area from a latitude-longitude quadrature.
    pub fn surface_area(&self) -> f64 {
        let (nt, np) = (128usize, 256usize);
        let dt = std::f64::consts::PI / nt as f64;
        let dp = 2.0 * std::f64::consts::PI / np as f64;
        let mut area = 0.0;
        for it in 0..nt {
            let theta = (it as f64 + 0.5) * dt;
            for ip in 0..np {
                let phi = (ip as f64 + 0.5) * dp;
                let dir = |th: f64, ph: f64| {
                    Vector3::new(th.sin() * ph.cos(), th.sin() * ph.sin(), th.cos())
                };
                let h = 1e-4;
                let du = (self.surface_point(&dir(theta + h, phi))
                    - self.surface_point(&dir(theta - h, phi)))
                    / (2.0 * h);
                let dv = (self.surface_point(&dir(theta, phi + h))
                    - self.surface_point(&dir(theta, phi - h)))
                    / (2.0 * h);
                area += du.cross(&dv).norm() * dt * dp;
            }
        }
        area
    }

    /// Area-weighted fraction of the texture marked as vessel.
    pub fn vessel_coverage(&self) -> f64 {
        let mut marked = 0.0;
        let mut total = 0.0;
        for y in 0..self.texture.height {
            let theta = (y as f64 + 0.5) / self.texture.height as f64 * std::f64::consts::PI;
            let w = theta.sin();
            for x in 0..self.texture.width {
                total += w;
                if self.texture.get(x, y) > 0.5 {
                    marked += w;
                }
            }
        }
        marked / total
    }

    /// Stable content hash for determinism checks.
    pub fn hash(&self) -> u64 {
        let mut h = Fnv::new();
        for v in [
            self.center.x,
            self.center.y,
            self.center.z,
            self.semi_axes.x,
            self.semi_axes.y,
            self.semi_axes.z,
            self.base_albedo,
            self.vessel_darkening,
        ] {
            h.write_f64(v);
        }
        for b in &self.bumps {
            for v in [b.center.x, b.center.y, b.center.z, b.amplitude, b.width] {
                h.write_f64(v);
            }
        }
        for v in &self.texture.data {
            h.write_f64(*v);
        }
        h.finish()
    }
}

/// FNV-1a, enough for content fingerprints.
struct Fnv(u64);

impl Fnv {
    fn new() -> Fnv {
        Fnv(0xcbf29ce484222325)
    }
    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x100000001b3);
        }
    }
    fn write_f64(&mut self, v: f64) {
        self.write(&v.to_bits().to_le_bytes());
    }
    fn finish(&self) -> u64 {
        self.0
    }
}

fn unit_sphere_dir(rng: &mut impl Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

/// Quasi-uniform directions for surface audits.
fn fibonacci_sphere(n: usize) -> Vec<Vector3<f64>> {
    let golden = std::f64::consts::PI * (3.0 - 5.0_f64.sqrt());
    (0..n)
        .map(|k| {
            let z = 1.0 - 2.0 * (k as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * k as f64;
            Vector3::new(r * phi.cos(), r * phi.sin(), z)
        })
        .collect()
}

/// Deterministic stomach-like scene for a seed.
pub fn generate_scene(seed: u64) -> SceneModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let semi_axes = Vector3::new(
        8.0 * rng.gen_range(0.9..1.1),
        6.0 * rng.gen_range(0.9..1.1),
        5.0 * rng.gen_range(0.9..1.1),
    );
    let mut bumps: Vec<Bump> = (0..8)
        .map(|_| {
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            Bump {
                center: unit_sphere_dir(&mut rng),
                amplitude: sign * rng.gen_range(0.05..0.11),
                width: rng.gen_range(0.45..0.85),
            }
        })
        .collect();
    // keep the radial field safely star-shaped
    let probe = fibonacci_sphere(1000);
    for _ in 0..5 {
        let mut rho_min = f64::INFINITY;
        let mut rho_max = f64::NEG_INFINITY;
        for d in &probe {
            let mut rho = 1.0;
            for b in &bumps {
                rho += b.amplitude * ((d.dot(&b.center) - 1.0) / (b.width * b.width)).exp();
            }
            rho_min = rho_min.min(rho);
            rho_max = rho_max.max(rho);
        }
        if rho_min > 0.6 && rho_max < 1.45 {
            break;
        }
        for b in bumps.iter_mut() {
            b.amplitude *= 0.8;
        }
    }
    let texture = paint_vessels(&mut rng);
    SceneModel {
        center: Vector3::zeros(),
        semi_axes,
        bumps,
        texture,
        base_albedo: 10.0,
        vessel_darkening: 0.65,
        tissue_color: [1.0, 0.45, 0.38],
    }
}

/// Random smooth walks on the sphere splatted into the texture raster as
/// Gaussian-profile dark curves.
fn paint_vessels(rng: &mut impl Rng) -> GrayImage {
    let mut tex = GrayImage::new(TEXTURE_WIDTH, TEXTURE_HEIGHT);
    let ds = std::f64::consts::PI / TEXTURE_HEIGHT as f64;
    let turn_noise = Normal::new(0.0, 0.35).expect("valid std");
    for _ in 0..12 {
        let mut d = unit_sphere_dir(rng);
        let mut tgt = d.cross(&unit_sphere_dir(rng));
        if tgt.norm() < 1e-6 {
            tgt = d.cross(&Vector3::x());
        }
        tgt = tgt.normalize();
        let steps = rng.gen_range(250..450);
        let width = rng.gen_range(1.0..1.7);
        let mut turn = 0.0;
        for _ in 0..steps {
            splat(&mut tex, &d, width);
            let nd = (d * ds.cos() + tgt * ds.sin()).normalize();
            // parallel-transport the tangent, then bend it
            tgt = (tgt - nd * nd.dot(&tgt)).normalize();
            turn = 0.9 * turn + 0.1 * turn_noise.sample(rng);
            let (s, c) = (turn * ds).sin_cos();
            let side = nd.cross(&tgt);
            tgt = (tgt * c + side * s).normalize();
            d = nd;
        }
    }
    tex
}

fn splat(tex: &mut GrayImage, dir: &Vector3<f64>, width: f64) {
    let theta = dir.z.clamp(-1.0, 1.0).acos();
    let phi = dir.y.atan2(dir.x);
    let cy = theta / std::f64::consts::PI * tex.height as f64 - 0.5;
    let cx = (phi + std::f64::consts::PI) / (2.0 * std::f64::consts::PI) * tex.width as f64 - 0.5;
    let r = (3.0 * width).ceil() as isize;
    let (w, h) = (tex.width as isize, tex.height as isize);
    for dy in -r..=r {
        let y = cy.round() as isize + dy;
        if y < 0 || y >= h {
            continue;
        }
        for dx in -r..=r {
            let x = (((cx.round() as isize + dx) % w) + w) % w;
            let ddx = cx - (cx.round() + dx as f64);
            let ddy = cy - (cy.round() + dy as f64);
            let v = (-(ddx * ddx + ddy * ddy) / (2.0 * width * width)).exp();
            let cur = tex.get(x as usize, y as usize);
            if v > cur {
                tex.set(x as usize, y as usize, v);
            }
        }
    }
}

/// Render an RGB frame and its ground-truth depth from a camera-to-world
/// pose inside the cavity. Shading is Lambertian with the light at the
/// camera center and inverse-square falloff.
pub fn render_frame(scene: &SceneModel, k: &CameraIntrinsics, pose: &Pose) -> (RgbImage, DepthImage) {
    let mut rgb = RgbImage::new(k.width, k.height);
    let mut depth = DepthImage::new_invalid(k.width, k.height);
    let origin = pose.translation;
    for y in 0..k.height {
        for x in 0..k.width {
            let dc = k.ray_direction(x as f64, y as f64); // unit
            let dw = pose.rotate(&dc);
            let Some(s) = scene.cast_ray(&origin, &dw) else {
                continue;
            };
            depth.set(x, y, s * dc.z);
            let p = origin + dw * s;
            let q = p - scene.center;
            let dir = q / q.norm();
            let n_in = -scene.surface_normal_outward(&dir);
            let l = -dw; // unit direction from surface back to the camera
            let irr = scene.albedo_at(&dir) * n_in.dot(&l).max(0.0) / (s * s);
            let px = std::array::from_fn(|c| {
                (irr * scene.tissue_color[c] * 255.0).clamp(0.0, 255.0).round() as u8
            });
            rgb.set(x, y, px);
        }
    }
    (rgb, depth)
}

/// Shading-free render: the intensity at each pixel is the surface albedo
/// where the ray lands, a viewpoint-independent property. Alignment tests
/// use this to place the photometric optimum exactly at the geometric
/// ground truth, which the camera-attached light of [`render_frame`]
/// cannot guarantee.
pub fn render_unshaded(
    scene: &SceneModel,
    k: &CameraIntrinsics,
    pose: &Pose,
) -> (GrayImage, DepthImage) {
    let mut gray = GrayImage::new(k.width, k.height);
    let mut depth = DepthImage::new_invalid(k.width, k.height);
    let origin = pose.translation;
    for y in 0..k.height {
        for x in 0..k.width {
            let dc = k.ray_direction(x as f64, y as f64);
            let dw = pose.rotate(&dc);
            let Some(s) = scene.cast_ray(&origin, &dw) else {
                continue;
            };
            depth.set(x, y, s * dc.z);
            let q = origin + dw * s - scene.center;
            let dir = q / q.norm();
            gray.set(x, y, scene.albedo_at(&dir) / scene.base_albedo);
        }
    }
    (gray, depth)
}

/// Trajectory archetype and sampling parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectorySpec {
    /// 1 slow tour, 2 periodic scan with revisits, 3 multi-harmonic loops,
    /// 4 fast motion with constant roll.
    pub archetype: u8,
    pub duration: f64,
    pub rate: f64,
    pub speed_scale: f64,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        TrajectorySpec {
            archetype: 1,
            duration: 90.0,
            rate: 15.0,
            speed_scale: 1.0,
        }
    }
}

impl TrajectorySpec {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(1..=4).contains(&self.archetype) {
            return Err(SimError::BadConfig(format!(
                "archetype {} not in 1..=4",
                self.archetype
            )));
        }
        if self.duration <= 0.0 || self.rate <= 0.0 || self.speed_scale <= 0.0 {
            return Err(SimError::BadConfig(
                "duration, rate, speed_scale must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn frame_count(&self) -> usize {
        (self.duration * self.rate).round() as usize
    }
}

/// offset + drift*t + sum of amp*sin(freq*t + phase).
#[derive(Debug, Clone)]
struct Channel {
    offset: f64,
    drift: f64,
    terms: Vec<(f64, f64, f64)>,
}

impl Channel {
    fn eval(&self, t: f64) -> f64 {
        let mut v = self.offset + self.drift * t;
        for &(a, w, p) in &self.terms {
            v += a * (w * t + p).sin();
        }
        v
    }
}

struct MotionLaw {
    pos: [Channel; 3],
    theta: Channel,
    phi: Channel,
    roll: Channel,
}

fn motion_law(spec: &TrajectorySpec, rng: &mut impl Rng) -> MotionLaw {
    let s = spec.speed_scale;
    let mut ph = || rng.gen_range(0.0..std::f64::consts::TAU);
    let flat = |offset: f64, terms: Vec<(f64, f64, f64)>| Channel {
        offset,
        drift: 0.0,
        terms,
    };
    match spec.archetype {
        1 => MotionLaw {
            pos: [
                flat(0.0, vec![(1.3, 0.050 * s, ph())]),
                flat(0.0, vec![(1.1, 0.041 * s, ph())]),
                flat(0.0, vec![(0.9, 0.033 * s, ph())]),
            ],
            theta: flat(std::f64::consts::FRAC_PI_2, vec![(0.25, 0.040 * s, ph())]),
            phi: flat(ph(), vec![(0.45, 0.050 * s, ph())]),
            roll: flat(0.0, vec![(0.15, 0.030 * s, ph())]),
        },
        2 => {
            // everything shares one period so viewpoints recur exactly
            let w = 8.0 * std::f64::consts::PI / spec.duration * s;
            MotionLaw {
                pos: [
                    flat(0.0, vec![(1.5, w, ph())]),
                    flat(0.0, vec![(1.2, 2.0 * w, ph())]),
                    flat(0.0, vec![(0.8, w, ph())]),
                ],
                theta: flat(std::f64::consts::FRAC_PI_2, vec![(0.40, w, ph())]),
                phi: Channel {
                    offset: ph(),
                    drift: w,
                    terms: vec![],
                },
                roll: flat(0.0, vec![(0.2, w, ph())]),
            }
        }
        3 => {
            let w = 8.0 * std::f64::consts::PI / spec.duration * s;
            MotionLaw {
                pos: [
                    flat(0.0, vec![(1.4, w, ph()), (0.5, 3.0 * w, ph())]),
                    flat(0.0, vec![(1.1, 2.0 * w, ph())]),
                    flat(0.0, vec![(0.7, w, ph()), (0.3, 2.0 * w, ph())]),
                ],
                theta: flat(
                    std::f64::consts::FRAC_PI_2,
                    vec![(0.30, w, ph()), (0.15, 3.0 * w, ph())],
                ),
                phi: Channel {
                    offset: ph(),
                    drift: w,
                    terms: vec![(0.5, 2.0 * w, ph())],
                },
                roll: flat(0.0, vec![(0.3, 2.0 * w, ph())]),
            }
        }
        _ => MotionLaw {
            pos: [
                flat(0.0, vec![(1.3, 0.40 * s, ph())]),
                flat(0.0, vec![(1.1, 0.33 * s, ph())]),
                flat(0.0, vec![(0.9, 0.26 * s, ph())]),
            ],
            theta: flat(std::f64::consts::FRAC_PI_2, vec![(0.25, 0.32 * s, ph())]),
            phi: flat(ph(), vec![(0.45, 0.40 * s, ph())]),
            roll: Channel {
                offset: 0.0,
                drift: 0.8 * s,
                terms: vec![(0.15, 0.24 * s, ph())],
            },
        },
    }
}

/// Orientation with camera +z along `forward` and a roll about it. The
/// forward direction must stay away from the world z axis.
fn look_rotation(forward: &Vector3<f64>, roll: f64) -> Matrix3<f64> {
    let zc = forward.normalize();
    let xc = Vector3::z().cross(&zc).normalize();
    let yc = zc.cross(&xc);
    let base = Matrix3::from_columns(&[xc, yc, zc]);
    let (sr, cr) = roll.sin_cos();
    let rz = Matrix3::new(cr, -sr, 0.0, sr, cr, 0.0, 0.0, 0.0, 1.0);
    base * rz
}

/// Smooth camera-to-world pose path inside the cavity.
pub fn generate_trajectory(
    spec: &TrajectorySpec,
    scene: &SceneModel,
    seed: u64,
) -> Result<Vec<TimedPose>, SimError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let law = motion_law(spec, &mut rng);
    let mut track = Vec::with_capacity(spec.frame_count());
    for i in 0..spec.frame_count() {
        let t = i as f64 / spec.rate;
        let p = scene.center
            + Vector3::new(law.pos[0].eval(t), law.pos[1].eval(t), law.pos[2].eval(t));
        if scene.implicit(&p) > -0.8 {
            return Err(SimError::CameraOutsideScene(t));
        }
        let theta = law.theta.eval(t);
        let phi = law.phi.eval(t);
        let forward = Vector3::new(theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos());
        let rot = look_rotation(&forward, law.roll.eval(t));
        track.push(TimedPose {
            timestamp: t,
            pose: Pose::new(rot, p),
        });
    }
    Ok(track)
}

/// Per-step angular speeds (rad/s) between consecutive poses.
pub fn angular_speeds(track: &[TimedPose]) -> Vec<f64> {
    track
        .windows(2)
        .map(|w| {
            let rel = w[0].pose.rotation.transpose() * w[1].pose.rotation;
            let angle = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos();
            angle / (w[1].timestamp - w[0].timestamp)
        })
        .collect()
}

/// Count revisit events: a frame matching some pose at least `min_lag`
/// seconds older (within `pos_tol` cm and `ang_tol` radians) starts a new
/// event when the previous frame had no match or its earliest match time
/// jumps by more than `regroup_gap` seconds.
pub fn count_revisits(
    track: &[TimedPose],
    pos_tol: f64,
    ang_tol: f64,
    min_lag: f64,
    regroup_gap: f64,
) -> usize {
    let mut events = 0;
    let mut prev_match: Option<f64> = None;
    for (i, cur) in track.iter().enumerate() {
        let mut earliest: Option<f64> = None;
        for old in &track[..i] {
            if cur.timestamp - old.timestamp < min_lag {
                break;
            }
            if (cur.pose.translation - old.pose.translation).norm() > pos_tol {
                continue;
            }
            let rel = old.pose.rotation.transpose() * cur.pose.rotation;
            let angle = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos();
            if angle <= ang_tol {
                earliest = Some(old.timestamp);
                break;
            }
        }
        match (earliest, prev_match) {
            (Some(_), None) => events += 1,
            (Some(m), Some(pm)) if (m - pm).abs() > regroup_gap => events += 1,
            _ => {}
        }
        prev_match = earliest;
    }
    events
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SensorKind {
    Visual,
    Magnetic,
}

impl fmt::Display for SensorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SensorKind::Visual => "visual",
            SensorKind::Magnetic => "magnetic",
        })
    }
}

impl FromStr for SensorKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "visual" => Ok(SensorKind::Visual),
            "magnetic" => Ok(SensorKind::Magnetic),
            other => Err(format!("unknown sensor '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureMode {
    /// Sensor returns nothing useful: black frames / noise-only fields.
    Dropout,
    /// Plausible but unrelated data: substituted frames / random fields.
    Garbage,
    /// Systematic offset: brightness shift / constant field bias.
    Bias,
}

impl fmt::Display for FailureMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FailureMode::Dropout => "dropout",
            FailureMode::Garbage => "garbage",
            FailureMode::Bias => "bias",
        })
    }
}

impl FromStr for FailureMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "dropout" => Ok(FailureMode::Dropout),
            "garbage" => Ok(FailureMode::Garbage),
            "bias" => Ok(FailureMode::Bias),
            other => Err(format!("unknown failure mode '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FailureWindow {
    pub sensor: SensorKind,
    pub mode: FailureMode,
    pub start: f64,
    pub end: f64,
}

/// Per-sensor failure windows applied during dataset generation.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FailureSchedule {
    pub windows: Vec<FailureWindow>,
}

impl FailureSchedule {
    pub fn empty() -> FailureSchedule {
        FailureSchedule::default()
    }

    /// One visual window followed by one magnetic window.
    pub fn staggered(
        visual: (f64, f64),
        visual_mode: FailureMode,
        magnetic: (f64, f64),
        magnetic_mode: FailureMode,
    ) -> FailureSchedule {
        FailureSchedule {
            windows: vec![
                FailureWindow {
                    sensor: SensorKind::Visual,
                    mode: visual_mode,
                    start: visual.0,
                    end: visual.1,
                },
                FailureWindow {
                    sensor: SensorKind::Magnetic,
                    mode: magnetic_mode,
                    start: magnetic.0,
                    end: magnetic.1,
                },
            ],
        }
    }

    pub fn validate(&self, duration: f64) -> Result<(), SimError> {
        for w in &self.windows {
            if !(w.start >= 0.0 && w.start < w.end && w.end <= duration) {
                return Err(SimError::BadSchedule(format!(
                    "window [{}, {}] outside [0, {duration}] or empty",
                    w.start, w.end
                )));
            }
        }
        for sensor in [SensorKind::Visual, SensorKind::Magnetic] {
            let mut spans: Vec<(f64, f64)> = self
                .windows
                .iter()
                .filter(|w| w.sensor == sensor)
                .map(|w| (w.start, w.end))
                .collect();
            spans.sort_by(|a, b| a.0.total_cmp(&b.0));
            for pair in spans.windows(2) {
                if pair[1].0 < pair[0].1 {
                    return Err(SimError::BadSchedule(format!(
                        "overlapping {sensor} windows [{}, {}] and [{}, {}]",
                        pair[0].0, pair[0].1, pair[1].0, pair[1].1
                    )));
                }
            }
        }
        Ok(())
    }

    /// Failure mode active for a sensor at time t, if any.
    pub fn active(&self, sensor: SensorKind, t: f64) -> Option<FailureMode> {
        self.windows
            .iter()
            .find(|w| w.sensor == sensor && t >= w.start && t < w.end)
            .map(|w| w.mode)
    }
}

pub fn write_schedule(path: &Path, schedule: &FailureSchedule) -> Result<(), SimError> {
    let mut s = String::from("# sensor mode start_s end_s\n");
    for w in &schedule.windows {
        s.push_str(&format!("{} {} {} {}\n", w.sensor, w.mode, w.start, w.end));
    }
    std::fs::write(path, s).map_err(io_err(path))
}

pub fn read_schedule(path: &Path) -> Result<FailureSchedule, SimError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut windows = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.len() != 4 {
            return Err(SimError::BadSchedule(format!("bad line '{line}'")));
        }
        windows.push(FailureWindow {
            sensor: tok[0].parse().map_err(SimError::BadSchedule)?,
            mode: tok[1].parse().map_err(SimError::BadSchedule)?,
            start: tok[2]
                .parse()
                .map_err(|_| SimError::BadSchedule(format!("bad start in '{line}'")))?,
            end: tok[3]
                .parse()
                .map_err(|_| SimError::BadSchedule(format!("bad end in '{line}'")))?,
        });
    }
    Ok(FailureSchedule { windows })
}

/// Everything needed to generate or re-load a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub k: CameraIntrinsics,
    pub rate: f64,
    pub duration: f64,
    pub archetype: u8,
    pub speed_scale: f64,
    pub seed: u64,
    pub magnet: MagnetModel,
    pub array: SensorArray,
    pub actuators: ActuatorModel,
}

impl DatasetConfig {
    /// Desk-scale default: 90 s at 15 Hz, 160x120 wide-angle camera.
    pub fn desk_default(seed: u64) -> DatasetConfig {
        DatasetConfig {
            k: CameraIntrinsics::new(70.0, 70.0, 79.5, 59.5, 160, 120),
            rate: 15.0,
            duration: 90.0,
            archetype: 1,
            speed_scale: 1.0,
            seed,
            magnet: MagnetModel::default(),
            array: SensorArray::default_8x8(),
            actuators: ActuatorModel::default_3x3(),
        }
    }

    /// Small fast variant for tests and smoke runs.
    pub fn small(seed: u64) -> DatasetConfig {
        DatasetConfig {
            k: CameraIntrinsics::new(28.0, 28.0, 31.5, 23.5, 64, 48),
            rate: 5.0,
            duration: 12.0,
            ..DatasetConfig::desk_default(seed)
        }
    }

    pub fn trajectory_spec(&self) -> TrajectorySpec {
        TrajectorySpec {
            archetype: self.archetype,
            duration: self.duration,
            rate: self.rate,
            speed_scale: self.speed_scale,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        self.trajectory_spec().validate()
    }
}

pub fn write_dataset_config(path: &Path, c: &DatasetConfig) -> Result<(), SimError> {
    let mut s = String::from("# dataset configuration (cm, s, µT, A·cm²)\n");
    s.push_str(&format!(
        "camera {} {} {} {} {} {}\n",
        c.k.fx, c.k.fy, c.k.cx, c.k.cy, c.k.width, c.k.height
    ));
    s.push_str(&format!("rate {}\n", c.rate));
    s.push_str(&format!("duration {}\n", c.duration));
    s.push_str(&format!("archetype {}\n", c.archetype));
    s.push_str(&format!("speed_scale {}\n", c.speed_scale));
    s.push_str(&format!("seed {}\n", c.seed));
    s.push_str(&format!("magnet_moment {}\n", c.magnet.moment));
    s.push_str(&format!(
        "magnet_axis {} {} {}\n",
        c.magnet.axis.x, c.magnet.axis.y, c.magnet.axis.z
    ));
    magnetic::format_geometry(&c.array, &c.actuators, &mut s);
    std::fs::write(path, s).map_err(io_err(path))
}

pub fn read_dataset_config(path: &Path) -> Result<DatasetConfig, SimError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let bad = |reason: String| SimError::BadConfig(format!("{}: {reason}", path.display()));
    let mut cam: Option<CameraIntrinsics> = None;
    let mut rate = None;
    let mut duration = None;
    let mut archetype = None;
    let mut speed_scale = 1.0;
    let mut seed = None;
    let mut magnet = MagnetModel::default();
    let mut builder = magnetic::GeometryBuilder::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let key = it.next().unwrap();
        let toks: Vec<&str> = it.collect();
        if key == "seed" {
            seed = Some(
                toks.first()
                    .and_then(|t| t.parse::<u64>().ok())
                    .ok_or_else(|| bad(format!("bad seed line '{line}'")))?,
            );
            continue;
        }
        let rest: Vec<f64> = toks
            .iter()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| bad(format!("bad number in '{line}'")))
            })
            .collect::<Result<_, _>>()?;
        match key {
            "camera" if rest.len() == 6 => {
                cam = Some(CameraIntrinsics::new(
                    rest[0],
                    rest[1],
                    rest[2],
                    rest[3],
                    rest[4] as usize,
                    rest[5] as usize,
                ));
            }
            "rate" if rest.len() == 1 => rate = Some(rest[0]),
            "duration" if rest.len() == 1 => duration = Some(rest[0]),
            "archetype" if rest.len() == 1 => archetype = Some(rest[0] as u8),
            "speed_scale" if rest.len() == 1 => speed_scale = rest[0],
            "magnet_moment" if rest.len() == 1 => magnet.moment = rest[0],
            "magnet_axis" if rest.len() == 3 => {
                magnet.axis = Vector3::new(rest[0], rest[1], rest[2]).normalize()
            }
            _ => match builder.consume(key, &rest) {
                Ok(true) => {}
                Ok(false) => return Err(bad(format!("unrecognized line '{line}'"))),
                Err(reason) => return Err(bad(reason)),
            },
        }
    }
    let config = DatasetConfig {
        k: cam.ok_or_else(|| bad("missing camera".into()))?,
        rate: rate.ok_or_else(|| bad("missing rate".into()))?,
        duration: duration.ok_or_else(|| bad("missing duration".into()))?,
        archetype: archetype.ok_or_else(|| bad("missing archetype".into()))?,
        speed_scale,
        seed: seed.ok_or_else(|| bad("missing seed".into()))?,
        magnet,
        array: builder.array,
        actuators: builder.actuators,
    };
    config.validate()?;
    Ok(config)
}

/// Smooth deterministic coil drive currents.
pub fn coil_profile(t: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|j| 0.4 * (std::f64::consts::TAU * (0.05 + 0.013 * j as f64) * t + 0.7 * j as f64).sin())
        .collect()
}

fn frame_rng(seed: u64, frame: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ 0xFA11 ^ (frame as u64).wrapping_mul(0x9E3779B97F4A7C15))
}

fn decoy_pose(scene: &SceneModel, rng: &mut impl Rng) -> Pose {
    let p = scene.center
        + Vector3::new(
            rng.gen_range(-1.8..1.8),
            rng.gen_range(-1.8..1.8),
            rng.gen_range(-1.8..1.8),
        );
    let theta: f64 = rng.gen_range(1.1..2.0);
    let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let forward = Vector3::new(theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos());
    Pose::new(
        look_rotation(&forward, rng.gen_range(0.0..std::f64::consts::TAU)),
        p,
    )
}

fn apply_visual_failure(
    mode: FailureMode,
    rgb: &mut RgbImage,
    depth: &mut DepthImage,
    scene: &SceneModel,
    k: &CameraIntrinsics,
    rng: &mut impl Rng,
) {
    match mode {
        FailureMode::Dropout => {
            *rgb = RgbImage::new(k.width, k.height);
            *depth = DepthImage::new_invalid(k.width, k.height);
        }
        FailureMode::Garbage => {
            let (r, d) = render_frame(scene, k, &decoy_pose(scene, rng));
            *rgb = r;
            *depth = d;
        }
        FailureMode::Bias => {
            for px in rgb.data.iter_mut() {
                for c in px.iter_mut() {
                    *c = c.saturating_add(60);
                }
            }
        }
    }
}

fn apply_magnetic_failure(
    mode: FailureMode,
    reading: &mut MagneticReading,
    noise_std: f64,
    rng: &mut impl Rng,
) {
    match mode {
        FailureMode::Dropout => {
            let sigma = if noise_std > 0.0 { 50.0 * noise_std } else { 10.0 };
            let normal = Normal::new(0.0, sigma).expect("valid std");
            for f in reading.fields.iter_mut() {
                *f = Vector3::new(
                    normal.sample(rng),
                    normal.sample(rng),
                    normal.sample(rng),
                );
            }
        }
        FailureMode::Garbage => {
            for f in reading.fields.iter_mut() {
                *f = Vector3::new(
                    rng.gen_range(-200.0..200.0),
                    rng.gen_range(-200.0..200.0),
                    rng.gen_range(-200.0..200.0),
                );
            }
        }
        FailureMode::Bias => {
            let bias = Vector3::new(25.0, -15.0, 30.0);
            for f in reading.fields.iter_mut() {
                *f += bias;
            }
        }
    }
}

/// Generate a dataset directory: `frames/NNNNN.ppm`, `depth/NNNNN.pgm`,
/// `mag.csv`, `gt_trajectory.txt`, `schedule.txt`, `config.txt`.
/// Returns the number of frames written.
pub fn render_dataset(
    dir: &Path,
    config: &DatasetConfig,
    schedule: &FailureSchedule,
) -> Result<usize, SimError> {
    config.validate()?;
    schedule.validate(config.duration)?;
    let scene = generate_scene(config.seed);
    let track = generate_trajectory(&config.trajectory_spec(), &scene, config.seed)?;
    let frames_dir = dir.join("frames");
    let depth_dir = dir.join("depth");
    std::fs::create_dir_all(&frames_dir).map_err(io_err(&frames_dir))?;
    std::fs::create_dir_all(&depth_dir).map_err(io_err(&depth_dir))?;
    let mut mag_rng = ChaCha8Rng::seed_from_u64(config.seed);
    mag_rng.set_stream(3);
    let mut readings = Vec::with_capacity(track.len());
    for (i, tp) in track.iter().enumerate() {
        let t = tp.timestamp;
        let (mut rgb, mut depth) = render_frame(&scene, &config.k, &tp.pose);
        let mut failure_rng = frame_rng(config.seed, i);
        if let Some(mode) = schedule.active(SensorKind::Visual, t) {
            apply_visual_failure(mode, &mut rgb, &mut depth, &scene, &config.k, &mut failure_rng);
        }
        write_ppm(&frames_dir.join(format!("{i:05}.ppm")), &rgb)?;
        depth.save_pgm16(&depth_dir.join(format!("{i:05}.pgm")))?;
        let capsule = Pose5::from_pose(&tp.pose, &config.magnet);
        let currents = coil_profile(t, config.actuators.len());
        let mut reading = simulate_reading(
            &capsule,
            &config.magnet,
            &config.array,
            &config.actuators,
            &currents,
            t,
            &mut mag_rng,
        )?;
        if let Some(mode) = schedule.active(SensorKind::Magnetic, t) {
            apply_magnetic_failure(mode, &mut reading, config.array.noise_std, &mut failure_rng);
        }
        readings.push(reading);
    }
    magnetic::write_mag_csv(&dir.join("mag.csv"), &readings)?;
    write_trajectory(&dir.join("gt_trajectory.txt"), &track)?;
    write_schedule(&dir.join("schedule.txt"), schedule)?;
    write_dataset_config(&dir.join("config.txt"), config)?;
    Ok(track.len())
}

/// A dataset opened for reading; frames load lazily.
#[derive(Debug)]
pub struct LoadedDataset {
    pub config: DatasetConfig,
    pub gt: Vec<TimedPose>,
    pub readings: Vec<MagneticReading>,
    pub schedule: FailureSchedule,
    dir: PathBuf,
}

impl LoadedDataset {
    pub fn load(dir: &Path) -> Result<LoadedDataset, SimError> {
        let config = read_dataset_config(&dir.join("config.txt"))?;
        let gt = read_trajectory(&dir.join("gt_trajectory.txt"))?;
        let readings = magnetic::read_mag_csv(&dir.join("mag.csv"), config.actuators.len())?;
        let schedule = read_schedule(&dir.join("schedule.txt"))?;
        Ok(LoadedDataset {
            config,
            gt,
            readings,
            schedule,
            dir: dir.to_path_buf(),
        })
    }

    pub fn len(&self) -> usize {
        self.gt.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gt.is_empty()
    }

    pub fn frame_path(&self, i: usize) -> PathBuf {
        self.dir.join("frames").join(format!("{i:05}.ppm"))
    }

    pub fn depth_path(&self, i: usize) -> PathBuf {
        self.dir.join("depth").join(format!("{i:05}.pgm"))
    }

    pub fn frame(&self, i: usize) -> Result<(RgbImage, DepthImage), SimError> {
        let rgb = read_ppm(&self.frame_path(i))?;
        let depth = DepthImage::load_pgm16(&self.depth_path(i))?;
        Ok((rgb, depth))
    }
}

/// Content hash over every file of a dataset directory, for determinism
/// checks.
pub fn dataset_hash(dir: &Path) -> Result<u64, SimError> {
    let mut files = Vec::new();
    for sub in ["", "frames", "depth"] {
        let d = if sub.is_empty() { dir.to_path_buf() } else { dir.join(sub) };
        let entries = std::fs::read_dir(&d).map_err(io_err(&d))?;
        for e in entries {
            let e = e.map_err(io_err(&d))?;
            if e.path().is_file() {
                files.push(e.path());
            }
        }
    }
    files.sort();
    let mut h = Fnv::new();
    for f in files {
        h.write(f.file_name().unwrap().to_string_lossy().as_bytes());
        let bytes = std::fs::read(&f).map_err(io_err(&f))?;
        h.write(&bytes);
    }
    Ok(h.finish())
}
