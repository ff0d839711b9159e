//! Magnetic 5-DoF localization against a Hall-sensor array.
//!
//! The capsule carries a permanent magnet modeled as a point dipole. An
//! 8x8 array of three-axis Hall sensors above the workspace measures the
//! superposition of the capsule field and the actuation coils' fields; the
//! coil contribution is subtracted using the recorded currents, and the
//! remaining field is fit by Levenberg-Marquardt over position plus heading.
//! Roll about the magnet axis produces no field change, so only 5 degrees
//! of freedom are observable.
//!
//! Units: centimeters, microtesla, ampere, A·cm² for dipole moments. In
//! this system mu0/4pi = 10 exactly: `B[µT] = 10 * m[A·cm²] / r[cm]³`.

use crate::geometry::Pose;
use nalgebra::{Matrix3, Matrix5, Vector3, Vector5};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::fs;
use std::path::Path;
use thiserror::Error;

/// mu0/(4 pi) in µT·cm³ per A·cm².
pub const MU0_OVER_4PI: f64 = 10.0;

/// Minimum source-to-field-point distance for the dipole model.
pub const MIN_DIPOLE_DISTANCE: f64 = 0.1;

#[derive(Debug, Error)]
pub enum MagneticError {
    #[error("field point {dist} cm from the dipole is below the {MIN_DIPOLE_DISTANCE} cm model limit")]
    Singularity { dist: f64 },
    #[error("capsule position ({0}, {1}, {2}) is outside the workspace")]
    OutOfWorkspace(f64, f64, f64),
    #[error("expected {expected} coil currents, got {got}")]
    CurrentCount { expected: usize, got: usize },
    #[error("localization did not converge within {iterations} iterations (residual {residual_norm})")]
    NonConvergence { iterations: usize, residual_norm: f64 },
    #[error("bad geometry file {path}: {reason}")]
    Geometry { path: String, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Permanent magnet carried by the capsule.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MagnetModel {
    /// Dipole moment magnitude in A·cm².
    pub moment: f64,
    /// Moment axis in the capsule body frame (unit).
    pub axis: Vector3<f64>,
}

impl Default for MagnetModel {
    fn default() -> Self {
        MagnetModel {
            moment: 2000.0,
            axis: Vector3::new(0.0, 0.0, 1.0),
        }
    }
}

/// Hall sensor array on a plane above the workspace.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorArray {
    pub positions: Vec<Vector3<f64>>,
    /// Rows are the three measurement axes of each sensor (world frame).
    pub axes: Vec<Matrix3<f64>>,
    /// Per-axis Gaussian noise standard deviation in µT.
    pub noise_std: f64,
    pub workspace_min: Vector3<f64>,
    pub workspace_max: Vector3<f64>,
}

impl SensorArray {
    /// 8x8 grid, 5 cm pitch, 10 cm above the workspace center.
    pub fn default_8x8() -> SensorArray {
        let mut positions = Vec::with_capacity(64);
        for row in 0..8 {
            for col in 0..8 {
                positions.push(Vector3::new(
                    (col as f64 - 3.5) * 5.0,
                    (row as f64 - 3.5) * 5.0,
                    10.0,
                ));
            }
        }
        SensorArray {
            axes: vec![Matrix3::identity(); positions.len()],
            positions,
            noise_std: 0.5,
            workspace_min: Vector3::new(-18.0, -18.0, -10.0),
            workspace_max: Vector3::new(18.0, 18.0, 8.0),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| p[i] >= self.workspace_min[i] && p[i] <= self.workspace_max[i])
    }

    /// Expected residual norm when the model is exact: per-axis noise over
    /// 3 N channels.
    pub fn expected_noise_norm(&self) -> f64 {
        self.noise_std * (3.0 * self.len() as f64).sqrt()
    }
}

/// Electromagnet array modeled as gain-scaled dipoles.
#[derive(Debug, Clone, PartialEq)]
pub struct ActuatorModel {
    pub positions: Vec<Vector3<f64>>,
    pub axes: Vec<Vector3<f64>>,
    /// Moment per ampere, A·cm²/A.
    pub gains: Vec<f64>,
}

impl ActuatorModel {
    /// 3x3 coil grid, 10 cm pitch, 15 cm below the workspace center.
    pub fn default_3x3() -> ActuatorModel {
        let mut positions = Vec::with_capacity(9);
        for row in 0..3 {
            for col in 0..3 {
                positions.push(Vector3::new(
                    (col as f64 - 1.0) * 10.0,
                    (row as f64 - 1.0) * 10.0,
                    -15.0,
                ));
            }
        }
        ActuatorModel {
            axes: vec![Vector3::new(0.0, 0.0, 1.0); 9],
            gains: vec![5000.0; 9],
            positions,
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Superposed coil field at a point for the given currents.
    pub fn field_at(&self, p: &Vector3<f64>, currents: &[f64]) -> Result<Vector3<f64>, MagneticError> {
        if currents.len() != self.len() {
            return Err(MagneticError::CurrentCount {
                expected: self.len(),
                got: currents.len(),
            });
        }
        let mut b = Vector3::zeros();
        for i in 0..self.len() {
            let m = self.axes[i] * (self.gains[i] * currents[i]);
            b += dipole_field(&m, &(p - self.positions[i]))?;
        }
        Ok(b)
    }
}

/// One Hall-array sample: per-sensor field vectors plus the coil currents
/// that were active when it was taken.
#[derive(Debug, Clone, PartialEq)]
pub struct MagneticReading {
    pub timestamp: f64,
    pub fields: Vec<Vector3<f64>>,
    pub currents: Vec<f64>,
}

/// Position plus magnet heading; roll about the heading is unobservable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose5 {
    pub position: Vector3<f64>,
    pub heading: Vector3<f64>,
}

impl Pose5 {
    pub fn new(position: Vector3<f64>, heading: Vector3<f64>) -> Pose5 {
        Pose5 {
            position,
            heading: heading.normalize(),
        }
    }

    /// Project a full rigid-body pose to the observable 5 DoF.
    pub fn from_pose(pose: &Pose, magnet: &MagnetModel) -> Pose5 {
        Pose5 {
            position: pose.translation,
            heading: (pose.rotation * magnet.axis).normalize(),
        }
    }

    /// World-frame dipole moment.
    pub fn moment(&self, magnet: &MagnetModel) -> Vector3<f64> {
        self.heading * magnet.moment
    }

    /// Angle between headings, radians.
    pub fn heading_angle_to(&self, other: &Pose5) -> f64 {
        self.heading.dot(&other.heading).clamp(-1.0, 1.0).acos()
    }
}

/// Point-dipole field: B(r) = (mu0/4pi) (3 r_hat (r_hat . m) - m) / |r|³.
pub fn dipole_field(m: &Vector3<f64>, r: &Vector3<f64>) -> Result<Vector3<f64>, MagneticError> {
    let dist = r.norm();
    if dist <= MIN_DIPOLE_DISTANCE {
        return Err(MagneticError::Singularity { dist });
    }
    let rhat = r / dist;
    Ok((rhat * (3.0 * rhat.dot(m)) - m) * (MU0_OVER_4PI / (dist * dist * dist)))
}

/// Noise-free field of the capsule alone at every sensor.
fn capsule_fields(
    capsule: &Pose5,
    magnet: &MagnetModel,
    array: &SensorArray,
) -> Result<Vec<Vector3<f64>>, MagneticError> {
    let m = capsule.moment(magnet);
    array
        .positions
        .iter()
        .zip(&array.axes)
        .map(|(s, axes)| Ok(axes * dipole_field(&m, &(s - capsule.position))?))
        .collect()
}

/// Simulate one Hall-array sample. With `noise_std == 0` no rng draws are
/// consumed; otherwise exactly 3 draws per sensor, in sensor order.
pub fn simulate_reading(
    capsule: &Pose5,
    magnet: &MagnetModel,
    array: &SensorArray,
    actuators: &ActuatorModel,
    currents: &[f64],
    timestamp: f64,
    rng: &mut impl Rng,
) -> Result<MagneticReading, MagneticError> {
    if !array.contains(&capsule.position) {
        return Err(MagneticError::OutOfWorkspace(
            capsule.position.x,
            capsule.position.y,
            capsule.position.z,
        ));
    }
    let mut fields = capsule_fields(capsule, magnet, array)?;
    for (i, f) in fields.iter_mut().enumerate() {
        *f += array.axes[i] * actuators.field_at(&array.positions[i], currents)?;
    }
    if array.noise_std > 0.0 {
        let normal = Normal::new(0.0, array.noise_std).expect("valid std");
        for f in fields.iter_mut() {
            for k in 0..3 {
                f[k] += normal.sample(rng);
            }
        }
    }
    Ok(MagneticReading {
        timestamp,
        fields,
        currents: currents.to_vec(),
    })
}

/// Remove the modeled coil contribution from a reading.
pub fn subtract_actuator(
    reading: &MagneticReading,
    array: &SensorArray,
    actuators: &ActuatorModel,
) -> Result<Vec<Vector3<f64>>, MagneticError> {
    reading
        .fields
        .iter()
        .enumerate()
        .map(|(i, f)| {
            Ok(f - array.axes[i] * actuators.field_at(&array.positions[i], &reading.currents)?)
        })
        .collect()
}

/// Result of a 5-DoF fit.
#[derive(Debug, Clone, Copy)]
pub struct Localization {
    pub pose: Pose5,
    /// Euclidean norm of the stacked field residual, µT.
    pub residual_norm: f64,
    /// Residual exceeds 5x the expected noise energy; downstream fusion
    /// treats such estimates as sensor failures.
    pub unreliable: bool,
    pub iterations: usize,
}

/// Heading chart: spherical angles about the z or the x axis. The solver
/// switches charts whenever the heading comes within 10 degrees of the
/// active chart's pole.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Chart {
    Z,
    X,
}

const CHART_SWITCH_COS: f64 = 0.984_807_753_012_208; // cos(10 degrees)

fn pick_chart(h: &Vector3<f64>) -> Chart {
    if h.z.abs() > CHART_SWITCH_COS {
        Chart::X
    } else {
        Chart::Z
    }
}

fn heading_to_angles(h: &Vector3<f64>, chart: Chart) -> (f64, f64) {
    match chart {
        Chart::Z => (h.z.clamp(-1.0, 1.0).acos(), h.y.atan2(h.x)),
        Chart::X => (h.x.clamp(-1.0, 1.0).acos(), h.z.atan2(h.y)),
    }
}

fn angles_to_heading(theta: f64, phi: f64, chart: Chart) -> Vector3<f64> {
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = phi.sin_cos();
    match chart {
        Chart::Z => Vector3::new(st * cp, st * sp, ct),
        Chart::X => Vector3::new(ct, st * cp, st * sp),
    }
}

fn stack_residuals(
    params: &Vector5<f64>,
    chart: Chart,
    corrected: &[Vector3<f64>],
    array: &SensorArray,
    magnet: &MagnetModel,
    out: &mut [f64],
) {
    let pose = Pose5 {
        position: Vector3::new(params[0], params[1], params[2]),
        heading: angles_to_heading(params[3], params[4], chart),
    };
    let m = pose.moment(magnet);
    for (i, (s, axes)) in array.positions.iter().zip(&array.axes).enumerate() {
        let r = s - pose.position;
        let b = match dipole_field(&m, &r) {
            Ok(b) => axes * b,
            // inside the singular ball the model explodes; a huge residual
            // steers the optimizer away instead of aborting the fit
            Err(_) => Vector3::repeat(1e9),
        };
        let d = b - corrected[i];
        out[3 * i] = d.x;
        out[3 * i + 1] = d.y;
        out[3 * i + 2] = d.z;
    }
}

/// Levenberg-Marquardt fit of position and heading to actuator-corrected
/// field measurements.
///
/// The Jacobian is taken by central differences over the five parameters.
/// Fails if the cost cannot be reduced within 100 iterations; estimates
/// whose residual exceeds 5x the array's expected noise norm are flagged
/// unreliable rather than rejected.
pub fn localize_5dof(
    corrected: &[Vector3<f64>],
    array: &SensorArray,
    magnet: &MagnetModel,
    init: &Pose5,
) -> Result<Localization, MagneticError> {
    const MAX_ITERS: usize = 100;
    assert_eq!(corrected.len(), array.len());
    if !array.contains(&init.position) {
        return Err(MagneticError::OutOfWorkspace(
            init.position.x,
            init.position.y,
            init.position.z,
        ));
    }
    let n = 3 * array.len();
    let mut chart = pick_chart(&init.heading);
    let h0 = init.heading.normalize();
    let (t0, p0) = heading_to_angles(&h0, chart);
    let mut params = Vector5::new(init.position.x, init.position.y, init.position.z, t0, p0);
    let mut res = vec![0.0; n];
    stack_residuals(&params, chart, corrected, array, magnet, &mut res);
    let mut cost: f64 = res.iter().map(|r| r * r).sum();
    let mut lambda = 1e-3;
    let mut iterations = 0;
    let steps = [1e-5, 1e-5, 1e-5, 1e-6, 1e-6];
    let mut res_p = vec![0.0; n];
    let mut res_m = vec![0.0; n];
    let mut jac = vec![[0.0; 5]; n];
    for _ in 0..MAX_ITERS {
        iterations += 1;
        for j in 0..5 {
            let mut up = params;
            let mut dn = params;
            up[j] += steps[j];
            dn[j] -= steps[j];
            stack_residuals(&up, chart, corrected, array, magnet, &mut res_p);
            stack_residuals(&dn, chart, corrected, array, magnet, &mut res_m);
            let inv = 0.5 / steps[j];
            for i in 0..n {
                jac[i][j] = (res_p[i] - res_m[i]) * inv;
            }
        }
        let mut jtj = Matrix5::<f64>::zeros();
        let mut jtr = Vector5::<f64>::zeros();
        for i in 0..n {
            for a in 0..5 {
                jtr[a] += jac[i][a] * res[i];
                for b in a..5 {
                    jtj[(a, b)] += jac[i][a] * jac[i][b];
                }
            }
        }
        for a in 0..5 {
            for b in 0..a {
                jtj[(a, b)] = jtj[(b, a)];
            }
        }
        let mut improved = false;
        for _ in 0..12 {
            let mut damped = jtj;
            for a in 0..5 {
                damped[(a, a)] += lambda * jtj[(a, a)].max(1e-12);
            }
            let Some(delta) = damped.lu().solve(&jtr) else {
                lambda *= 10.0;
                continue;
            };
            let trial = params - delta;
            stack_residuals(&trial, chart, corrected, array, magnet, &mut res_p);
            let trial_cost: f64 = res_p.iter().map(|r| r * r).sum();
            if trial_cost < cost {
                params = trial;
                std::mem::swap(&mut res, &mut res_p);
                let rel = (cost - trial_cost) / cost.max(1e-300);
                cost = trial_cost;
                lambda = (lambda / 3.0).max(1e-12);
                improved = true;
                // re-chart if the heading drifted near the active pole
                let h = angles_to_heading(params[3], params[4], chart);
                let fresh = pick_chart(&h);
                if fresh != chart {
                    chart = fresh;
                    let (t, p) = heading_to_angles(&h, chart);
                    params[3] = t;
                    params[4] = p;
                }
                if rel < 1e-14 || delta.norm() < 1e-12 {
                    let pose = Pose5::new(
                        Vector3::new(params[0], params[1], params[2]),
                        angles_to_heading(params[3], params[4], chart),
                    );
                    let residual_norm = cost.sqrt();
                    let expected = array.expected_noise_norm();
                    return Ok(Localization {
                        pose,
                        residual_norm,
                        unreliable: expected > 0.0 && residual_norm > 5.0 * expected,
                        iterations,
                    });
                }
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            // stuck in a flat region: accept only if the fit already sits at
            // the noise floor, otherwise report non-convergence below
            break;
        }
    }
    let residual_norm = cost.sqrt();
    let expected = array.expected_noise_norm();
    if residual_norm <= 5.0 * expected.max(1e-9) {
        return Ok(Localization {
            pose: Pose5::new(
                Vector3::new(params[0], params[1], params[2]),
                angles_to_heading(params[3], params[4], chart),
            ),
            residual_norm,
            unreliable: expected > 0.0 && residual_norm > 5.0 * expected,
            iterations,
        });
    }
    Err(MagneticError::NonConvergence {
        iterations,
        residual_norm,
    })
}

/// Write readings as CSV rows `t, i0..i8, sensor_id, bx, by, bz`.
pub fn write_mag_csv(path: &Path, readings: &[MagneticReading]) -> Result<(), MagneticError> {
    use std::io::Write;
    let f = fs::File::create(path).map_err(|e| MagneticError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut w = std::io::BufWriter::new(f);
    let mut emit = |line: String| -> Result<(), MagneticError> {
        writeln!(w, "{line}").map_err(|e| MagneticError::Io {
            path: path.display().to_string(),
            source: e,
        })
    };
    for reading in readings {
        let currents = reading
            .currents
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join(",");
        for (id, b) in reading.fields.iter().enumerate() {
            emit(format!(
                "{},{},{},{},{},{}",
                reading.timestamp, currents, id, b.x, b.y, b.z
            ))?;
        }
    }
    Ok(())
}

/// Read a CSV written by [`write_mag_csv`]. Rows sharing a timestamp are
/// grouped into one reading; sensor ids index the field vector.
pub fn read_mag_csv(path: &Path, n_coils: usize) -> Result<Vec<MagneticReading>, MagneticError> {
    let text = fs::read_to_string(path).map_err(|e| MagneticError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let bad = |reason: &str| MagneticError::Geometry {
        path: path.display().to_string(),
        reason: reason.to_string(),
    };
    let mut readings: Vec<MagneticReading> = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        if cols.len() != n_coils + 5 {
            return Err(bad(&format!(
                "expected {} columns, got {}",
                n_coils + 5,
                cols.len()
            )));
        }
        let t: f64 = cols[0].parse().map_err(|_| bad("bad timestamp"))?;
        let currents: Vec<f64> = cols[1..1 + n_coils]
            .iter()
            .map(|c| c.parse().map_err(|_| bad("bad current")))
            .collect::<Result<_, _>>()?;
        let id: usize = cols[1 + n_coils].parse().map_err(|_| bad("bad sensor id"))?;
        let b = Vector3::new(
            cols[2 + n_coils].parse().map_err(|_| bad("bad bx"))?,
            cols[3 + n_coils].parse().map_err(|_| bad("bad by"))?,
            cols[4 + n_coils].parse().map_err(|_| bad("bad bz"))?,
        );
        let need_new = readings.last().map(|r| r.timestamp != t).unwrap_or(true);
        if need_new {
            readings.push(MagneticReading {
                timestamp: t,
                fields: Vec::new(),
                currents,
            });
        }
        let reading = readings.last_mut().unwrap();
        if reading.fields.len() != id {
            return Err(bad("sensor ids must be contiguous from 0 per timestamp"));
        }
        reading.fields.push(b);
    }
    Ok(readings)
}

/// Append the geometry key lines used by geometry and dataset config files.
pub(crate) fn format_geometry(array: &SensorArray, actuators: &ActuatorModel, out: &mut String) {
    out.push_str("# sensor <id> <x> <y> <z>\n");
    out.push_str("# coil <id> <x> <y> <z> <ax> <ay> <az> <gain A·cm² per A>\n");
    out.push_str(&format!("noise_std {}\n", array.noise_std));
    out.push_str(&format!(
        "workspace_min {} {} {}\n",
        array.workspace_min.x, array.workspace_min.y, array.workspace_min.z
    ));
    out.push_str(&format!(
        "workspace_max {} {} {}\n",
        array.workspace_max.x, array.workspace_max.y, array.workspace_max.z
    ));
    for (i, p) in array.positions.iter().enumerate() {
        out.push_str(&format!("sensor {i} {} {} {}\n", p.x, p.y, p.z));
    }
    for i in 0..actuators.len() {
        let p = actuators.positions[i];
        let a = actuators.axes[i];
        out.push_str(&format!(
            "coil {i} {} {} {} {} {} {} {}\n",
            p.x, p.y, p.z, a.x, a.y, a.z, actuators.gains[i]
        ));
    }
}

/// Accumulates geometry key lines; shared by the geometry file parser
/// and the dataset config parser.
#[derive(Debug)]
pub(crate) struct GeometryBuilder {
    pub array: SensorArray,
    pub actuators: ActuatorModel,
}

impl GeometryBuilder {
    pub fn new() -> GeometryBuilder {
        GeometryBuilder {
            array: SensorArray {
                positions: Vec::new(),
                axes: Vec::new(),
                noise_std: 0.0,
                workspace_min: Vector3::new(-18.0, -18.0, -10.0),
                workspace_max: Vector3::new(18.0, 18.0, 8.0),
            },
            actuators: ActuatorModel {
                positions: Vec::new(),
                axes: Vec::new(),
                gains: Vec::new(),
            },
        }
    }

    /// Consume one `key rest...` line; Ok(false) means the key is not a
    /// geometry key and belongs to the caller.
    pub fn consume(&mut self, key: &str, rest: &[f64]) -> Result<bool, String> {
        match key {
            "noise_std" if rest.len() == 1 => self.array.noise_std = rest[0],
            "workspace_min" if rest.len() == 3 => {
                self.array.workspace_min = Vector3::new(rest[0], rest[1], rest[2])
            }
            "workspace_max" if rest.len() == 3 => {
                self.array.workspace_max = Vector3::new(rest[0], rest[1], rest[2])
            }
            "sensor" if rest.len() == 4 => {
                if rest[0] as usize != self.array.positions.len() {
                    return Err("sensor ids must be contiguous".into());
                }
                self.array.positions.push(Vector3::new(rest[1], rest[2], rest[3]));
                self.array.axes.push(Matrix3::identity());
            }
            "coil" if rest.len() == 8 => {
                if rest[0] as usize != self.actuators.positions.len() {
                    return Err("coil ids must be contiguous".into());
                }
                self.actuators
                    .positions
                    .push(Vector3::new(rest[1], rest[2], rest[3]));
                self.actuators.axes.push(Vector3::new(rest[4], rest[5], rest[6]));
                self.actuators.gains.push(rest[7]);
            }
            "noise_std" | "workspace_min" | "workspace_max" | "sensor" | "coil" => {
                return Err(format!("wrong field count for key '{key}'"))
            }
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Save array plus coil geometry as a documented plain-text config.
pub fn write_geometry(
    path: &Path,
    array: &SensorArray,
    actuators: &ActuatorModel,
) -> Result<(), MagneticError> {
    let mut s = String::from("# hall array / coil geometry (cm, µT, A·cm²)\n");
    format_geometry(array, actuators, &mut s);
    fs::write(path, s).map_err(|e| MagneticError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

/// Load geometry written by [`write_geometry`].
pub fn read_geometry(path: &Path) -> Result<(SensorArray, ActuatorModel), MagneticError> {
    let text = fs::read_to_string(path).map_err(|e| MagneticError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let bad = |reason: String| MagneticError::Geometry {
        path: path.display().to_string(),
        reason,
    };
    let mut builder = GeometryBuilder::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let key = it.next().unwrap();
        let rest: Vec<f64> = it
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| bad(format!("bad number in line '{line}'")))
            })
            .collect::<Result<_, _>>()?;
        match builder.consume(key, &rest) {
            Ok(true) => {}
            Ok(false) => return Err(bad(format!("unrecognized line '{line}'"))),
            Err(reason) => return Err(bad(reason)),
        }
    }
    Ok((builder.array, builder.actuators))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit(v: Vector3<f64>) -> Vector3<f64> {
        v.normalize()
    }

    #[test]
    fn on_axis_field_is_twice_equatorial() {
        let m = Vector3::new(0.0, 0.0, 50.0);
        let d = 4.0;
        let on_axis = dipole_field(&m, &Vector3::new(0.0, 0.0, d)).unwrap();
        // on-axis: (3 m - m)/d³ = 2 m /d³
        assert_relative_eq!(
            on_axis,
            Vector3::new(0.0, 0.0, MU0_OVER_4PI * 2.0 * 50.0 / 64.0),
            epsilon = 1e-12
        );
        let equatorial = dipole_field(&m, &Vector3::new(d, 0.0, 0.0)).unwrap();
        assert_relative_eq!(
            equatorial,
            Vector3::new(0.0, 0.0, -MU0_OVER_4PI * 50.0 / 64.0),
            epsilon = 1e-12
        );
    }

    #[test]
    fn cubic_falloff() {
        let m = Vector3::new(10.0, -20.0, 5.0);
        let r = Vector3::new(3.0, 1.0, -2.0);
        let b1 = dipole_field(&m, &r).unwrap();
        let b2 = dipole_field(&m, &(r * 2.0)).unwrap();
        assert_relative_eq!(b2.norm() * 8.0, b1.norm(), epsilon = 1e-12);
    }

    #[test]
    fn singularity_guard() {
        let m = Vector3::new(0.0, 0.0, 1.0);
        assert!(matches!(
            dipole_field(&m, &Vector3::new(0.05, 0.0, 0.0)),
            Err(MagneticError::Singularity { .. })
        ));
    }

    fn noiseless_array() -> SensorArray {
        let mut a = SensorArray::default_8x8();
        a.noise_std = 0.0;
        a
    }

    #[test]
    fn zero_currents_zero_noise_reading_is_pure_capsule_field() {
        let array = noiseless_array();
        let actuators = ActuatorModel::default_3x3();
        let magnet = MagnetModel::default();
        let capsule = Pose5::new(Vector3::new(2.0, -1.0, 0.0), unit(Vector3::new(0.3, 0.2, 1.0)));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let reading = simulate_reading(
            &capsule,
            &magnet,
            &array,
            &actuators,
            &[0.0; 9],
            0.0,
            &mut rng,
        )
        .unwrap();
        let pure = capsule_fields(&capsule, &magnet, &array).unwrap();
        for (a, b) in reading.fields.iter().zip(&pure) {
            assert_relative_eq!(a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn zero_moment_reading_is_pure_actuator_field() {
        let array = noiseless_array();
        let actuators = ActuatorModel::default_3x3();
        let magnet = MagnetModel {
            moment: 0.0,
            ..Default::default()
        };
        let capsule = Pose5::new(Vector3::zeros(), Vector3::z());
        let currents = [1.0, -0.5, 0.2, 0.0, 0.7, -0.1, 0.4, 0.9, -0.3];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let reading =
            simulate_reading(&capsule, &magnet, &array, &actuators, &currents, 0.0, &mut rng)
                .unwrap();
        for (i, f) in reading.fields.iter().enumerate() {
            let expected = actuators.field_at(&array.positions[i], &currents).unwrap();
            assert_relative_eq!(f, &expected, epsilon = 1e-15);
        }
    }

    #[test]
    fn same_seed_reproduces_bits() {
        let mut array = SensorArray::default_8x8();
        array.noise_std = 0.8;
        let actuators = ActuatorModel::default_3x3();
        let magnet = MagnetModel::default();
        let capsule = Pose5::new(Vector3::new(1.0, 2.0, -3.0), unit(Vector3::new(1.0, 1.0, 1.0)));
        let currents = [0.5; 9];
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            simulate_reading(&capsule, &magnet, &array, &actuators, &currents, 1.5, &mut rng)
                .unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
    }

    #[test]
    fn superposition_is_exact() {
        let array = noiseless_array();
        let actuators = ActuatorModel::default_3x3();
        let magnet = MagnetModel::default();
        let capsule = Pose5::new(Vector3::new(-3.0, 4.0, 1.0), unit(Vector3::new(0.1, -0.9, 0.6)));
        let currents = [0.3, 0.1, -0.7, 0.2, 0.0, 0.9, -0.4, 0.6, 0.5];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let both =
            simulate_reading(&capsule, &magnet, &array, &actuators, &currents, 0.0, &mut rng)
                .unwrap();
        let capsule_only = simulate_reading(
            &capsule,
            &magnet,
            &array,
            &actuators,
            &[0.0; 9],
            0.0,
            &mut rng,
        )
        .unwrap();
        let actuators_only = simulate_reading(
            &capsule,
            &MagnetModel {
                moment: 0.0,
                ..Default::default()
            },
            &array,
            &actuators,
            &currents,
            0.0,
            &mut rng,
        )
        .unwrap();
        for i in 0..array.len() {
            assert_relative_eq!(
                both.fields[i],
                capsule_only.fields[i] + actuators_only.fields[i],
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn out_of_workspace_is_rejected() {
        let array = noiseless_array();
        let actuators = ActuatorModel::default_3x3();
        let capsule = Pose5::new(Vector3::new(100.0, 0.0, 0.0), Vector3::z());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            simulate_reading(
                &capsule,
                &MagnetModel::default(),
                &array,
                &actuators,
                &[0.0; 9],
                0.0,
                &mut rng
            ),
            Err(MagneticError::OutOfWorkspace(..))
        ));
    }

    #[test]
    fn subtraction_recovers_pure_capsule_field() {
        let array = noiseless_array();
        let actuators = ActuatorModel::default_3x3();
        let magnet = MagnetModel::default();
        let capsule = Pose5::new(Vector3::new(0.5, -2.0, 2.0), unit(Vector3::new(0.2, 0.8, 0.5)));
        let currents = [1.0, 0.2, -0.8, 0.4, -0.6, 0.9, 0.1, -0.2, 0.7];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let reading =
            simulate_reading(&capsule, &magnet, &array, &actuators, &currents, 0.0, &mut rng)
                .unwrap();
        let corrected = subtract_actuator(&reading, &array, &actuators).unwrap();
        let pure = capsule_fields(&capsule, &magnet, &array).unwrap();
        for (a, b) in corrected.iter().zip(&pure) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn zero_currents_subtraction_is_noop() {
        let array = noiseless_array();
        let actuators = ActuatorModel::default_3x3();
        let magnet = MagnetModel::default();
        let capsule = Pose5::new(Vector3::new(0.0, 0.0, 0.0), Vector3::z());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let reading = simulate_reading(
            &capsule,
            &magnet,
            &array,
            &actuators,
            &[0.0; 9],
            0.0,
            &mut rng,
        )
        .unwrap();
        let corrected = subtract_actuator(&reading, &array, &actuators).unwrap();
        for (a, b) in corrected.iter().zip(&reading.fields) {
            assert_relative_eq!(a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn noiseless_localization_is_exact() {
        let array = noiseless_array();
        let actuators = ActuatorModel::default_3x3();
        let magnet = MagnetModel::default();
        let truth = Pose5::new(Vector3::new(1.5, -2.5, 0.5), unit(Vector3::new(0.4, 0.3, 0.85)));
        let currents = [0.2, -0.1, 0.5, 0.0, 0.3, -0.6, 0.1, 0.4, -0.2];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let reading =
            simulate_reading(&truth, &magnet, &array, &actuators, &currents, 0.0, &mut rng)
                .unwrap();
        let corrected = subtract_actuator(&reading, &array, &actuators).unwrap();
        let init = Pose5::new(
            truth.position + Vector3::new(1.2, -1.0, 1.1),
            unit(truth.heading + Vector3::new(0.3, -0.2, 0.1)),
        );
        let loc = localize_5dof(&corrected, &array, &magnet, &init).unwrap();
        assert!(
            (loc.pose.position - truth.position).norm() < 1e-6,
            "position error {}",
            (loc.pose.position - truth.position).norm()
        );
        assert!(
            loc.pose.heading_angle_to(&truth) < 1e-7,
            "heading error {}",
            loc.pose.heading_angle_to(&truth)
        );
        assert!(!loc.unreliable);
    }

    #[test]
    fn heading_sign_is_recovered() {
        let array = noiseless_array();
        let actuators = ActuatorModel::default_3x3();
        let magnet = MagnetModel::default();
        let truth = Pose5::new(Vector3::new(0.0, 1.0, 0.0), unit(Vector3::new(0.1, 0.2, 0.97)));
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let reading = simulate_reading(
            &truth,
            &magnet,
            &array,
            &actuators,
            &[0.0; 9],
            0.0,
            &mut rng,
        )
        .unwrap();
        let corrected = subtract_actuator(&reading, &array, &actuators).unwrap();
        // start with the heading tilted far toward the antipode
        let init = Pose5::new(
            truth.position + Vector3::new(0.5, 0.5, -0.5),
            unit(-truth.heading + Vector3::new(0.4, 0.0, 0.0)),
        );
        let loc = localize_5dof(&corrected, &array, &magnet, &init).unwrap();
        assert!(
            loc.pose.heading.dot(&truth.heading) > 0.9999999,
            "recovered heading {:?} does not match {:?}",
            loc.pose.heading,
            truth.heading
        );
    }

    #[test]
    fn chart_switch_near_pole() {
        let array = noiseless_array();
        let actuators = ActuatorModel::default_3x3();
        let magnet = MagnetModel::default();
        // truth heading 2 degrees from the z pole
        let th = 2.0_f64.to_radians();
        let truth = Pose5::new(
            Vector3::new(-1.0, 0.5, 1.0),
            Vector3::new(th.sin(), 0.0, th.cos()),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let reading = simulate_reading(
            &truth,
            &magnet,
            &array,
            &actuators,
            &[0.0; 9],
            0.0,
            &mut rng,
        )
        .unwrap();
        let corrected = subtract_actuator(&reading, &array, &actuators).unwrap();
        let init = Pose5::new(
            truth.position + Vector3::new(0.8, -0.8, 0.5),
            unit(Vector3::new(0.25, 0.1, 0.96)),
        );
        let loc = localize_5dof(&corrected, &array, &magnet, &init).unwrap();
        assert!((loc.pose.position - truth.position).norm() < 1e-6);
        assert!(loc.pose.heading_angle_to(&truth) < 1e-6);
    }

    #[test]
    fn residual_at_truth_matches_noise_energy() {
        let mut array = SensorArray::default_8x8();
        array.noise_std = 0.5;
        let actuators = ActuatorModel::default_3x3();
        let magnet = MagnetModel::default();
        let truth = Pose5::new(Vector3::new(0.5, 0.5, 0.0), unit(Vector3::new(0.2, -0.3, 0.93)));
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let trials = 200;
        let mut total = 0.0;
        for _ in 0..trials {
            let reading = simulate_reading(
                &truth,
                &magnet,
                &array,
                &actuators,
                &[0.0; 9],
                0.0,
                &mut rng,
            )
            .unwrap();
            let corrected = subtract_actuator(&reading, &array, &actuators).unwrap();
            let pure = capsule_fields(&truth, &magnet, &array).unwrap();
            let cost: f64 = corrected
                .iter()
                .zip(&pure)
                .map(|(a, b)| (a - b).norm_squared())
                .sum();
            total += cost;
        }
        let mean = total / trials as f64;
        let expected = 3.0 * array.len() as f64 * array.noise_std * array.noise_std;
        assert!(
            (mean - expected).abs() / expected < 0.1,
            "mean residual energy {mean} vs chi-square expectation {expected}"
        );
    }

    #[test]
    fn corrupted_current_record_shows_up_in_residual() {
        let mut array = SensorArray::default_8x8();
        array.noise_std = 0.2;
        let actuators = ActuatorModel::default_3x3();
        let magnet = MagnetModel::default();
        let truth = Pose5::new(Vector3::new(0.0, 0.0, 2.0), unit(Vector3::new(0.1, 0.1, 0.99)));
        let currents = [2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut reading =
            simulate_reading(&truth, &magnet, &array, &actuators, &currents, 0.0, &mut rng)
                .unwrap();
        // record claims the wrong coil was driven
        reading.currents = vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 2.0];
        let corrected = subtract_actuator(&reading, &array, &actuators).unwrap();
        let init = Pose5::new(truth.position + Vector3::new(0.5, 0.5, 0.5), truth.heading);
        match localize_5dof(&corrected, &array, &magnet, &init) {
            Ok(loc) => assert!(
                loc.unreliable,
                "residual {} should exceed 5x noise {}",
                loc.residual_norm,
                array.expected_noise_norm()
            ),
            Err(MagneticError::NonConvergence { residual_norm, .. }) => {
                assert!(residual_norm > 5.0 * array.expected_noise_norm());
            }
            Err(e) => panic!("unexpected error {e}"),
        }
    }

    #[test]
    fn position_rmse_grows_with_standoff() {
        let mut array = SensorArray::default_8x8();
        array.noise_std = 0.5;
        array.workspace_min.z = -10.0;
        let actuators = ActuatorModel::default_3x3();
        let magnet = MagnetModel::default();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut rmse = Vec::new();
        for standoff in [5.0, 10.0, 15.0] {
            let truth = Pose5::new(
                Vector3::new(0.0, 0.0, 10.0 - standoff),
                unit(Vector3::new(0.3, 0.1, 0.95)),
            );
            let mut se = 0.0;
            let trials = 500;
            for _ in 0..trials {
                let reading = simulate_reading(
                    &truth,
                    &magnet,
                    &array,
                    &actuators,
                    &[0.0; 9],
                    0.0,
                    &mut rng,
                )
                .unwrap();
                let corrected = subtract_actuator(&reading, &array, &actuators).unwrap();
                let init = Pose5::new(
                    truth.position + Vector3::new(0.4, -0.3, 0.3),
                    unit(truth.heading + Vector3::new(0.05, 0.05, 0.0)),
                );
                let loc = localize_5dof(&corrected, &array, &magnet, &init).unwrap();
                se += (loc.pose.position - truth.position).norm_squared();
            }
            rmse.push((se / trials as f64).sqrt());
        }
        assert!(
            rmse[0] < rmse[1] && rmse[1] < rmse[2],
            "rmse not monotone in standoff: {rmse:?}"
        );
    }

    #[test]
    fn mag_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mag.csv");
        let mut array = SensorArray::default_8x8();
        array.noise_std = 0.3;
        let actuators = ActuatorModel::default_3x3();
        let magnet = MagnetModel::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let capsule = Pose5::new(Vector3::new(1.0, 1.0, 0.0), unit(Vector3::new(0.5, 0.5, 0.7)));
        let currents = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];
        let readings: Vec<MagneticReading> = (0..3)
            .map(|i| {
                simulate_reading(
                    &capsule,
                    &magnet,
                    &array,
                    &actuators,
                    &currents,
                    i as f64 / 15.0,
                    &mut rng,
                )
                .unwrap()
            })
            .collect();
        write_mag_csv(&path, &readings).unwrap();
        let back = read_mag_csv(&path, 9).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in readings.iter().zip(&back) {
            assert_eq!(a.timestamp, b.timestamp);
            assert_eq!(a.currents, b.currents);
            assert_eq!(a.fields.len(), b.fields.len());
            for (fa, fb) in a.fields.iter().zip(&b.fields) {
                assert_relative_eq!(fa, fb, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn geometry_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("geometry.txt");
        let array = SensorArray::default_8x8();
        let actuators = ActuatorModel::default_3x3();
        write_geometry(&path, &array, &actuators).unwrap();
        let (array2, actuators2) = read_geometry(&path).unwrap();
        assert_eq!(array.positions, array2.positions);
        assert_eq!(array.noise_std, array2.noise_std);
        assert_eq!(array.workspace_min, array2.workspace_min);
        assert_eq!(actuators.positions, actuators2.positions);
        assert_eq!(actuators.axes, actuators2.axes);
        assert_eq!(actuators.gains, actuators2.gains);
    }
}
