//! Particle filter over 6-DoF pose with per-sensor latent reliability
//! switches. Each particle carries, per sensor, a switch s in {0 failure,
//! 1 nominal} and a probability vector alpha over those states. Nominal
//! sensors contribute a Gaussian residual likelihood; failed sensors
//! contribute a constant density independent of the state, so particles
//! that explain bad data as failure survive reweighting and the posterior
//! over s localizes failure windows.

use crate::geometry::{compose, exp_se3, invert, log_se3, project_so3, Pose, Twist};
use crate::magnetic::{MagnetModel, Pose5};
use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use thiserror::Error;

pub const VISUAL: usize = 0;
pub const MAGNETIC: usize = 1;
pub const N_SENSORS: usize = 2;

/// Switch states per sensor: d_k = 1, so s is failure (0) or nominal (1).
/// The alpha vectors have one entry per state.
pub const N_SWITCH_STATES: usize = 2;

/// Additive offset in the Dirichlet kernel Dir(alpha * c + offset). Keeps
/// the kernel proper when an alpha component reaches zero while pulling
/// only weakly toward uniform; at offset 1 the uniform pull caps the
/// stationary nominal alpha near 0.87 under clean data, which understates
/// a healthy sensor.
const DIRICHLET_OFFSET: f64 = 0.25;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("fusion log io: {0}")]
    Io(#[from] std::io::Error),
    #[error("fusion log format: {0}")]
    Format(String),
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct FusionParams {
    pub n_particles: usize,
    /// Process noise, per axis, scaled by sqrt(dt): cm and rad.
    pub process_pos_std: f64,
    pub process_rot_std: f64,
    /// Nominal observation noise models.
    pub visual_pos_std: f64,
    pub visual_rot_std: f64,
    pub mag_pos_std: f64,
    pub mag_heading_std: f64,
    /// Dirichlet concentration of the alpha memory kernel, per sensor:
    /// alpha' ~ Dir(alpha * c + 1). Larger values keep alpha closer to its
    /// previous value (longer memory); an infinite value passes alpha
    /// through unchanged.
    pub alpha_memory: [f64; N_SENSORS],
    /// Initial per-sensor alpha (failure, nominal).
    pub init_alpha: [f64; N_SWITCH_STATES],
    /// Workspace box for the failure-state position density.
    pub workspace_min: Vector3<f64>,
    pub workspace_max: Vector3<f64>,
    /// Maps a particle pose to the 5-DoF magnetic observable.
    pub magnet: MagnetModel,
    /// Velocity buffer length per particle.
    pub twist_window: usize,
    /// Resample when ESS < ess_frac * n_particles.
    pub ess_frac: f64,
}

impl Default for FusionParams {
    fn default() -> Self {
        FusionParams {
            n_particles: 1000,
            process_pos_std: 0.3,
            process_rot_std: 0.06,
            visual_pos_std: 0.15,
            visual_rot_std: 0.02,
            mag_pos_std: 0.3,
            mag_heading_std: 0.05,
            alpha_memory: [200.0, 200.0],
            init_alpha: [0.5, 0.5],
            workspace_min: Vector3::new(-18.0, -18.0, -10.0),
            workspace_max: Vector3::new(18.0, 18.0, 8.0),
            magnet: MagnetModel::default(),
            twist_window: 50,
            ess_frac: 0.5,
        }
    }
}

impl FusionParams {
    fn workspace_volume(&self) -> f64 {
        let d = self.workspace_max - self.workspace_min;
        d.x * d.y * d.z
    }

    /// Constant observation density in the failure state: uniform over the
    /// workspace box and over orientations (Haar volume pi^2 for SO(3),
    /// sphere area 4*pi for headings). Independent of both the state and
    /// the observation.
    pub fn failure_density(&self, sensor: usize) -> f64 {
        let v = self.workspace_volume();
        match sensor {
            VISUAL => 1.0 / (v * std::f64::consts::PI.powi(2)),
            MAGNETIC => 1.0 / (v * 4.0 * std::f64::consts::PI),
            _ => unreachable!("unknown sensor"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FusionState {
    pub pose: Pose,
    /// Most recent per-step twists, oldest first.
    pub twists: Vec<Twist>,
}

#[derive(Debug, Clone)]
pub struct Particle {
    pub state: FusionState,
    pub switches: [usize; N_SENSORS],
    pub alpha: [[f64; N_SWITCH_STATES]; N_SENSORS],
    pub weight: f64,
}

/// One sensor's pose measurement for a filter step. The validity flag
/// comes from the producing module (tracker degeneracy, localizer
/// reliability); invalid observations are skipped outright, while
/// undetected failures are left for the switch mechanism to absorb.
#[derive(Debug, Clone)]
pub enum SensorObservation {
    Visual { pose: Pose, valid: bool },
    Magnetic { pose: Pose5, valid: bool },
}

impl SensorObservation {
    pub fn sensor(&self) -> usize {
        match self {
            SensorObservation::Visual { .. } => VISUAL,
            SensorObservation::Magnetic { .. } => MAGNETIC,
        }
    }

    pub fn valid(&self) -> bool {
        match self {
            SensorObservation::Visual { valid, .. } => *valid,
            SensorObservation::Magnetic { valid, .. } => *valid,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FusionOutput {
    /// MMSE estimate: weighted mean translation, chordal mean rotation.
    pub pose: Pose,
    /// Posterior P(s_k = j | data) per sensor, indexed [sensor][state].
    pub switch_posterior: [[f64; N_SWITCH_STATES]; N_SENSORS],
    /// MMSE alpha per sensor.
    pub alpha: [[f64; N_SWITCH_STATES]; N_SENSORS],
    pub ess: f64,
    pub resampled: bool,
    /// All likelihoods underflowed; weights were reset to uniform.
    pub reset: bool,
}

/// Predicts the body-frame twist for the next step from a particle's
/// recent motion.
pub trait MotionModel {
    fn predict_twist(&self, history: &[Twist], dt: f64) -> Twist;
}

/// Static prior: predicts no motion.
pub struct ZeroMotion;

impl MotionModel for ZeroMotion {
    fn predict_twist(&self, _history: &[Twist], _dt: f64) -> Twist {
        Twist::zero()
    }
}

/// Repeats the most recent per-step twist.
pub struct ConstantVelocity;

impl MotionModel for ConstantVelocity {
    fn predict_twist(&self, history: &[Twist], _dt: f64) -> Twist {
        history.last().copied().unwrap_or_else(Twist::zero)
    }
}

/// Externally supplied per-step increment, e.g. from a learned motion
/// model evaluated once on the fused trajectory rather than per particle.
pub struct FixedTwist(pub Twist);

impl MotionModel for FixedTwist {
    fn predict_twist(&self, _history: &[Twist], _dt: f64) -> Twist {
        self.0
    }
}

fn gaussian3(r: &Vector3<f64>, std: f64) -> f64 {
    let norm = (2.0 * std::f64::consts::PI).powf(1.5) * std.powi(3);
    (-r.norm_squared() / (2.0 * std * std)).exp() / norm
}

/// Observation density of `obs` given the particle's pose and its current
/// switch state for that sensor. Nominal: Gaussian in the pose residual.
/// Failure: the constant workspace density, independent of everything.
pub fn likelihood(obs: &SensorObservation, particle: &Particle, params: &FusionParams) -> f64 {
    let k = obs.sensor();
    if particle.switches[k] == 0 {
        return params.failure_density(k);
    }
    match obs {
        SensorObservation::Visual { pose, .. } => {
            let rel = compose(pose, &invert(&particle.state.pose));
            let Ok(xi) = log_se3(&rel.orthonormalized()) else {
                return 0.0; // half-turn residual: deep in the Gaussian tail
            };
            gaussian3(&xi.nu, params.visual_pos_std) * gaussian3(&xi.omega, params.visual_rot_std)
        }
        SensorObservation::Magnetic { pose, .. } => {
            let own = Pose5::from_pose(&particle.state.pose, &params.magnet);
            let dp = pose.position - own.position;
            let theta = own.heading_angle_to(pose);
            // heading error as an isotropic 2-DoF Gaussian in the tangent
            // plane of the direction sphere
            let s2 = params.mag_heading_std * params.mag_heading_std;
            let heading_density =
                (-theta * theta / (2.0 * s2)).exp() / (2.0 * std::f64::consts::PI * s2);
            gaussian3(&dp, params.mag_pos_std) * heading_density
        }
    }
}

/// Weighted MMSE of the per-particle alpha vectors.
pub fn estimate_alpha(particles: &[Particle]) -> [[f64; N_SWITCH_STATES]; N_SENSORS] {
    let mut out = [[0.0; N_SWITCH_STATES]; N_SENSORS];
    for p in particles {
        for k in 0..N_SENSORS {
            for j in 0..N_SWITCH_STATES {
                out[k][j] += p.weight * p.alpha[k][j];
            }
        }
    }
    out
}

pub struct SwitchingFilter {
    pub params: FusionParams,
    pub particles: Vec<Particle>,
    rng: ChaCha8Rng,
}

impl SwitchingFilter {
    pub fn new(params: FusionParams, init_pose: &Pose, seed: u64) -> SwitchingFilter {
        let n = params.n_particles;
        let particle = Particle {
            state: FusionState {
                pose: *init_pose,
                twists: Vec::new(),
            },
            switches: [1; N_SENSORS],
            alpha: [params.init_alpha; N_SENSORS],
            weight: 1.0 / n as f64,
        };
        SwitchingFilter {
            params,
            particles: vec![particle; n],
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Propagate poses by the motion model plus process noise, evolve each
    /// alpha through the Dirichlet memory kernel, and redraw switches from
    /// the evolved alpha. The switch draw depends on alpha only, never on
    /// the previous switch.
    pub fn predict(&mut self, model: &dyn MotionModel, dt: f64) {
        assert!(dt > 0.0, "dt must be positive");
        let pos = Normal::new(0.0, self.params.process_pos_std * dt.sqrt()).unwrap();
        let rot = Normal::new(0.0, self.params.process_rot_std * dt.sqrt()).unwrap();
        let window = self.params.twist_window;
        for p in &mut self.particles {
            let pred = model.predict_twist(&p.state.twists, dt);
            let xi = Twist::new(
                pred.omega
                    + Vector3::new(
                        rot.sample(&mut self.rng),
                        rot.sample(&mut self.rng),
                        rot.sample(&mut self.rng),
                    ),
                pred.nu
                    + Vector3::new(
                        pos.sample(&mut self.rng),
                        pos.sample(&mut self.rng),
                        pos.sample(&mut self.rng),
                    ),
            );
            p.state.pose = compose(&p.state.pose, &exp_se3(&xi)).orthonormalized();
            p.state.twists.push(xi);
            if p.state.twists.len() > window {
                let excess = p.state.twists.len() - window;
                p.state.twists.drain(..excess);
            }
            for k in 0..N_SENSORS {
                let c = self.params.alpha_memory[k];
                if c.is_finite() {
                    let g0 = Gamma::new(p.alpha[k][0] * c + DIRICHLET_OFFSET, 1.0)
                        .unwrap()
                        .sample(&mut self.rng);
                    let g1 = Gamma::new(p.alpha[k][1] * c + DIRICHLET_OFFSET, 1.0)
                        .unwrap()
                        .sample(&mut self.rng);
                    p.alpha[k] = [g0 / (g0 + g1), g1 / (g0 + g1)];
                }
                p.switches[k] = usize::from(self.rng.gen::<f64>() >= p.alpha[k][0]);
            }
        }
    }

    /// Reweight by the present valid observations, compute the MMSE
    /// outputs, and resample systematically when the effective sample size
    /// falls below the configured fraction.
    pub fn update(&mut self, observations: &[SensorObservation]) -> FusionOutput {
        for obs in observations.iter().filter(|o| o.valid()) {
            for p in &mut self.particles {
                p.weight *= likelihood(obs, p, &self.params);
            }
        }
        let total: f64 = self.particles.iter().map(|p| p.weight).sum();
        let n = self.particles.len();
        let mut reset = false;
        if total <= 0.0 || !total.is_finite() {
            for p in &mut self.particles {
                p.weight = 1.0 / n as f64;
            }
            reset = true;
        } else {
            for p in &mut self.particles {
                p.weight /= total;
            }
        }
        let ess = 1.0 / self.particles.iter().map(|p| p.weight * p.weight).sum::<f64>();
        let pose = self.mmse_pose();
        let alpha = estimate_alpha(&self.particles);
        let mut switch_posterior = [[0.0; N_SWITCH_STATES]; N_SENSORS];
        for p in &self.particles {
            for k in 0..N_SENSORS {
                switch_posterior[k][p.switches[k]] += p.weight;
            }
        }
        let mut resampled = false;
        if ess < self.params.ess_frac * n as f64 {
            self.resample_systematic();
            resampled = true;
        }
        FusionOutput {
            pose,
            switch_posterior,
            alpha,
            ess,
            resampled,
            reset,
        }
    }

    pub fn step(
        &mut self,
        model: &dyn MotionModel,
        dt: f64,
        observations: &[SensorObservation],
    ) -> FusionOutput {
        self.predict(model, dt);
        self.update(observations)
    }

    /// Weighted mean translation and chordal mean rotation (the weighted
    /// rotation sum projected back onto SO(3)).
    pub fn mmse_pose(&self) -> Pose {
        let mut t = Vector3::zeros();
        let mut r = Matrix3::zeros();
        for p in &self.particles {
            t += p.weight * p.state.pose.translation;
            r += p.weight * p.state.pose.rotation;
        }
        Pose::new(project_so3(&r), t)
    }

    fn resample_systematic(&mut self) {
        let n = self.particles.len();
        let u0 = self.rng.gen::<f64>() / n as f64;
        let mut out = Vec::with_capacity(n);
        let mut cum = self.particles[0].weight;
        let mut i = 0usize;
        for j in 0..n {
            let u = u0 + j as f64 / n as f64;
            while cum < u && i + 1 < n {
                i += 1;
                cum += self.particles[i].weight;
            }
            let mut p = self.particles[i].clone();
            p.weight = 1.0 / n as f64;
            out.push(p);
        }
        self.particles = out;
    }
}

/// One row of the per-step fusion log. The switch columns hold the
/// posterior probability of the nominal state; the alpha columns hold its
/// MMSE prior probability.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionLogRow {
    pub t: f64,
    pub pose: Pose,
    pub p_visual: f64,
    pub p_magnetic: f64,
    pub alpha_visual: f64,
    pub alpha_magnetic: f64,
    pub ess: f64,
}

impl FusionLogRow {
    pub fn from_output(t: f64, out: &FusionOutput) -> FusionLogRow {
        FusionLogRow {
            t,
            pose: out.pose,
            p_visual: out.switch_posterior[VISUAL][1],
            p_magnetic: out.switch_posterior[MAGNETIC][1],
            alpha_visual: out.alpha[VISUAL][1],
            alpha_magnetic: out.alpha[MAGNETIC][1],
            ess: out.ess,
        }
    }
}

pub fn write_fusion_log(path: &Path, rows: &[FusionLogRow]) -> Result<(), FusionError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        f,
        "t,tx,ty,tz,qx,qy,qz,qw,p_s_visual,p_s_magnetic,alpha_visual,alpha_magnetic,ess"
    )?;
    for r in rows {
        let q = r.pose.rotation_quaternion();
        writeln!(
            f,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.t,
            r.pose.translation.x,
            r.pose.translation.y,
            r.pose.translation.z,
            q.i,
            q.j,
            q.k,
            q.w,
            r.p_visual,
            r.p_magnetic,
            r.alpha_visual,
            r.alpha_magnetic,
            r.ess
        )?;
    }
    Ok(())
}

pub fn read_fusion_log(path: &Path) -> Result<Vec<FusionLogRow>, FusionError> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut rows = Vec::new();
    for (ln, line) in f.lines().enumerate() {
        let line = line?;
        if ln == 0 || line.trim().is_empty() {
            continue;
        }
        let v: Vec<f64> = line
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| FusionError::Format(format!("line {}: {e}", ln + 1)))?;
        if v.len() != 13 {
            return Err(FusionError::Format(format!(
                "line {}: expected 13 fields, got {}",
                ln + 1,
                v.len()
            )));
        }
        let q = nalgebra::UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
            v[7], v[4], v[5], v[6],
        ));
        rows.push(FusionLogRow {
            t: v[0],
            pose: Pose::from_quaternion(&q, Vector3::new(v[1], v[2], v[3])),
            p_visual: v[8],
            p_magnetic: v[9],
            alpha_visual: v[10],
            alpha_magnetic: v[11],
            ess: v[12],
        });
    }
    Ok(rows)
}
