//! Offline calibration of the rigid transform between the ring-magnet
//! frame and the camera frame, from paired relative-motion sequences:
//! the classic AX = XB problem solved with dual quaternions.
//!
//! The magnet is only localized in 5 DoF, so its poses are completed with
//! an assumed roll before motions are formed. A constant roll error is
//! unobservable: it folds into the recovered X without raising the
//! residual (covered by a test).

use crate::geometry::{compose, invert, Pose};
use crate::magnetic::Pose5;
use crate::trajectory::{TimedPose, TimedPose5};
use nalgebra::{DMatrix, Matrix3, Quaternion, Rotation3, Unit, UnitQuaternion, Vector3};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HandEyeError {
    #[error("need at least 2 motion pairs, got {0}")]
    TooFewPairs(usize),
    #[error("rotation axes too close to parallel (sufficiency {score:.2e})")]
    ParallelAxes { score: f64 },
}

/// Camera motion and magnet motion between the same two instants, each in
/// its own body frame.
#[derive(Debug, Clone)]
pub struct MotionPair {
    pub a: Pose,
    pub b: Pose,
}

#[derive(Debug, Clone)]
pub struct CalibrationResult {
    /// Magnet-to-camera transform X with A X = X B.
    pub x: Pose,
    /// Mean leftover motion of A X relative to X B across used pairs
    /// (rotation angle plus translation norm).
    pub residual: f64,
    /// Largest sine of the angle between any two rotation axes; near zero
    /// means the motions cannot determine X.
    pub sufficiency: f64,
    /// Pairs surviving the screw-congruence prefilter.
    pub pairs_used: usize,
}

/// Full pose from a 5-DoF pose: the rotation's z-axis equals the heading
/// and the roll about the heading is `assumed_roll`. Zero roll anchors
/// the frame's x-axis to global x projected onto the heading plane;
/// within 5 degrees of parallel the reference switches to global y.
pub fn complete_5dof(p5: &Pose5, assumed_roll: f64) -> Pose {
    let h = p5.heading;
    let reference = if h.dot(&Vector3::x()).abs() > 5.0_f64.to_radians().cos() {
        Vector3::y()
    } else {
        Vector3::x()
    };
    let x_axis = (reference - h * reference.dot(&h)).normalize();
    let y_axis = h.cross(&x_axis);
    let base = Matrix3::from_columns(&[x_axis, y_axis, h]);
    let roll = Rotation3::from_axis_angle(&Unit::new_normalize(h), assumed_roll).into_inner();
    Pose::new(crate::geometry::project_so3(&(roll * base)), p5.position)
}

/// Rotation quaternion with nonnegative scalar part plus the dual part
/// encoding translation: q' = (t * q) / 2.
fn dual_quat(pose: &Pose) -> (Quaternion<f64>, Quaternion<f64>) {
    let mut q = *UnitQuaternion::from_matrix(&pose.rotation).quaternion();
    if q.w < 0.0 {
        q = -q;
    }
    let t = Quaternion::new(
        0.0,
        pose.translation.x,
        pose.translation.y,
        pose.translation.z,
    );
    (q, t * q * 0.5)
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

fn vec_part(q: &Quaternion<f64>) -> Vector3<f64> {
    Vector3::new(q.i, q.j, q.k)
}

fn pair_angle(p: &Pose) -> f64 {
    p.rotation_angle()
}

/// Robust screw-congruence prefilter: a pair is kept when its rotation
/// angles agree within three robust standard deviations of the set (plus
/// a small floor so noiseless data keeps everything).
fn congruent_pairs(pairs: &[MotionPair]) -> Vec<&MotionPair> {
    let mut diffs: Vec<f64> = pairs
        .iter()
        .map(|p| (pair_angle(&p.a) - pair_angle(&p.b)).abs())
        .collect();
    let mut sorted = diffs.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    let mut dev: Vec<f64> = diffs.iter().map(|d| (d - median).abs()).collect();
    dev.sort_by(f64::total_cmp);
    let sigma = 1.4826 * dev[dev.len() / 2];
    let gate = 3.0 * sigma + 1e-6;
    pairs
        .iter()
        .zip(diffs.drain(..))
        .filter(|(_, d)| *d <= gate)
        .map(|(p, _)| p)
        .collect()
}

/// Solve A_i X = X B_i for all pairs jointly: stack each pair's 6x8
/// dual-quaternion constraint block, take the two-dimensional null space
/// by SVD, and combine the null vectors under the unit and orthogonality
/// constraints of a rigid dual quaternion.
pub fn solve_hand_eye(pairs: &[MotionPair]) -> Result<CalibrationResult, HandEyeError> {
    if pairs.len() < 2 {
        return Err(HandEyeError::TooFewPairs(pairs.len()));
    }
    let used = congruent_pairs(pairs);
    if used.len() < 2 {
        return Err(HandEyeError::TooFewPairs(used.len()));
    }

    let axes: Vec<Vector3<f64>> = used
        .iter()
        .filter(|p| pair_angle(&p.a) > 1e-8)
        .map(|p| {
            let q = dual_quat(&p.a).0;
            vec_part(&q).normalize()
        })
        .collect();
    let mut sufficiency = 0.0f64;
    for i in 0..axes.len() {
        for j in i + 1..axes.len() {
            sufficiency = sufficiency.max(axes[i].cross(&axes[j]).norm());
        }
    }
    if sufficiency < 0.02 {
        return Err(HandEyeError::ParallelAxes { score: sufficiency });
    }

    let mut t = DMatrix::<f64>::zeros(6 * used.len(), 8);
    for (i, pair) in used.iter().enumerate() {
        let (qa, qa_d) = dual_quat(&pair.a);
        let (qb, qb_d) = dual_quat(&pair.b);
        let (av, bv) = (vec_part(&qa), vec_part(&qb));
        let (adv, bdv) = (vec_part(&qa_d), vec_part(&qb_d));
        let s_real = skew(&(av + bv));
        let s_dual = skew(&(adv + bdv));
        let r = 6 * i;
        for row in 0..3 {
            t[(r + row, 0)] = (av - bv)[row];
            t[(r + 3 + row, 0)] = (adv - bdv)[row];
            t[(r + 3 + row, 4)] = (av - bv)[row];
            for c in 0..3 {
                t[(r + row, 1 + c)] = s_real[(row, c)];
                t[(r + 3 + row, 1 + c)] = s_dual[(row, c)];
                t[(r + 3 + row, 5 + c)] = s_real[(row, c)];
            }
        }
    }

    let svd = t.svd(false, true);
    let v_t = svd.v_t.expect("svd requested v");
    let v7 = v_t.row(6);
    let v8 = v_t.row(7);
    let u1 = Vector3::new(v7[1], v7[2], v7[3]);
    let u1s = v7[0];
    let w1 = Vector3::new(v7[5], v7[6], v7[7]);
    let w1s = v7[4];
    let u2 = Vector3::new(v8[1], v8[2], v8[3]);
    let u2s = v8[0];
    let w2 = Vector3::new(v8[5], v8[6], v8[7]);
    let w2s = v8[4];

    // lambda1 v7 + lambda2 v8 must have unit real part and orthogonal
    // real/dual parts; with s = lambda1/lambda2 the orthogonality becomes
    // a quadratic in s
    let dot4 = |xs: f64, x: &Vector3<f64>, ys: f64, y: &Vector3<f64>| xs * ys + x.dot(y);
    let a = dot4(u1s, &u1, w1s, &w1);
    let b = dot4(u1s, &u1, w2s, &w2) + dot4(u2s, &u2, w1s, &w1);
    let c = dot4(u2s, &u2, w2s, &w2);
    let roots: Vec<f64> = if a.abs() < 1e-14 {
        if b.abs() < 1e-14 {
            vec![0.0]
        } else {
            vec![-c / b]
        }
    } else {
        let disc = (b * b - 4.0 * a * c).max(0.0).sqrt();
        vec![(-b + disc) / (2.0 * a), (-b - disc) / (2.0 * a)]
    };
    let norm11 = dot4(u1s, &u1, u1s, &u1);
    let norm12 = dot4(u1s, &u1, u2s, &u2);
    let norm22 = dot4(u2s, &u2, u2s, &u2);
    let (s, value) = roots
        .into_iter()
        .map(|s| (s, s * s * norm11 + 2.0 * s * norm12 + norm22))
        .max_by(|x, y| x.1.total_cmp(&y.1))
        .expect("at least one root");
    let lambda2 = 1.0 / value.sqrt();
    let lambda1 = s * lambda2;

    let mut q = Quaternion::new(
        lambda1 * u1s + lambda2 * u2s,
        lambda1 * u1.x + lambda2 * u2.x,
        lambda1 * u1.y + lambda2 * u2.y,
        lambda1 * u1.z + lambda2 * u2.z,
    );
    let mut qd = Quaternion::new(
        lambda1 * w1s + lambda2 * w2s,
        lambda1 * w1.x + lambda2 * w2.x,
        lambda1 * w1.y + lambda2 * w2.y,
        lambda1 * w1.z + lambda2 * w2.z,
    );
    if q.w < 0.0 {
        q = -q;
        qd = -qd;
    }
    let rotation = UnitQuaternion::new_normalize(q).to_rotation_matrix().into_inner();
    let translation = vec_part(&(qd * q.conjugate() * 2.0));
    let x = Pose::new(crate::geometry::project_so3(&rotation), translation);

    let residual = used
        .iter()
        .map(|p| {
            let lhs = compose(&p.a, &x);
            let rhs = compose(&x, &p.b);
            let d = compose(&lhs, &invert(&rhs));
            d.rotation_angle() + d.translation.norm()
        })
        .sum::<f64>()
        / used.len() as f64;

    Ok(CalibrationResult {
        x,
        residual,
        sufficiency,
        pairs_used: used.len(),
    })
}

/// Build motion pairs from a camera trajectory and a magnet 5-DoF
/// trajectory: magnet poses are completed with `assumed_roll`, samples
/// matched by timestamp within `max_dt`, and consecutive matched instants
/// turned into relative motions. Pairs rotating less than `min_angle`
/// are dropped as uninformative.
pub fn motion_pairs(
    cam: &[TimedPose],
    mag: &[TimedPose5],
    assumed_roll: f64,
    max_dt: f64,
    min_angle: f64,
) -> Vec<MotionPair> {
    let mut matched: Vec<(Pose, Pose)> = Vec::new();
    let mut j = 0usize;
    for c in cam {
        while j + 1 < mag.len()
            && (mag[j + 1].timestamp - c.timestamp).abs() < (mag[j].timestamp - c.timestamp).abs()
        {
            j += 1;
        }
        if j < mag.len() && (mag[j].timestamp - c.timestamp).abs() <= max_dt {
            matched.push((c.pose, complete_5dof(&mag[j].pose, assumed_roll)));
        }
    }
    matched
        .windows(2)
        .map(|w| MotionPair {
            a: compose(&invert(&w[0].0), &w[1].0),
            b: compose(&invert(&w[0].1), &w[1].1),
        })
        .filter(|p| pair_angle(&p.a) >= min_angle && pair_angle(&p.b) >= min_angle)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{exp_se3, Twist};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_rotation(rng: &mut ChaCha8Rng, max_angle: f64) -> Matrix3<f64> {
        let axis = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let angle = rng.gen_range(0.2..max_angle);
        Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle).into_inner()
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
        Pose::new(
            random_rotation(rng, 1.2),
            Vector3::new(
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
            ),
        )
    }

    /// A_i = X B_i X^-1 by construction.
    fn synthetic_pairs(x: &Pose, n: usize, seed: u64) -> Vec<MotionPair> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let b = random_pose(&mut rng);
                let a = compose(&compose(x, &b), &invert(x));
                MotionPair { a, b }
            })
            .collect()
    }

    #[test]
    fn heading_z_with_zero_roll_is_identity() {
        let p5 = Pose5::new(Vector3::new(1.0, 2.0, 3.0), Vector3::z());
        let pose = complete_5dof(&p5, 0.0);
        assert!((pose.rotation - Matrix3::identity()).norm() < 1e-12);
        assert_eq!(pose.translation, Vector3::new(1.0, 2.0, 3.0));
    }

    #[test]
    fn heading_z_with_quarter_roll_is_a_z_rotation() {
        let p5 = Pose5::new(Vector3::zeros(), Vector3::z());
        let pose = complete_5dof(&p5, std::f64::consts::FRAC_PI_2);
        let expected =
            Rotation3::from_axis_angle(&Vector3::z_axis(), std::f64::consts::FRAC_PI_2)
                .into_inner();
        assert!((pose.rotation - expected).norm() < 1e-12);
    }

    #[test]
    fn roll_values_differ_by_a_rotation_about_the_heading() {
        let heading = Vector3::new(0.3, -0.5, 0.8).normalize();
        let p5 = Pose5::new(Vector3::zeros(), heading);
        let r1 = complete_5dof(&p5, 0.4).rotation;
        let r2 = complete_5dof(&p5, 1.1).rotation;
        let expected =
            Rotation3::from_axis_angle(&Unit::new_normalize(heading), 0.7).into_inner();
        assert!((r2 * r1.transpose() - expected).norm() < 1e-10);
    }

    #[test]
    fn completion_always_points_z_along_the_heading() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let heading = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            )
            .normalize();
            let pose = complete_5dof(&Pose5::new(Vector3::zeros(), heading), 0.3);
            assert!((pose.rotation.column(2) - heading).norm() < 1e-10);
            assert!((pose.rotation * pose.rotation.transpose() - Matrix3::identity()).norm() < 1e-10);
        }
        // near-parallel headings use the switched reference and stay sane
        let near_x = Vector3::new(1.0, 0.01, 0.0).normalize();
        let pose = complete_5dof(&Pose5::new(Vector3::zeros(), near_x), 0.0);
        assert!((pose.rotation.column(2) - near_x).norm() < 1e-10);
    }

    #[test]
    fn synthetic_pairs_recover_the_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_pose(&mut rng);
        let pairs = synthetic_pairs(&x, 5, 11);
        let result = solve_hand_eye(&pairs).unwrap();
        assert!(
            (result.x.rotation - x.rotation).norm() < 1e-8,
            "rotation off by {}",
            (result.x.rotation - x.rotation).norm()
        );
        assert!((result.x.translation - x.translation).norm() < 1e-8);
        // acos near 1 limits the reported angle of an exact rotation to ~1e-8
        assert!(result.residual < 1e-7);
        assert_eq!(result.pairs_used, 5);
    }

    #[test]
    fn single_axis_motions_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_pose(&mut rng);
        let pairs: Vec<MotionPair> = (0..5)
            .map(|i| {
                let b = Pose::new(
                    Rotation3::from_axis_angle(&Vector3::z_axis(), 0.3 + 0.1 * i as f64)
                        .into_inner(),
                    Vector3::new(0.2 * i as f64, 0.1, -0.3),
                );
                let a = compose(&compose(&x, &b), &invert(&x));
                MotionPair { a, b }
            })
            .collect();
        match solve_hand_eye(&pairs) {
            Err(HandEyeError::ParallelAxes { score }) => assert!(score < 0.02),
            other => panic!("expected parallel-axes error, got {other:?}"),
        }
    }

    #[test]
    fn fewer_than_two_pairs_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_pose(&mut rng);
        let pairs = synthetic_pairs(&x, 1, 2);
        assert!(matches!(
            solve_hand_eye(&pairs),
            Err(HandEyeError::TooFewPairs(1))
        ));
    }

    #[test]
    fn solution_ignores_pair_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = random_pose(&mut rng);
        let pairs = synthetic_pairs(&x, 6, 5);
        let forward = solve_hand_eye(&pairs).unwrap();
        let mut reversed = pairs.clone();
        reversed.reverse();
        let backward = solve_hand_eye(&reversed).unwrap();
        assert!((forward.x.rotation - backward.x.rotation).norm() < 1e-10);
        assert!((forward.x.translation - backward.x.translation).norm() < 1e-10);
    }

    #[test]
    fn residual_grows_with_rotation_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = random_pose(&mut rng);
        let mut last = -1.0;
        for noise in [0.0, 3e-4, 3e-3, 3e-2] {
            let mut total = 0.0;
            for seed in 0..3u64 {
                let mut pairs = synthetic_pairs(&x, 8, 40 + seed);
                let mut nrng = ChaCha8Rng::seed_from_u64(100 + seed);
                for p in &mut pairs {
                    let twist = Twist::new(
                        Vector3::new(
                            nrng.gen_range(-1.0..1.0),
                            nrng.gen_range(-1.0..1.0),
                            nrng.gen_range(-1.0..1.0),
                        ) * noise,
                        Vector3::zeros(),
                    );
                    p.a = compose(&p.a, &exp_se3(&twist));
                }
                total += solve_hand_eye(&pairs).unwrap().residual;
            }
            assert!(
                total > last,
                "residual should grow with noise: {last} -> {total} at {noise}"
            );
            last = total;
        }
    }

    /// A constant roll error in the completed magnet poses conjugates B
    /// and is absorbed into X: the solver cannot see it, and the residual
    /// stays at the noise floor.
    #[test]
    fn constant_roll_offset_is_absorbed_into_x() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let x = random_pose(&mut rng);
        let pairs = synthetic_pairs(&x, 6, 17);
        let delta = 0.35;
        let r_delta = Pose::new(
            Rotation3::from_axis_angle(&Vector3::z_axis(), delta).into_inner(),
            Vector3::zeros(),
        );
        let offset: Vec<MotionPair> = pairs
            .iter()
            .map(|p| MotionPair {
                a: p.a,
                b: compose(&compose(&r_delta, &p.b), &invert(&r_delta)),
            })
            .collect();
        let result = solve_hand_eye(&offset).unwrap();
        let expected = compose(&x, &invert(&r_delta));
        assert!((result.x.rotation - expected.rotation).norm() < 1e-8);
        assert!((result.x.translation - expected.translation).norm() < 1e-8);
        assert!(
            result.residual < 1e-7,
            "offset must not raise the residual: {:.3e}",
            result.residual
        );
    }

    #[test]
    fn congruence_prefilter_drops_a_corrupted_pair() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let x = random_pose(&mut rng);
        let mut pairs = synthetic_pairs(&x, 7, 23);
        let bad = Rotation3::from_axis_angle(&Vector3::x_axis(), 0.3).into_inner();
        pairs[3].b = Pose::new(bad * pairs[3].b.rotation, pairs[3].b.translation);
        let result = solve_hand_eye(&pairs).unwrap();
        assert_eq!(result.pairs_used, 6, "the incongruent pair must be dropped");
        assert!((result.x.rotation - x.rotation).norm() < 1e-6);
        assert!((result.x.translation - x.translation).norm() < 1e-6);
    }

    #[test]
    fn trajectory_files_calibrate_end_to_end() {
        use crate::trajectory::{
            write_heading_trajectory, write_trajectory, TimedPose, TimedPose5,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let x = random_pose(&mut rng);
        let mut cam = Vec::new();
        let mut mag = Vec::new();
        for i in 0..12 {
            let heading = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(0.2..1.0),
            )
            .normalize();
            let position = Vector3::new(
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
            );
            let p5 = Pose5::new(position, heading);
            // magnet pose exactly matches what the solver's completion
            // will reconstruct, so only the rig transform is unknown
            let m = complete_5dof(&p5, 0.0);
            let c = compose(&m, &invert(&x));
            let t = i as f64 * 0.5;
            mag.push(TimedPose5 {
                timestamp: t,
                pose: p5,
            });
            cam.push(TimedPose {
                timestamp: t,
                pose: c,
            });
        }
        let dir = tempfile::tempdir().unwrap();
        let cam_path = dir.path().join("camera.txt");
        let mag_path = dir.path().join("magnet.txt");
        write_trajectory(&cam_path, &cam).unwrap();
        write_heading_trajectory(&mag_path, &mag).unwrap();
        let cam_back = crate::trajectory::read_trajectory(&cam_path).unwrap();
        let mag_back = crate::trajectory::read_heading_trajectory(&mag_path).unwrap();
        let pairs = motion_pairs(&cam_back, &mag_back, 0.0, 0.05, 0.02);
        assert!(pairs.len() >= 5, "only {} informative pairs", pairs.len());
        let result = solve_hand_eye(&pairs).unwrap();
        let err_rot = (result.x.rotation - x.rotation).norm();
        let err_t = (result.x.translation - x.translation).norm();
        assert!(
            err_rot < 1e-6 && err_t < 1e-6,
            "rotation err {err_rot:.2e}, translation err {err_t:.2e}"
        );
    }
}
