//! Dual-quaternion hand-eye calibration: recover the fixed transform between
//! the camera frame and the magnet frame from paired relative motions, then
//! show the degenerate case every AX = XB solver must refuse.

use capsule_slam::geometry::{compose, exp_se3, invert, Twist};
use capsule_slam::handeye::{solve_hand_eye, HandEyeError, MotionPair};
use capsule_slam::Pose;
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_motion(rng: &mut impl Rng) -> Pose {
    let axis = Vector3::new(
        rng.gen::<f64>() - 0.5,
        rng.gen::<f64>() - 0.5,
        rng.gen::<f64>() - 0.5,
    )
    .normalize();
    exp_se3(&Twist::new(
        axis * (0.3 + 0.5 * rng.gen::<f64>()),
        Vector3::new(rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()) * 2.0,
    ))
}

fn main() {
    // The unknown rig transform X: camera motions A and magnet motions B
    // always satisfy A X = X B.
    let x_true = exp_se3(&Twist::new(
        Vector3::new(0.2, -0.4, 0.3),
        Vector3::new(1.2, 0.4, -0.8),
    ));

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pairs: Vec<MotionPair> = (0..6)
        .map(|_| {
            let a = random_motion(&mut rng);
            let b = compose(&invert(&x_true), &compose(&a, &x_true));
            MotionPair { a, b }
        })
        .collect();

    let cal = solve_hand_eye(&pairs).unwrap();
    let err = compose(&invert(&cal.x), &x_true);
    println!("pairs used          {}", cal.pairs_used);
    println!("axis spread score   {:.3}", cal.sufficiency);
    println!("mean residual       {:.2e}", cal.residual);
    println!(
        "recovery error      {:.2e} rad, {:.2e} cm",
        err.rotation_angle(),
        err.translation.norm()
    );

    // All rotations about one axis: the component of X along that axis is
    // unobservable and the solver reports the degeneracy instead of
    // returning a confident wrong answer.
    let single_axis: Vec<MotionPair> = (0..6)
        .map(|i| {
            let a = exp_se3(&Twist::new(
                Vector3::new(0.0, 0.0, 0.3 + 0.1 * i as f64),
                Vector3::new(0.5, 0.0, 0.2),
            ));
            let b = compose(&invert(&x_true), &compose(&a, &x_true));
            MotionPair { a, b }
        })
        .collect();
    match solve_hand_eye(&single_axis) {
        Err(HandEyeError::ParallelAxes { score }) => {
            println!("single-axis motions rejected (axis spread {score:.2e})");
        }
        other => println!("unexpected outcome: {other:?}"),
    }
}
