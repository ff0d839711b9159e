//! Pose algebra in one sitting: exp/log round trips, composition, relative
//! twists, and the dual-quaternion form used by the hand-eye solver.

use capsule_slam::geometry::{
    compose, dq_to_pose, exp_se3, invert, log_se3, pose_to_dq, relative_twist, Twist,
};
use nalgebra::Vector3;

fn main() {
    // A twist is (omega, nu): rotate 0.4 rad about a tilted axis while
    // translating. exp maps it to a rigid pose, log maps back.
    let xi = Twist::new(
        Vector3::new(0.3, -0.2, 0.1),
        Vector3::new(1.0, 0.5, -0.25),
    );
    let pose = exp_se3(&xi);
    let back = log_se3(&pose).unwrap();
    println!("twist            {:?}", xi.to_vector().as_slice());
    println!("round trip       {:?}", back.to_vector().as_slice());
    println!(
        "round trip error {:.2e}",
        (xi.to_vector() - back.to_vector()).norm()
    );

    // Group laws: compose with the inverse and you are back at identity.
    let id = compose(&pose, &invert(&pose));
    println!(
        "pose * pose^-1   rotation angle {:.2e}, translation {:.2e}",
        id.rotation_angle(),
        id.translation.norm()
    );

    // relative_twist(a, b) is the body-frame motion taking a to b; useful
    // for turning a trajectory into velocity-like features.
    let step = exp_se3(&Twist::new(
        Vector3::new(0.0, 0.0, 0.05),
        Vector3::new(0.2, 0.0, 0.0),
    ));
    let next = compose(&pose, &step);
    let rel = relative_twist(&pose, &next).unwrap();
    println!("recovered step   {:?}", rel.to_vector().as_slice());

    // The same pose as a unit dual quaternion and back.
    let dq = pose_to_dq(&pose);
    let again = dq_to_pose(&dq).unwrap();
    let drift = compose(&invert(&pose), &again);
    println!(
        "dual quaternion  round trip rotation {:.2e}, translation {:.2e}",
        drift.rotation_angle(),
        drift.translation.norm()
    );
}
