//! 5-DoF magnetic localization against the Hall-sensor array, and how its
//! accuracy degrades as the capsule moves away from the array plane.

use capsule_slam::magnetic::{
    localize_5dof, simulate_reading, subtract_actuator, ActuatorModel, MagnetModel, Pose5,
    SensorArray,
};
use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let magnet = MagnetModel::default();
    let array = SensorArray::default_8x8();
    let actuators = ActuatorModel::default_3x3();
    let currents = vec![0.4; actuators.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(42);

    // The array sits on the z = 10 plane; standoff is the gap below it.
    println!("standoff  position err   heading err   residual");
    for standoff in [5.0, 10.0, 15.0] {
        let truth = Pose5::new(
            Vector3::new(2.0, -1.5, 10.0 - standoff),
            Vector3::new(0.3, 0.2, 0.93).normalize(),
        );

        let mut pos_se = 0.0;
        let mut head_se = 0.0;
        let mut residual = 0.0;
        let trials = 60;
        for _ in 0..trials {
            let reading =
                simulate_reading(&truth, &magnet, &array, &actuators, &currents, 0.0, &mut rng)?;
            let corrected = subtract_actuator(&reading, &array, &actuators)?;
            let init = Pose5::new(
                truth.position + Vector3::new(0.8, -0.8, 0.8),
                Vector3::new(0.0, 0.0, 1.0),
            );
            let fix = localize_5dof(&corrected, &array, &magnet, &init)?;
            pos_se += (fix.pose.position - truth.position).norm_squared();
            head_se += fix.pose.heading_angle_to(&truth).powi(2);
            residual += fix.residual_norm;
        }
        println!(
            "{:5.1} cm  {:8.4} cm   {:8.4} deg  {:9.4}",
            standoff,
            (pos_se / trials as f64).sqrt(),
            (head_se / trials as f64).sqrt().to_degrees(),
            residual / trials as f64
        );
    }
    println!();
    println!("the field falls off as 1/r^3, so the same sensor noise buys");
    println!("less constraint at every added centimeter of standoff");
    Ok(())
}
