//! Train the LSTM motion prior on a sinusoidal trajectory and race it
//! against the constant-velocity baseline on held-out windows. A one-step
//! extrapolator always lags a sinusoid; the network learns the phase.

use capsule_slam::geometry::{compose, exp_se3, Pose, Twist};
use capsule_slam::motion::{
    lstm_train, make_training_set, predict_next_constant, predict_next_lstm, LstmNetwork,
    TrainConfig,
};
use capsule_slam::trajectory::TimedPose;
use nalgebra::Vector3;

fn sinusoid_track(n: usize, period: usize, amplitude: f64) -> Vec<TimedPose> {
    let mut poses = vec![TimedPose { timestamp: 0.0, pose: Pose::identity() }];
    for i in 1..n {
        let phase = 2.0 * std::f64::consts::PI * (i - 1) as f64 / period as f64;
        let xi = Twist::new(
            Vector3::new(0.0, 0.0, 0.2 * amplitude * (phase * 0.5).sin()),
            Vector3::new(amplitude * phase.sin(), 0.0, 0.0),
        );
        poses.push(TimedPose {
            timestamp: i as f64 * 0.1,
            pose: compose(&poses[i - 1].pose, &exp_se3(&xi)),
        });
    }
    poses
}

fn main() -> anyhow::Result<()> {
    let window = 8;
    let track = sinusoid_track(420, 24, 0.4);
    let samples = make_training_set(&track[..320], window, 2)?;
    println!("training on {} windows of {} steps", samples.len(), window);

    let mut net = LstmNetwork::for_twists(16, 11);
    let cfg = TrainConfig {
        epochs: 3000,
        learning_rate: 1.0,
        dropout: 0.0,
        patience: 400,
        seed: 5,
        ..Default::default()
    };
    let report = lstm_train(&mut net, &samples, &cfg)?;
    let best = report.losses[report.best_epoch].1;
    println!(
        "trained {} params for {} epochs, best val loss {:.3e} at epoch {}",
        net.n_params(),
        report.losses.len(),
        best,
        report.best_epoch
    );

    // Held-out tail the training never saw.
    let mut err_lstm = 0.0;
    let mut err_base = 0.0;
    let mut count = 0;
    let mut i = 330;
    while i + window < track.len() {
        let w = &track[i..i + window];
        let truth = track[i + window].pose.translation;
        let lstm = predict_next_lstm(&net, w)?.translation;
        let base = predict_next_constant(w)?.translation;
        err_lstm += (lstm - truth).norm_squared();
        err_base += (base - truth).norm_squared();
        count += 1;
        i += 3;
    }
    println!("held-out next-pose RMSE over {count} windows:");
    println!("  constant velocity {:.5} cm", (err_base / count as f64).sqrt());
    println!("  trained LSTM      {:.5} cm", (err_lstm / count as f64).sqrt());
    Ok(())
}
