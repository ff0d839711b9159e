//! Build a surfel map from a short rendered sweep, render the model back at
//! a camera pose, and deform it with a coarse node graph. Writes the map as
//! an ASCII PLY.
//!
//! Usage: cargo run --example build_surfel_map [out_dir]

use capsule_slam::geometry::{compose, exp_se3, Twist};
use capsule_slam::sim::{generate_scene, render_frame};
use capsule_slam::surfel::{
    build_graph, deform, integrate_frame, predict_view, save_map_ply, SurfelMap, SurfelMapParams,
};
use capsule_slam::tracker::Frame;
use capsule_slam::{CameraIntrinsics, Pose};
use nalgebra::Vector3;
use std::path::PathBuf;

fn main() -> anyhow::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("build_surfel_map"));
    std::fs::create_dir_all(&out)?;

    let scene = generate_scene(17);
    let k = CameraIntrinsics::new(70.0, 70.0, 79.5, 59.5, 160, 120);
    let step = exp_se3(&Twist::new(
        Vector3::new(0.0, 0.015, 0.0),
        Vector3::new(0.12, 0.0, 0.0),
    ));

    let mut map = SurfelMap::new(SurfelMapParams::default());
    let mut pose = Pose::identity();
    for i in 0..8 {
        let (rgb, depth) = render_frame(&scene, &k, &pose);
        let frame = Frame::new(i as f64 * 0.2, None, rgb.luminance(), depth, &k);
        integrate_frame(&mut map, &frame, &pose, &k);
        println!(
            "frame {i}: {} surfels, total confidence {:.0}",
            map.surfels.len(),
            map.total_weight()
        );
        pose = compose(&pose, &step);
    }

    // Repeated observations of the same patch fuse instead of duplicating:
    // weights add, positions average, variance shrinks.
    let counts = map.partition_counts();
    println!("active {} / inactive {}", counts.active, counts.inactive);

    let view = predict_view(&map, &Pose::identity(), &k);
    println!(
        "rendered model at the start pose: {} of {} pixels filled",
        view.filled,
        k.width * k.height
    );

    // A deformation graph with identity node transforms leaves every surfel
    // exactly where it was; loop closure pushes non-identity transforms in.
    let graph = build_graph(&map, 2.0);
    let before: Vec<_> = map.surfels.iter().map(|s| s.position).collect();
    deform(&mut map, &graph);
    let moved = map
        .surfels
        .iter()
        .zip(&before)
        .map(|(s, b)| (s.position - b).norm())
        .fold(0.0, f64::max);
    println!(
        "identity deformation over {} nodes moved surfels by at most {moved:.2e} cm",
        graph.nodes.len()
    );

    let ply = out.join("map.ply");
    save_map_ply(&ply, &map)?;
    println!("wrote {}", ply.display());
    Ok(())
}
