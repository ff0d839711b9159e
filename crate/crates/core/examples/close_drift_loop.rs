//! Loop closure on a drifted revisit. The camera maps a patch of the cavity,
//! wanders long enough for that geometry to go inactive, then comes back
//! carrying 1 cm of accumulated pose drift. Integration duplicates the wall
//! into two offset sheets; closing the loop deforms the drifted sheet back
//! onto the old one.

use capsule_slam::geometry::compose;
use capsule_slam::sim::{generate_scene, render_frame};
use capsule_slam::surfel::{close_loop, integrate_frame, CloseLoopParams, SurfelMap, SurfelMapParams};
use capsule_slam::tracker::Frame;
use capsule_slam::{CameraIntrinsics, DepthImage, GrayImage, Pose};
use nalgebra::Vector3;

fn median_gap(from: &[Vector3<f64>], to: &[Vector3<f64>]) -> f64 {
    let mut gaps: Vec<f64> = from
        .iter()
        .step_by(7)
        .map(|p| {
            to.iter()
                .map(|q| (p - q).norm())
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    gaps.sort_by(f64::total_cmp);
    gaps[gaps.len() / 2]
}

fn main() {
    let scene = generate_scene(31);
    let k = CameraIntrinsics::new(70.0, 70.0, 79.5, 59.5, 160, 120);
    let mut map = SurfelMap::new(SurfelMapParams::default());

    let (rgb, depth) = render_frame(&scene, &k, &Pose::identity());
    let frame = Frame::new(0.0, None, rgb.luminance(), depth, &k);
    integrate_frame(&mut map, &frame, &Pose::identity(), &k);
    let sheet1_len = map.surfels.len();
    println!("first visit integrated {sheet1_len} surfels");

    // Elsewhere for longer than the inactivity horizon: integrate empty
    // frames to advance the map clock without touching the geometry.
    let blank = Frame::new(
        0.0,
        None,
        GrayImage::new(k.width, k.height),
        DepthImage::new_invalid(k.width, k.height),
        &k,
    );
    for _ in 0..map.params.inactive_after + 1 {
        integrate_frame(&mut map, &blank, &Pose::identity(), &k);
    }
    let counts = map.partition_counts();
    println!("after the detour: {} active, {} inactive", counts.active, counts.inactive);

    // Revisit the exact same viewpoint, but the tracker believes the camera
    // sits 1 cm behind where it really is.
    let drift = Pose::from_translation(Vector3::new(0.0, 0.0, -1.0));
    let believed = compose(&Pose::identity(), &drift);
    integrate_frame(&mut map, &frame, &believed, &k);

    let sheet1: Vec<Vector3<f64>> = map.surfels[..sheet1_len].iter().map(|s| s.position).collect();
    let sheet2: Vec<Vector3<f64>> = map.surfels[sheet1_len..].iter().map(|s| s.position).collect();
    println!(
        "revisit duplicated the wall: {} new surfels, median sheet gap {:.3} cm",
        sheet2.len(),
        median_gap(&sheet2, &sheet1)
    );

    let params = CloseLoopParams {
        node_spacing: 0.8,
        constraint_stride: 5,
        ..Default::default()
    };
    let outcome = close_loop(&mut map, &frame, &believed, &k, &params);
    println!(
        "closure applied: {} ({} constraints, median displacement {:.3} cm)",
        outcome.applied, outcome.constraints, outcome.median_displacement
    );

    let sheet1: Vec<Vector3<f64>> = map.surfels[..sheet1_len].iter().map(|s| s.position).collect();
    let sheet2: Vec<Vector3<f64>> = map.surfels[sheet1_len..].iter().map(|s| s.position).collect();
    println!("median sheet gap after closure {:.3} cm", median_gap(&sheet2, &sheet1));
}
