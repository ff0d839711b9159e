//! Multiscale vessel enhancement on a rendered endoscopic frame. Writes the
//! raw luminance and the enhanced image side by side as PGM files.
//!
//! Usage: cargo run --example enhance_vessels [out_dir]

use capsule_slam::image::write_pgm8;
use capsule_slam::sim::{generate_scene, render_frame};
use capsule_slam::vessel::{enhance_frame, vesselness, VesselnessParams};
use capsule_slam::{CameraIntrinsics, GrayImage, Pose};
use std::path::PathBuf;

fn main() -> anyhow::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("enhance_vessels"));
    std::fs::create_dir_all(&out)?;

    let scene = generate_scene(7);
    let k = CameraIntrinsics::new(140.0, 140.0, 159.5, 119.5, 320, 240);
    let (rgb, _) = render_frame(&scene, &k, &Pose::identity());
    let raw = rgb.luminance();

    let params = VesselnessParams::default();
    let enhanced = enhance_frame(&rgb, &params)?;
    let response = vesselness(&raw, &params)?;

    let (lo, hi) = response.min_max();
    let mean = response.data.iter().sum::<f64>() / response.data.len() as f64;
    println!("vesselness response over {}x{}:", response.width, response.height);
    println!("  min {lo:.4}  max {hi:.4}  mean {mean:.4}");
    println!("  scales {:?} px", params.scales);

    // A flat image carries no ridges at any scale: the response is exactly 0.
    let flat = GrayImage::from_fn(64, 64, |_, _| 0.5);
    let flat_resp = vesselness(&flat, &params)?;
    let flat_max = flat_resp.data.iter().cloned().fold(0.0, f64::max);
    println!("  flat-image response max {flat_max:.1e}");

    write_pgm8(&out.join("raw.pgm"), &raw)?;
    write_pgm8(&out.join("enhanced.pgm"), &enhanced)?;
    println!("wrote {}", out.join("raw.pgm").display());
    println!("wrote {}", out.join("enhanced.pgm").display());
    Ok(())
}
