//! Pinhole camera model, depth maps, back-projection and normal estimation.
//!
//! Depth is the z-coordinate (optical-axis component) of the point on the
//! pixel's viewing ray, in centimeters. The camera frame is right-handed
//! with +z forward; visible points have z > 0 and the camera center sits at
//! the origin.

use crate::image::{read_pgm, write_pgm16, ImageError, PgmData};
use nalgebra::Vector3;
use std::fs;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Self {
        assert!(fx > 0.0 && fy > 0.0, "focal lengths must be positive");
        assert!(
            cx > 0.0 && cx < width as f64 && cy > 0.0 && cy < height as f64,
            "principal point must lie inside the image"
        );
        CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        }
    }

    /// Intrinsics for a half-resolution pyramid level.
    pub fn half(&self) -> CameraIntrinsics {
        CameraIntrinsics {
            fx: self.fx * 0.5,
            fy: self.fy * 0.5,
            cx: (self.cx + 0.5) * 0.5 - 0.5,
            cy: (self.cy + 0.5) * 0.5 - 0.5,
            width: self.width / 2,
            height: self.height / 2,
        }
    }

    /// Pixel coordinates of a camera-frame point; `None` behind the camera.
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64)> {
        if p.z <= 0.0 {
            return None;
        }
        Some((
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        ))
    }

    /// Camera-frame point on the ray through pixel (x, y) at depth z.
    pub fn backproject(&self, x: f64, y: f64, z: f64) -> Vector3<f64> {
        Vector3::new(
            (x - self.cx) / self.fx * z,
            (y - self.cy) / self.fy * z,
            z,
        )
    }

    /// Unit direction of the viewing ray through pixel (x, y).
    pub fn ray_direction(&self, x: f64, y: f64) -> Vector3<f64> {
        Vector3::new((x - self.cx) / self.fx, (y - self.cy) / self.fy, 1.0).normalize()
    }
}

/// Per-pixel depth (cm) with a validity mask. Invalid pixels carry no
/// meaningful depth value.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
    pub valid: Vec<bool>,
}

impl DepthImage {
    pub fn new_invalid(width: usize, height: usize) -> Self {
        DepthImage {
            width,
            height,
            depth: vec![0.0; width * height],
            valid: vec![false; width * height],
        }
    }

    pub fn new_constant(width: usize, height: usize, depth: f64) -> Self {
        assert!(depth > 0.0 && depth.is_finite());
        DepthImage {
            width,
            height,
            depth: vec![depth; width * height],
            valid: vec![true; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> Option<f64>) -> Self {
        let mut depth = Vec::with_capacity(width * height);
        let mut valid = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                match f(x, y) {
                    Some(d) => {
                        debug_assert!(d > 0.0 && d.is_finite());
                        depth.push(d);
                        valid.push(true);
                    }
                    None => {
                        depth.push(0.0);
                        valid.push(false);
                    }
                }
            }
        }
        DepthImage {
            width,
            height,
            depth,
            valid,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        let i = y * self.width + x;
        if self.valid[i] {
            Some(self.depth[i])
        } else {
            None
        }
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, d: f64) {
        let i = y * self.width + x;
        self.depth[i] = d;
        self.valid[i] = true;
    }

    #[inline]
    pub fn invalidate(&mut self, x: usize, y: usize) {
        self.valid[y * self.width + x] = false;
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn mean_depth(&self) -> Option<f64> {
        let n = self.valid_count();
        if n == 0 {
            return None;
        }
        let s: f64 = self
            .depth
            .iter()
            .zip(&self.valid)
            .filter(|(_, &v)| v)
            .map(|(&d, _)| d)
            .sum();
        Some(s / n as f64)
    }

    /// Half-resolution downsample averaging valid depths in each 2x2 block.
    pub fn downsample_half(&self) -> DepthImage {
        let w = self.width / 2;
        let h = self.height / 2;
        DepthImage::from_fn(w, h, |x, y| {
            let mut sum = 0.0;
            let mut n = 0;
            for dy in 0..2 {
                for dx in 0..2 {
                    if let Some(d) = self.get(2 * x + dx, 2 * y + dy) {
                        sum += d;
                        n += 1;
                    }
                }
            }
            if n > 0 {
                Some(sum / n as f64)
            } else {
                None
            }
        })
    }

    /// Save as 16-bit PGM storing centimeter hundredths (invalid pixels
    /// stored as 0), plus a sidecar text header recording the scale.
    pub fn save_pgm16(&self, path: &Path) -> Result<(), ImageError> {
        const SCALE: f64 = 100.0;
        let data: Vec<u16> = self
            .depth
            .iter()
            .zip(&self.valid)
            .map(|(&d, &v)| {
                if !v {
                    0
                } else {
                    (d * SCALE).round().clamp(1.0, 65535.0) as u16
                }
            })
            .collect();
        write_pgm16(path, self.width, self.height, &data)?;
        let sidecar = sidecar_path(path);
        fs::write(&sidecar, "depth_units_per_cm 100\ninvalid_value 0\n").map_err(|e| {
            ImageError::Io {
                path: sidecar.display().to_string(),
                source: e,
            }
        })?;
        Ok(())
    }

    /// Load a 16-bit depth PGM. The sidecar header, if present, overrides
    /// the default scale of 100 units per centimeter.
    pub fn load_pgm16(path: &Path) -> Result<DepthImage, ImageError> {
        let (width, height, data) = read_pgm(path)?;
        let raw: Vec<u16> = match data {
            PgmData::Bits16(d) => d,
            PgmData::Bits8(d) => d.iter().map(|&v| v as u16).collect(),
        };
        let mut scale = 100.0;
        let sidecar = sidecar_path(path);
        if let Ok(text) = fs::read_to_string(&sidecar) {
            for line in text.lines() {
                let mut parts = line.split_whitespace();
                if parts.next() == Some("depth_units_per_cm") {
                    if let Some(Ok(s)) = parts.next().map(str::parse::<f64>) {
                        scale = s;
                    }
                }
            }
        }
        let mut img = DepthImage::new_invalid(width, height);
        for (i, &v) in raw.iter().enumerate() {
            if v > 0 {
                img.depth[i] = v as f64 / scale;
                img.valid[i] = true;
            }
        }
        Ok(img)
    }
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".txt");
    std::path::PathBuf::from(s)
}

/// Back-project every valid pixel into the camera frame.
pub fn point_cloud(depth: &DepthImage, k: &CameraIntrinsics) -> Vec<Option<Vector3<f64>>> {
    let mut out = Vec::with_capacity(depth.width * depth.height);
    for y in 0..depth.height {
        for x in 0..depth.width {
            out.push(
                depth
                    .get(x, y)
                    .map(|d| k.backproject(x as f64, y as f64, d)),
            );
        }
    }
    out
}

/// Per-pixel unit normals from central differences on back-projected
/// points, oriented toward the camera (n . p < 0). Border pixels and pixels
/// with missing neighbors get `None`.
pub fn normal_map(
    points: &[Option<Vector3<f64>>],
    width: usize,
    height: usize,
) -> Vec<Option<Vector3<f64>>> {
    let at = |x: usize, y: usize| points[y * width + x];
    let mut out = vec![None; width * height];
    for y in 1..height.saturating_sub(1) {
        for x in 1..width.saturating_sub(1) {
            let (Some(px1), Some(px0), Some(py1), Some(py0), Some(p)) = (
                at(x + 1, y),
                at(x - 1, y),
                at(x, y + 1),
                at(x, y - 1),
                at(x, y),
            ) else {
                continue;
            };
            let du = px1 - px0;
            let dv = py1 - py0;
            let mut n = du.cross(&dv);
            let norm = n.norm();
            if norm < 1e-12 {
                continue;
            }
            n /= norm;
            if n.dot(&p) > 0.0 {
                n = -n;
            }
            out[y * width + x] = Some(n);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn test_k() -> CameraIntrinsics {
        CameraIntrinsics::new(120.0, 120.0, 79.5, 59.5, 160, 120)
    }

    #[test]
    fn project_backproject_round_trip() {
        let k = test_k();
        for (x, y, z) in [(12.0, 30.0, 4.0), (79.5, 59.5, 7.0), (150.2, 110.9, 2.5)] {
            let p = k.backproject(x, y, z);
            let (px, py) = k.project(&p).unwrap();
            assert_relative_eq!(px, x, epsilon = 1e-10);
            assert_relative_eq!(py, y, epsilon = 1e-10);
            assert_relative_eq!(p.z, z, epsilon = 1e-12);
        }
    }

    #[test]
    fn project_rejects_points_behind_camera() {
        let k = test_k();
        assert!(k.project(&Vector3::new(0.0, 0.0, -1.0)).is_none());
        assert!(k.project(&Vector3::new(1.0, 1.0, 0.0)).is_none());
    }

    #[test]
    fn principal_ray_is_optical_axis() {
        let k = test_k();
        let d = k.ray_direction(k.cx, k.cy);
        assert_relative_eq!(d, Vector3::new(0.0, 0.0, 1.0), epsilon = 1e-12);
    }

    #[test]
    fn plane_normals_face_camera() {
        let k = test_k();
        let depth = DepthImage::new_constant(k.width, k.height, 5.0);
        let pts = point_cloud(&depth, &k);
        let normals = normal_map(&pts, k.width, k.height);
        let n = normals[60 * k.width + 80].unwrap();
        assert_relative_eq!(n, Vector3::new(0.0, 0.0, -1.0), epsilon = 1e-12);
    }

    #[test]
    fn depth_pgm_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("depth.pgm");
        let img = DepthImage::from_fn(20, 10, |x, y| {
            if (x + y) % 7 == 0 {
                None
            } else {
                Some(3.0 + 0.01 * (x as f64) + 0.5 * (y as f64))
            }
        });
        img.save_pgm16(&path).unwrap();
        assert!(path.with_extension("pgm.txt").exists() || sidecar_path(&path).exists());
        let back = DepthImage::load_pgm16(&path).unwrap();
        assert_eq!(back.valid, img.valid);
        for i in 0..img.depth.len() {
            if img.valid[i] {
                assert!((back.depth[i] - img.depth[i]).abs() <= 0.005 + 1e-12);
            }
        }
    }

    #[test]
    fn downsample_keeps_mean_plane() {
        let img = DepthImage::new_constant(16, 16, 4.2);
        let d = img.downsample_half();
        assert_eq!(d.width, 8);
        assert_eq!(d.valid_count(), 64);
        for y in 0..8 {
            for x in 0..8 {
                assert_relative_eq!(d.get(x, y).unwrap(), 4.2, epsilon = 1e-12);
            }
        }
    }
}
