//! Trajectory file formats and timestamp association.
//!
//! Pose tracks are plain text, one line per pose, whitespace separated:
//! `timestamp tx ty tz qx qy qz qw` with timestamps in seconds, translation
//! in cm, and the rotation as a unit quaternion. Heading tracks replace the
//! quaternion with a unit heading vector: `timestamp tx ty tz hx hy hz`.
//! Poses are camera-to-world throughout.

use crate::geometry::Pose;
use crate::magnetic::Pose5;
use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use std::fs;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad trajectory line {line}: {reason}")]
    Format { line: usize, reason: String },
    #[error("fewer than {needed} associated pose pairs (got {got})")]
    TooFewPairs { needed: usize, got: usize },
}

/// A pose stamped with its acquisition time in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct TimedPose {
    pub timestamp: f64,
    pub pose: Pose,
}

/// A 5-DoF magnetic estimate stamped with its acquisition time.
#[derive(Debug, Clone, PartialEq)]
pub struct TimedPose5 {
    pub timestamp: f64,
    pub pose: Pose5,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrajectoryError + '_ {
    move |e| TrajectoryError::Io {
        path: path.display().to_string(),
        source: e,
    }
}

pub fn write_trajectory(path: &Path, track: &[TimedPose]) -> Result<(), TrajectoryError> {
    let mut s = String::new();
    for tp in track {
        let t = tp.pose.translation;
        let q = tp.pose.rotation_quaternion();
        s.push_str(&format!(
            "{} {} {} {} {} {} {} {}\n",
            tp.timestamp, t.x, t.y, t.z, q.i, q.j, q.k, q.w
        ));
    }
    fs::write(path, s).map_err(io_err(path))
}

pub fn read_trajectory(path: &Path) -> Result<Vec<TimedPose>, TrajectoryError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut track = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals = parse_floats(line, i + 1, 8)?;
        let q = UnitQuaternion::new_normalize(Quaternion::new(vals[7], vals[4], vals[5], vals[6]));
        track.push(TimedPose {
            timestamp: vals[0],
            pose: Pose::from_quaternion(&q, Vector3::new(vals[1], vals[2], vals[3])),
        });
    }
    Ok(track)
}

pub fn write_heading_trajectory(path: &Path, track: &[TimedPose5]) -> Result<(), TrajectoryError> {
    let mut s = String::new();
    for tp in track {
        let p = tp.pose.position;
        let h = tp.pose.heading;
        s.push_str(&format!(
            "{} {} {} {} {} {} {}\n",
            tp.timestamp, p.x, p.y, p.z, h.x, h.y, h.z
        ));
    }
    fs::write(path, s).map_err(io_err(path))
}

pub fn read_heading_trajectory(path: &Path) -> Result<Vec<TimedPose5>, TrajectoryError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut track = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals = parse_floats(line, i + 1, 7)?;
        track.push(TimedPose5 {
            timestamp: vals[0],
            pose: Pose5::new(
                Vector3::new(vals[1], vals[2], vals[3]),
                Vector3::new(vals[4], vals[5], vals[6]),
            ),
        });
    }
    Ok(track)
}

fn parse_floats(line: &str, lineno: usize, expected: usize) -> Result<Vec<f64>, TrajectoryError> {
    let vals: Vec<f64> = line
        .split_whitespace()
        .map(|t| {
            t.parse::<f64>().map_err(|_| TrajectoryError::Format {
                line: lineno,
                reason: format!("bad number '{t}'"),
            })
        })
        .collect::<Result<_, _>>()?;
    if vals.len() != expected {
        return Err(TrajectoryError::Format {
            line: lineno,
            reason: format!("expected {expected} fields, got {}", vals.len()),
        });
    }
    Ok(vals)
}

/// Pair indices of `a` with the nearest-in-time entries of `b`, keeping
/// pairs within `max_dt` seconds. Each entry of `b` is used at most once.
pub fn associate_by_time(a: &[TimedPose], b: &[TimedPose], max_dt: f64) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    let mut j0 = 0usize;
    for (i, ta) in a.iter().enumerate() {
        // b is assumed time-sorted; advance to the closest entry
        while j0 + 1 < b.len()
            && (b[j0 + 1].timestamp - ta.timestamp).abs() <= (b[j0].timestamp - ta.timestamp).abs()
        {
            j0 += 1;
        }
        if j0 < b.len() && (b[j0].timestamp - ta.timestamp).abs() <= max_dt {
            if pairs.last().map(|&(_, j)| j != j0).unwrap_or(true) {
                pairs.push((i, j0));
            }
        }
    }
    pairs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{exp_se3, Twist};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_track(n: usize, seed: u64) -> Vec<TimedPose> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let xi = Twist::new(
                    Vector3::new(
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    ),
                    Vector3::new(
                        rng.gen_range(-5.0..5.0),
                        rng.gen_range(-5.0..5.0),
                        rng.gen_range(-5.0..5.0),
                    ),
                );
                TimedPose {
                    timestamp: i as f64 / 15.0,
                    pose: exp_se3(&xi),
                }
            })
            .collect()
    }

    #[test]
    fn pose_track_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("track.txt");
        let track = random_track(50, 3);
        write_trajectory(&path, &track).unwrap();
        let back = read_trajectory(&path).unwrap();
        assert_eq!(back.len(), track.len());
        for (a, b) in track.iter().zip(&back) {
            assert_eq!(a.timestamp, b.timestamp);
            assert_relative_eq!(a.pose.translation, b.pose.translation, epsilon = 1e-12);
            assert_relative_eq!(a.pose.rotation, b.pose.rotation, epsilon = 1e-12);
        }
    }

    #[test]
    fn heading_track_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("track5.txt");
        let track: Vec<TimedPose5> = (0..20)
            .map(|i| TimedPose5 {
                timestamp: i as f64 * 0.5,
                pose: Pose5::new(
                    Vector3::new(i as f64, -(i as f64), 0.5),
                    Vector3::new(0.3, 0.4, (i as f64).cos()),
                ),
            })
            .collect();
        write_heading_trajectory(&path, &track).unwrap();
        let back = read_heading_trajectory(&path).unwrap();
        assert_eq!(back.len(), track.len());
        for (a, b) in track.iter().zip(&back) {
            assert_eq!(a.timestamp, b.timestamp);
            assert_relative_eq!(a.pose.position, b.pose.position, epsilon = 1e-12);
            assert_relative_eq!(a.pose.heading, b.pose.heading, epsilon = 1e-12);
        }
    }

    #[test]
    fn comments_and_blank_lines_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("track.txt");
        fs::write(&path, "# header\n\n0 1 2 3 0 0 0 1\n").unwrap();
        let track = read_trajectory(&path).unwrap();
        assert_eq!(track.len(), 1);
        assert_eq!(track[0].pose.translation, Vector3::new(1.0, 2.0, 3.0));
    }

    #[test]
    fn association_matches_nearest_within_tolerance() {
        let a = random_track(10, 1);
        let mut b = random_track(10, 2);
        for tp in b.iter_mut() {
            tp.timestamp += 0.01; // small clock offset
        }
        let pairs = associate_by_time(&a, &b, 0.02);
        assert_eq!(pairs.len(), 10);
        for (i, j) in pairs {
            assert_eq!(i, j);
        }
        let pairs = associate_by_time(&a, &b, 0.001);
        assert!(pairs.is_empty());
    }

    #[test]
    fn association_skips_missing_spans() {
        let a = random_track(20, 1);
        // b covers only the second half
        let b: Vec<TimedPose> = a[10..].to_vec();
        let pairs = associate_by_time(&a, &b, 1e-9);
        assert_eq!(pairs.len(), 10);
        assert!(pairs.iter().all(|&(i, j)| i == j + 10));
    }
}
