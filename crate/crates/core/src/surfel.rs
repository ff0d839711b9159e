//! Dense surfel map with frame-to-model fusion, predictive splat
//! rendering for the tracker, and non-rigid loop closure through an
//! embedded deformation graph.
//!
//! Surfels older than `inactive_after` frames leave the active set: they
//! stop being association targets and stop rendering, but stay in the map
//! so a revisit can register against them and pull the drifted active
//! sheet back into alignment.

use crate::camera::{CameraIntrinsics, DepthImage};
use crate::geometry::{invert, Pose};
use crate::image::GrayImage;
use crate::tracker::{associate, track, Frame, ModelView, TrackerParams, TrackingResult};
use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SurfelError {
    #[error("map io: {0}")]
    Io(#[from] std::io::Error),
    #[error("map format: {0}")]
    Format(String),
}

#[derive(Debug, Clone)]
pub struct Surfel {
    /// Model-frame position, cm.
    pub position: Vector3<f64>,
    /// Unit normal, pointing toward the viewpoints that observed it.
    pub normal: Vector3<f64>,
    /// Linear RGB in [0, 1].
    pub color: [f64; 3],
    /// Accumulated observation confidence; one unit per fused frame point.
    pub weight: f64,
    /// Disk radius, cm.
    pub radius: f64,
    pub created: u64,
    pub last_seen: u64,
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SurfelMapParams {
    /// Association distance gate, cm.
    pub assoc_dist: f64,
    /// Association normal-angle gate, radians.
    pub assoc_angle: f64,
    /// Frames without an update before a surfel turns inactive.
    pub inactive_after: u64,
    pub max_radius: f64,
}

impl Default for SurfelMapParams {
    fn default() -> Self {
        SurfelMapParams {
            assoc_dist: 1.0,
            assoc_angle: 20.0_f64.to_radians(),
            inactive_after: 100,
            max_radius: 2.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SurfelMap {
    pub surfels: Vec<Surfel>,
    /// Frame clock; advanced once per integrated frame.
    pub frame: u64,
    pub params: SurfelMapParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PartitionCounts {
    pub active: usize,
    pub inactive: usize,
}

impl SurfelMap {
    pub fn new(params: SurfelMapParams) -> SurfelMap {
        SurfelMap {
            surfels: Vec::new(),
            frame: 0,
            params,
        }
    }

    /// A surfel is inactive iff more than `inactive_after` frames passed
    /// since its last update.
    pub fn is_active(&self, s: &Surfel) -> bool {
        self.frame - s.last_seen <= self.params.inactive_after
    }

    pub fn partition_counts(&self) -> PartitionCounts {
        let active = self.surfels.iter().filter(|s| self.is_active(s)).count();
        PartitionCounts {
            active,
            inactive: self.surfels.len() - active,
        }
    }

    pub fn total_weight(&self) -> f64 {
        self.surfels.iter().map(|s| s.weight).sum()
    }
}

fn cell_of(p: &Vector3<f64>, cell: f64) -> (i64, i64, i64) {
    (
        (p.x / cell).floor() as i64,
        (p.y / cell).floor() as i64,
        (p.z / cell).floor() as i64,
    )
}

fn luminance_of(c: &[f64; 3]) -> f64 {
    0.2126 * c[0] + 0.7152 * c[1] + 0.0722 * c[2]
}

/// Fuse one tracked frame into the map. Each valid frame point is
/// transformed by `pose` and matched to the nearest active surfel inside
/// the distance and normal gates; matches average in (one observation
/// unit each), misses insert fresh surfels. New surfels never become
/// association targets for pixels of the same frame, so re-integrating an
/// identical frame maps pixels one-to-one onto the surfels they created.
pub fn integrate_frame(map: &mut SurfelMap, frame: &Frame, pose: &Pose, k: &CameraIntrinsics) {
    map.frame += 1;
    let now = map.frame;
    let cell = map.params.assoc_dist;
    let cos_gate = map.params.assoc_angle.cos();
    let mut grid: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
    for (i, s) in map.surfels.iter().enumerate() {
        if map.is_active(s) {
            grid.entry(cell_of(&s.position, cell)).or_default().push(i);
        }
    }
    for (idx, (point, normal)) in frame.points.iter().zip(&frame.normals).enumerate() {
        let (Some(p_cam), Some(n_cam)) = (point, normal) else {
            continue;
        };
        let p = pose.transform(p_cam);
        let n = pose.rotate(n_cam);
        let x = idx % frame.depth.width;
        let y = idx / frame.depth.width;
        let color = match &frame.color {
            Some(rgb) => {
                let [r, g, b] = rgb.get(x, y);
                [r as f64 / 255.0, g as f64 / 255.0, b as f64 / 255.0]
            }
            None => {
                let v = frame.intensity.get(x, y);
                [v, v, v]
            }
        };
        let radius = (p_cam.z * std::f64::consts::SQRT_2 / k.fx)
            .clamp(1e-3, map.params.max_radius);

        let (cx, cy, cz) = cell_of(&p, cell);
        let mut best: Option<(usize, f64)> = None;
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let Some(bucket) = grid.get(&(cx + dx, cy + dy, cz + dz)) else {
                        continue;
                    };
                    for &si in bucket {
                        let s = &map.surfels[si];
                        let d = (s.position - p).norm();
                        if d < map.params.assoc_dist
                            && s.normal.dot(&n) > cos_gate
                            && best.map_or(true, |(_, bd)| d < bd)
                        {
                            best = Some((si, d));
                        }
                    }
                }
            }
        }
        match best {
            Some((si, _)) => {
                let s = &mut map.surfels[si];
                let w = s.weight;
                s.position = (s.position * w + p) / (w + 1.0);
                let blended = s.normal * w + n;
                if blended.norm() > 1e-12 {
                    s.normal = blended.normalize();
                }
                for c in 0..3 {
                    s.color[c] = (s.color[c] * w + color[c]) / (w + 1.0);
                }
                if radius < s.radius {
                    s.radius = (s.radius * w + radius) / (w + 1.0);
                }
                s.weight = w + 1.0;
                s.last_seen = now;
            }
            None => map.surfels.push(Surfel {
                position: p,
                normal: n,
                color,
                weight: 1.0,
                radius,
                created: now,
                last_seen: now,
            }),
        }
    }
}

/// Splat-rendered model prediction plus the per-pixel winning surfel
/// indices (used for reactivation after a loop closure).
#[derive(Debug, Clone)]
pub struct PredictedView {
    pub view: ModelView,
    pub filled: usize,
    /// Fewer than 50 rendered pixels: the tracker cannot use this view.
    pub empty: bool,
    pub winners: Vec<Option<usize>>,
}

/// Render the listed surfels from `pose`. Each surfel is a planar disk;
/// pixel depth comes from exact ray-plane intersection so a map built
/// from a frame renders that frame's depth back. Back-facing surfels are
/// culled, nearest depth wins the z-buffer.
pub fn render_surfels(
    map: &SurfelMap,
    indices: &[usize],
    pose: &Pose,
    k: &CameraIntrinsics,
) -> PredictedView {
    let (w, h) = (k.width, k.height);
    let t_cw = invert(pose);
    let mut depth = DepthImage::new_invalid(w, h);
    let mut zbuf = vec![f64::INFINITY; w * h];
    let mut intensity = GrayImage::new(w, h);
    let mut points: Vec<Option<Vector3<f64>>> = vec![None; w * h];
    let mut normals: Vec<Option<Vector3<f64>>> = vec![None; w * h];
    let mut winners: Vec<Option<usize>> = vec![None; w * h];
    for &si in indices {
        let s = &map.surfels[si];
        let c = t_cw.transform(&s.position);
        if c.z <= 1e-3 {
            continue;
        }
        let n = t_cw.rotate(&s.normal);
        // normals face the observing camera; positive dot means we are
        // looking at the back side
        if n.dot(&c) >= 0.0 {
            continue;
        }
        let Some((u, v)) = k.project(&c) else {
            continue;
        };
        let pr = (k.fx * s.radius / c.z).clamp(1.0, 8.0);
        let lum = luminance_of(&s.color);
        let x0 = (u - pr).floor().max(0.0) as usize;
        let x1 = (u + pr).ceil().min(w as f64 - 1.0) as usize;
        let y0 = (v - pr).floor().max(0.0) as usize;
        let y1 = (v + pr).ceil().min(h as f64 - 1.0) as usize;
        for py in y0..=y1 {
            for px in x0..=x1 {
                let du = px as f64 - u;
                let dv = py as f64 - v;
                if du * du + dv * dv > pr * pr {
                    continue;
                }
                let d = Vector3::new(
                    (px as f64 - k.cx) / k.fx,
                    (py as f64 - k.cy) / k.fy,
                    1.0,
                );
                let denom = n.dot(&d);
                if denom.abs() < 1e-9 {
                    continue;
                }
                let z = n.dot(&c) / denom;
                if z <= 1e-3 {
                    continue;
                }
                let q = d * z;
                if (q - c).norm() > 3.0 * s.radius {
                    continue;
                }
                let at = py * w + px;
                if z < zbuf[at] {
                    zbuf[at] = z;
                    depth.set(px, py, z);
                    intensity.set(px, py, lum);
                    points[at] = Some(q);
                    normals[at] = Some(n);
                    winners[at] = Some(si);
                }
            }
        }
    }
    let filled = winners.iter().filter(|p| p.is_some()).count();
    PredictedView {
        view: ModelView {
            intensity,
            depth,
            points,
            normals,
        },
        filled,
        empty: filled < 50,
        winners,
    }
}

/// Render only the active surfels: the tracker's frame-to-model view.
pub fn predict_view(map: &SurfelMap, pose: &Pose, k: &CameraIntrinsics) -> PredictedView {
    let indices: Vec<usize> = (0..map.surfels.len())
        .filter(|&i| map.is_active(&map.surfels[i]))
        .collect();
    render_surfels(map, &indices, pose, k)
}

#[derive(Debug, Clone)]
pub struct GraphNode {
    pub position: Vector3<f64>,
    pub affine: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

#[derive(Debug, Clone)]
pub struct DeformationGraph {
    pub nodes: Vec<GraphNode>,
    /// Directed regularization edges: each node to its k nearest others.
    pub edges: Vec<(usize, usize)>,
    pub spacing: f64,
    /// Nodes blended per deformed point.
    pub influence_k: usize,
}

/// Greedy poisson-disk subsample of the surfel positions: every surfel
/// ends up within `spacing` of some node. Node parameters start at
/// identity.
pub fn build_graph(map: &SurfelMap, spacing: f64) -> DeformationGraph {
    let mut nodes: Vec<GraphNode> = Vec::new();
    let mut grid: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
    for s in &map.surfels {
        let (cx, cy, cz) = cell_of(&s.position, spacing);
        let mut covered = false;
        'scan: for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(bucket) = grid.get(&(cx + dx, cy + dy, cz + dz)) {
                        for &ni in bucket {
                            if (nodes[ni].position - s.position).norm() < spacing {
                                covered = true;
                                break 'scan;
                            }
                        }
                    }
                }
            }
        }
        if !covered {
            let ni = nodes.len();
            nodes.push(GraphNode {
                position: s.position,
                affine: Matrix3::identity(),
                translation: Vector3::zeros(),
            });
            grid.entry((cx, cy, cz)).or_default().push(ni);
        }
    }
    let k = 4usize;
    let mut edges = Vec::new();
    for j in 0..nodes.len() {
        let mut dist: Vec<(f64, usize)> = (0..nodes.len())
            .filter(|&l| l != j)
            .map(|l| ((nodes[l].position - nodes[j].position).norm(), l))
            .collect();
        dist.sort_by(|a, b| a.0.total_cmp(&b.0));
        for &(_, l) in dist.iter().take(k) {
            edges.push((j, l));
        }
    }
    DeformationGraph {
        nodes,
        edges,
        spacing,
        influence_k: k,
    }
}

/// Normalized inverse-distance weights over the k nearest nodes. A point
/// sitting exactly on a node is owned by it outright.
pub fn blend_weights(graph: &DeformationGraph, p: &Vector3<f64>) -> Vec<(usize, f64)> {
    let mut dist: Vec<(f64, usize)> = graph
        .nodes
        .iter()
        .enumerate()
        .map(|(i, n)| ((n.position - p).norm(), i))
        .collect();
    dist.sort_by(|a, b| a.0.total_cmp(&b.0));
    dist.truncate(graph.influence_k.min(dist.len()));
    if let Some(&(d0, i0)) = dist.first() {
        if d0 < 1e-12 {
            return vec![(i0, 1.0)];
        }
    }
    let total: f64 = dist.iter().map(|(d, _)| 1.0 / d).sum();
    dist.iter().map(|&(d, i)| (i, 1.0 / (d * total))).collect()
}

/// Embedded-deformation displacement of `p` under precomputed blend
/// weights: sum of w_j ((A_j - I)(p - g_j) + t_j). Written as a delta so
/// an identity graph moves nothing, bit for bit.
pub fn deform_delta(
    graph: &DeformationGraph,
    weights: &[(usize, f64)],
    p: &Vector3<f64>,
) -> Vector3<f64> {
    let mut delta = Vector3::zeros();
    for &(j, w) in weights {
        let node = &graph.nodes[j];
        let d = p - node.position;
        delta += w * ((node.affine - Matrix3::identity()) * d + node.translation);
    }
    delta
}

/// Apply the graph to every surfel. Positions move by the blended
/// deformation; normals transform by the blended inverse-transpose and
/// renormalize (skipped when the correction is exactly zero, keeping the
/// identity graph an exact no-op).
pub fn deform(map: &mut SurfelMap, graph: &DeformationGraph) {
    let inv_t: Vec<Matrix3<f64>> = graph
        .nodes
        .iter()
        .map(|n| {
            n.affine
                .try_inverse()
                .map(|m| m.transpose())
                .unwrap_or(n.affine)
        })
        .collect();
    for s in &mut map.surfels {
        let weights = blend_weights(graph, &s.position);
        s.position += deform_delta(graph, &weights, &s.position);
        let mut dn = Vector3::zeros();
        for &(j, w) in &weights {
            dn += w * ((inv_t[j] - Matrix3::identity()) * s.normal);
        }
        if dn != Vector3::zeros() {
            let blended = s.normal + dn;
            if blended.norm() > 1e-12 {
                s.normal = blended.normalize();
            }
        }
    }
}

/// One loop-closure correspondence: an active-model point that should
/// land on an inactive-model point after deformation.
#[derive(Debug, Clone, Copy)]
pub struct LoopConstraint {
    pub source: Vector3<f64>,
    pub target: Vector3<f64>,
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct EnergyWeights {
    pub rot: f64,
    pub reg: f64,
    pub con: f64,
}

impl Default for EnergyWeights {
    fn default() -> Self {
        EnergyWeights {
            rot: 1.0,
            reg: 10.0,
            con: 100.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizeReport {
    /// Energy after each accepted iteration, starting with the initial
    /// value; non-increasing by construction.
    pub energies: Vec<f64>,
    pub iterations: usize,
    /// The undamped normal equations were singular: the constraint set
    /// does not determine every node and regularization fills the gap.
    pub rank_deficient: bool,
}

fn graph_energy(
    graph: &DeformationGraph,
    constraints: &[LoopConstraint],
    blends: &[Vec<(usize, f64)>],
    weights: &EnergyWeights,
) -> f64 {
    let mut e = 0.0;
    for node in &graph.nodes {
        let a = &node.affine;
        for c1 in 0..3 {
            for c2 in c1..3 {
                let dot = a.column(c1).dot(&a.column(c2));
                let r = if c1 == c2 { dot - 1.0 } else { dot };
                e += weights.rot * r * r;
            }
        }
    }
    for &(j, l) in &graph.edges {
        let (nj, nl) = (&graph.nodes[j], &graph.nodes[l]);
        let d = nl.position - nj.position;
        // algebraically A d + g_j + t_j - g_l - t_l; this arrangement is
        // exactly zero for an identity graph
        let r = (nj.affine - Matrix3::identity()) * d + nj.translation - nl.translation;
        e += weights.reg * r.norm_squared();
    }
    for (con, blend) in constraints.iter().zip(blends) {
        let r = con.source + deform_delta(graph, blend, &con.source) - con.target;
        e += weights.con * r.norm_squared();
    }
    e
}

/// Gauss-Newton (Levenberg damped) minimization of the embedded
/// deformation energy: rotation terms keep node matrices orthonormal,
/// regularization keeps neighboring nodes agreeing, constraint terms pull
/// deformed sources onto targets. Stops on relative energy decrease below
/// 1e-6 or 20 accepted iterations.
pub fn optimize_graph(
    graph: &mut DeformationGraph,
    constraints: &[LoopConstraint],
    weights: &EnergyWeights,
) -> OptimizeReport {
    let n = graph.nodes.len();
    let dim = 12 * n;
    let col_a = |j: usize, r: usize, c: usize| 12 * j + 3 * c + r;
    let col_t = |j: usize, i: usize| 12 * j + 9 + i;
    let blends: Vec<Vec<(usize, f64)>> = constraints
        .iter()
        .map(|c| blend_weights(graph, &c.source))
        .collect();

    let mut energy = graph_energy(graph, constraints, &blends, weights);
    let mut energies = vec![energy];
    let mut rank_deficient = false;
    let mut lambda = 1e-6;
    let mut iterations = 0;

    for iter in 0..20 {
        let mut h = DMatrix::<f64>::zeros(dim, dim);
        let mut g = DVector::<f64>::zeros(dim);
        let add_row = |entries: &[(usize, f64)], r: f64, h: &mut DMatrix<f64>, g: &mut DVector<f64>| {
            for &(c1, v1) in entries {
                g[c1] += v1 * r;
                for &(c2, v2) in entries {
                    h[(c1, c2)] += v1 * v2;
                }
            }
        };
        let sr = weights.rot.sqrt();
        for (j, node) in graph.nodes.iter().enumerate() {
            let a = &node.affine;
            for c1 in 0..3 {
                for c2 in c1..3 {
                    let dot = a.column(c1).dot(&a.column(c2));
                    let (r, scale) = if c1 == c2 {
                        (dot - 1.0, 2.0)
                    } else {
                        (dot, 1.0)
                    };
                    let mut entries = Vec::with_capacity(6);
                    if c1 == c2 {
                        for row in 0..3 {
                            entries.push((col_a(j, row, c1), sr * scale * a[(row, c1)]));
                        }
                    } else {
                        for row in 0..3 {
                            entries.push((col_a(j, row, c1), sr * a[(row, c2)]));
                            entries.push((col_a(j, row, c2), sr * a[(row, c1)]));
                        }
                    }
                    add_row(&entries, sr * r, &mut h, &mut g);
                }
            }
        }
        let sg = weights.reg.sqrt();
        for &(j, l) in &graph.edges {
            let (nj, nl) = (&graph.nodes[j], &graph.nodes[l]);
            let d = nl.position - nj.position;
            let res = (nj.affine - Matrix3::identity()) * d + nj.translation - nl.translation;
            for i in 0..3 {
                let mut entries = Vec::with_capacity(5);
                for c in 0..3 {
                    entries.push((col_a(j, i, c), sg * d[c]));
                }
                entries.push((col_t(j, i), sg));
                entries.push((col_t(l, i), -sg));
                add_row(&entries, sg * res[i], &mut h, &mut g);
            }
        }
        let sc = weights.con.sqrt();
        for (con, blend) in constraints.iter().zip(&blends) {
            let res = con.source + deform_delta(graph, blend, &con.source) - con.target;
            for i in 0..3 {
                let mut entries = Vec::with_capacity(4 * blend.len());
                for &(m, w) in blend {
                    let d = con.source - graph.nodes[m].position;
                    for c in 0..3 {
                        entries.push((col_a(m, i, c), sc * w * d[c]));
                    }
                    entries.push((col_t(m, i), sc * w));
                }
                add_row(&entries, sc * res[i], &mut h, &mut g);
            }
        }

        if iter == 0 && h.clone().cholesky().is_none() {
            rank_deficient = true;
        }

        let mut accepted = false;
        for _ in 0..8 {
            let mut damped = h.clone();
            for i in 0..dim {
                damped[(i, i)] += lambda * damped[(i, i)].max(1e-8);
            }
            let Some(chol) = damped.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let delta = chol.solve(&(-&g));
            let saved: Vec<GraphNode> = graph.nodes.clone();
            for (j, node) in graph.nodes.iter_mut().enumerate() {
                for c in 0..3 {
                    for r in 0..3 {
                        node.affine[(r, c)] += delta[col_a(j, r, c)];
                    }
                }
                for i in 0..3 {
                    node.translation[i] += delta[col_t(j, i)];
                }
            }
            let e_new = graph_energy(graph, constraints, &blends, weights);
            if e_new <= energy {
                let rel = (energy - e_new) / energy.max(1e-300);
                energy = e_new;
                energies.push(energy);
                iterations = iter + 1;
                lambda = (lambda / 3.0).max(1e-9);
                accepted = true;
                if rel < 1e-6 {
                    return OptimizeReport {
                        energies,
                        iterations,
                        rank_deficient,
                    };
                }
                break;
            }
            graph.nodes = saved;
            lambda *= 10.0;
        }
        if !accepted {
            break;
        }
    }
    OptimizeReport {
        energies,
        iterations,
        rank_deficient,
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct CloseLoopParams {
    /// Deformation-graph node spacing, cm.
    pub node_spacing: f64,
    /// Keep every n-th registration pair as a constraint.
    pub constraint_stride: usize,
    pub min_inlier_fraction: f64,
    /// Minimum rendered pixels before registration is attempted.
    pub min_filled: usize,
    pub tracker: TrackerParams,
    pub weights: EnergyWeights,
    /// Anchor the revisited (inactive) geometry with source == target
    /// constraints so the optimization moves the drifted active sheet
    /// instead of translating the whole map.
    pub pin_inactive: bool,
}

impl Default for CloseLoopParams {
    fn default() -> Self {
        CloseLoopParams {
            node_spacing: 2.0,
            constraint_stride: 7,
            min_inlier_fraction: 0.6,
            min_filled: 50,
            tracker: TrackerParams::default(),
            weights: EnergyWeights::default(),
            pin_inactive: true,
        }
    }
}

#[derive(Debug)]
pub struct CloseLoopOutcome {
    pub applied: bool,
    pub constraints: usize,
    pub registration: Option<TrackingResult>,
    /// Median surfel displacement of the applied deformation, cm.
    pub median_displacement: f64,
}

impl CloseLoopOutcome {
    fn noop() -> CloseLoopOutcome {
        CloseLoopOutcome {
            applied: false,
            constraints: 0,
            registration: None,
            median_displacement: 0.0,
        }
    }
}

/// Model-to-model loop closure: render the inactive map from the current
/// pose, register the frame against it, and if registration is solid turn
/// the matched pairs into deformation constraints that pull the active
/// sheet onto the revisited geometry. Matched inactive surfels reactivate.
pub fn close_loop(
    map: &mut SurfelMap,
    frame: &Frame,
    pose: &Pose,
    k: &CameraIntrinsics,
    params: &CloseLoopParams,
) -> CloseLoopOutcome {
    let inactive: Vec<usize> = (0..map.surfels.len())
        .filter(|&i| !map.is_active(&map.surfels[i]))
        .collect();
    if inactive.is_empty() {
        return CloseLoopOutcome::noop();
    }
    let rendered = render_surfels(map, &inactive, pose, k);
    if rendered.filled < params.min_filled {
        return CloseLoopOutcome::noop();
    }
    let result = track(frame, &rendered.view, k, &Pose::identity(), &params.tracker);
    if result.degenerate || result.inlier_fraction <= params.min_inlier_fraction {
        return CloseLoopOutcome {
            applied: false,
            constraints: 0,
            registration: Some(result),
            median_displacement: 0.0,
        };
    }
    let (pairs, _) = associate(
        &frame.points,
        &frame.normals,
        &rendered.view,
        k,
        &result.pose,
        params.tracker.depth_gate,
        params.tracker.normal_gate,
    );
    let mut constraints: Vec<LoopConstraint> = pairs
        .iter()
        .step_by(params.constraint_stride.max(1))
        .map(|pair| LoopConstraint {
            source: pose.transform(&pair.p_frame),
            target: pose.transform(&pair.v_view),
        })
        .collect();
    if constraints.is_empty() {
        return CloseLoopOutcome {
            applied: false,
            constraints: 0,
            registration: Some(result),
            median_displacement: 0.0,
        };
    }
    if params.pin_inactive {
        let mut seen: Vec<usize> = rendered.winners.iter().flatten().copied().collect();
        seen.sort_unstable();
        seen.dedup();
        for &si in seen.iter().step_by(params.constraint_stride.max(1)) {
            let p = map.surfels[si].position;
            constraints.push(LoopConstraint {
                source: p,
                target: p,
            });
        }
    }
    let n_constraints = constraints.len();
    let mut graph = build_graph(map, params.node_spacing);
    optimize_graph(&mut graph, &constraints, &params.weights);

    let before: Vec<Vector3<f64>> = map.surfels.iter().map(|s| s.position).collect();
    deform(map, &graph);
    let mut moved: Vec<f64> = map
        .surfels
        .iter()
        .zip(&before)
        .map(|(s, b)| (s.position - b).norm())
        .collect();
    moved.sort_by(f64::total_cmp);
    let median = moved[moved.len() / 2];

    let now = map.frame;
    for si in rendered.winners.iter().flatten() {
        map.surfels[*si].last_seen = now;
    }
    CloseLoopOutcome {
        applied: true,
        constraints: n_constraints,
        registration: Some(result),
        median_displacement: median,
    }
}

/// ASCII PLY export: one vertex per surfel carrying position, normal,
/// color, radius, weight, and both timestamps, all in double precision so
/// the file round-trips exactly.
pub fn save_map_ply(path: &Path, map: &SurfelMap) -> Result<(), SurfelError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "ply")?;
    writeln!(f, "format ascii 1.0")?;
    writeln!(f, "comment surfel map, coordinates in cm")?;
    writeln!(f, "element vertex {}", map.surfels.len())?;
    for prop in [
        "x", "y", "z", "nx", "ny", "nz", "red", "green", "blue", "radius", "weight",
    ] {
        writeln!(f, "property double {prop}")?;
    }
    writeln!(f, "property uint created")?;
    writeln!(f, "property uint last_seen")?;
    writeln!(f, "end_header")?;
    for s in &map.surfels {
        writeln!(
            f,
            "{} {} {} {} {} {} {} {} {} {} {} {} {}",
            s.position.x,
            s.position.y,
            s.position.z,
            s.normal.x,
            s.normal.y,
            s.normal.z,
            s.color[0],
            s.color[1],
            s.color[2],
            s.radius,
            s.weight,
            s.created,
            s.last_seen
        )?;
    }
    Ok(())
}

/// Load a map (or a ground-truth surface) written by [`save_map_ply`].
/// Only `x y z` are required; missing attributes take defaults.
pub fn load_map_ply(path: &Path) -> Result<SurfelMap, SurfelError> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut lines = f.lines();
    let magic = lines
        .next()
        .ok_or_else(|| SurfelError::Format("empty file".into()))??;
    if magic.trim() != "ply" {
        return Err(SurfelError::Format("not a ply file".into()));
    }
    let mut n_vertices = None;
    let mut props: Vec<String> = Vec::new();
    for line in lines.by_ref() {
        let line = line?;
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["end_header"] => break,
            ["format", "ascii", _] | ["comment", ..] | [] => {}
            ["element", "vertex", n] => {
                n_vertices = Some(
                    n.parse::<usize>()
                        .map_err(|e| SurfelError::Format(e.to_string()))?,
                )
            }
            ["element", ..] => {
                return Err(SurfelError::Format("only vertex elements supported".into()))
            }
            ["property", _, name] => props.push(name.to_string()),
            _ => return Err(SurfelError::Format(format!("bad header line: {line}"))),
        }
    }
    let n = n_vertices.ok_or_else(|| SurfelError::Format("missing vertex count".into()))?;
    let col = |name: &str| props.iter().position(|p| p == name);
    let (ix, iy, iz) = match (col("x"), col("y"), col("z")) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => return Err(SurfelError::Format("missing x/y/z properties".into())),
    };
    let mut map = SurfelMap::new(SurfelMapParams::default());
    for line in lines.take(n) {
        let line = line?;
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|w| w.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| SurfelError::Format(e.to_string()))?;
        if vals.len() < props.len() {
            return Err(SurfelError::Format("short vertex line".into()));
        }
        let at = |i: Option<usize>, default: f64| i.map_or(default, |i| vals[i]);
        let normal = Vector3::new(
            at(col("nx"), 0.0),
            at(col("ny"), 0.0),
            at(col("nz"), 1.0),
        );
        // normalize only clearly non-unit normals so our own files
        // round-trip bit for bit
        let nn = normal.norm();
        map.surfels.push(Surfel {
            position: Vector3::new(vals[ix], vals[iy], vals[iz]),
            normal: if nn < 1e-12 {
                Vector3::z()
            } else if (nn - 1.0).abs() > 1e-9 {
                normal / nn
            } else {
                normal
            },
            color: [
                at(col("red"), 0.5),
                at(col("green"), 0.5),
                at(col("blue"), 0.5),
            ],
            weight: at(col("weight"), 1.0),
            radius: at(col("radius"), 0.1),
            created: at(col("created"), 0.0) as u64,
            last_seen: at(col("last_seen"), 0.0) as u64,
        });
    }
    if map.surfels.len() != n {
        return Err(SurfelError::Format(format!(
            "expected {n} vertices, found {}",
            map.surfels.len()
        )));
    }
    map.frame = map.surfels.iter().map(|s| s.last_seen).max().unwrap_or(0);
    Ok(map)
}
