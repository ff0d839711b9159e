//! Depth from a single intensity image by perspective shape from shading.
//!
//! The light source sits at the camera center, the surface is Lambertian,
//! and irradiance falls off with the inverse square of range:
//! `I = albedo * max(0, n.l) / r^2`. The inverse problem is solved as
//! regularized non-linear least squares over log-depth, which keeps depth
//! positive without constraints. A constant image is explained exactly by a
//! camera-centered sphere (constant range `sqrt(albedo / I)`), which the
//! tests use as a closed-form oracle.

use crate::camera::{point_cloud, CameraIntrinsics, DepthImage};
use crate::image::GrayImage;
use nalgebra::Vector3;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ShadingModel {
    /// Surface albedo times source intensity; the attenuation exponent is
    /// fixed at 2 (inverse square).
    pub albedo: f64,
}

impl Default for ShadingModel {
    fn default() -> Self {
        ShadingModel { albedo: 25.0 }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SfsParams {
    /// Weight of the squared Laplacian-of-log-depth smoothness term.
    pub reg: f64,
    /// Gauss-Newton iteration cap.
    pub max_iters: usize,
    /// Step-halving attempts before reporting a stall.
    pub max_halvings: usize,
    /// Relative energy decrease that counts as converged.
    pub rel_tol: f64,
    /// Solver grid cap; larger images are downsampled by factors of two.
    pub max_width: usize,
    pub max_height: usize,
    pub pcg_iters: usize,
    pub pcg_tol: f64,
}

impl Default for SfsParams {
    fn default() -> Self {
        SfsParams {
            reg: 0.02,
            max_iters: 50,
            max_halvings: 10,
            rel_tol: 1e-6,
            max_width: 160,
            max_height: 120,
            pcg_iters: 200,
            pcg_tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SfsSolution {
    pub depth: DepthImage,
    /// Energy after each accepted iterate at the finest solver level,
    /// starting with that level's initial value.
    pub energy_history: Vec<f64>,
    /// Gauss-Newton iterations spent on the finest level.
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Error)]
pub enum SfsError {
    #[error("energy stalled after exhausting step halvings at iteration {iterations}; best energy {energy}", iterations = best.iterations, energy = best.energy_history.last().unwrap_or(&f64::NAN))]
    Stalled { best: Box<SfsSolution> },
    #[error("bad input: {0}")]
    BadInput(String),
}

/// Forward render: Lambertian irradiance with a point light at the camera
/// center. Pixels with invalid depth or missing neighbors render as 0.
pub fn render_shading(depth: &DepthImage, k: &CameraIntrinsics, m: &ShadingModel) -> GrayImage {
    let (w, h) = (depth.width, depth.height);
    let pts = point_cloud(depth, k);
    let refl = crate::image::reflect_index;
    let at = |x: isize, y: isize| pts[refl(y, h) * w + refl(x, w)];
    GrayImage::from_fn(w, h, |x, y| {
        let (xi, yi) = (x as isize, y as isize);
        let (Some(p), Some(pr), Some(pl), Some(pd), Some(pu)) = (
            at(xi, yi),
            at(xi + 1, yi),
            at(xi - 1, yi),
            at(xi, yi + 1),
            at(xi, yi - 1),
        ) else {
            return 0.0;
        };
        irradiance(&p, &pr, &pl, &pd, &pu, m.albedo)
    })
}

/// Irradiance of the patch at `p` with winding fixed by the pixel grid; a
/// patch whose geometric normal faces away from the camera renders as 0.
fn irradiance(
    p: &Vector3<f64>,
    pr: &Vector3<f64>,
    pl: &Vector3<f64>,
    pd: &Vector3<f64>,
    pu: &Vector3<f64>,
    albedo: f64,
) -> f64 {
    let a = pr - pl;
    let b = pd - pu;
    let c = b.cross(&a);
    let cn = c.norm();
    if cn < 1e-300 {
        return 0.0;
    }
    let m = -c.dot(p);
    if m <= 0.0 {
        return 0.0;
    }
    let r = p.norm();
    albedo * m / (cn * r * r * r)
}

/// Sparse residual row: up to five (grid index, coefficient) pairs.
#[derive(Debug, Clone, Copy)]
struct Row {
    idx: [usize; 5],
    coeff: [f64; 5],
    n: usize,
}

impl Row {
    fn zero() -> Row {
        Row {
            idx: [0; 5],
            coeff: [0.0; 5],
            n: 0,
        }
    }

    fn add(&mut self, idx: usize, c: f64) {
        for i in 0..self.n {
            if self.idx[i] == idx {
                self.coeff[i] += c;
                return;
            }
        }
        self.idx[self.n] = idx;
        self.coeff[self.n] = c;
        self.n += 1;
    }
}

struct Grid<'a> {
    w: usize,
    h: usize,
    dirs: &'a [Vector3<f64>],
}

impl Grid<'_> {
    #[inline]
    fn neighbors(&self, x: usize, y: usize) -> [usize; 5] {
        let refl = crate::image::reflect_index;
        let (xi, yi) = (x as isize, y as isize);
        [
            y * self.w + x,
            yi as usize * self.w + refl(xi - 1, self.w),
            yi as usize * self.w + refl(xi + 1, self.w),
            refl(yi - 1, self.h) * self.w + x,
            refl(yi + 1, self.h) * self.w + x,
        ]
    }
}

fn points_from_log_depth(u: &[f64], dirs: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
    u.iter()
        .zip(dirs)
        .map(|(&ui, d)| d * ui.exp())
        .collect()
}

/// Data and regularizer residuals at the current log-depth iterate.
fn residuals(
    u: &[f64],
    grid: &Grid,
    img: &GrayImage,
    albedo: f64,
    sqrt_reg: f64,
) -> (Vec<f64>, Vec<f64>) {
    let pts = points_from_log_depth(u, grid.dirs);
    let n = u.len();
    let mut data = vec![0.0; n];
    let mut reg = vec![0.0; n];
    for y in 0..grid.h {
        for x in 0..grid.w {
            let [ip, il, ir, iu, id] = grid.neighbors(x, y);
            let i_val = irradiance(&pts[ip], &pts[ir], &pts[il], &pts[id], &pts[iu], albedo);
            data[ip] = i_val - img.data[ip];
            reg[ip] = sqrt_reg * (u[il] + u[ir] + u[iu] + u[id] - 4.0 * u[ip]);
        }
    }
    (data, reg)
}

fn energy_of(data: &[f64], reg: &[f64]) -> f64 {
    data.iter().map(|r| r * r).sum::<f64>() + reg.iter().map(|r| r * r).sum::<f64>()
}

/// Analytic Jacobian rows of the data and regularizer residuals.
///
/// For an interior pixel the derivative of irradiance with respect to its
/// own log-depth is exactly -2 I (the m term contributes +I, the r^-3
/// attenuation -3 I); neighbor derivatives flow through the cross product.
fn jacobian(
    u: &[f64],
    grid: &Grid,
    albedo: f64,
    sqrt_reg: f64,
) -> (Vec<Row>, Vec<Row>) {
    let pts = points_from_log_depth(u, grid.dirs);
    let n = u.len();
    let mut data_rows = vec![Row::zero(); n];
    let mut reg_rows = vec![Row::zero(); n];
    for y in 0..grid.h {
        for x in 0..grid.w {
            let [ip, il, ir, iu, id] = grid.neighbors(x, y);
            // regularizer row: sqrt_reg * (u_l + u_r + u_u + u_d - 4 u_p)
            let rr = &mut reg_rows[ip];
            rr.add(ip, -4.0 * sqrt_reg);
            rr.add(il, sqrt_reg);
            rr.add(ir, sqrt_reg);
            rr.add(iu, sqrt_reg);
            rr.add(id, sqrt_reg);

            let p = pts[ip];
            let a = pts[ir] - pts[il];
            let b = pts[id] - pts[iu];
            let c = b.cross(&a);
            let cn = c.norm();
            if cn < 1e-300 {
                continue;
            }
            let m = -c.dot(&p);
            if m <= 0.0 {
                continue;
            }
            let r = p.norm();
            let i_val = albedo * m / (cn * r * r * r);
            let common = albedo / (cn * r * r * r);
            let row = &mut data_rows[ip];
            // contributions of each grid cell the stencil touches; since
            // d p_j / d u_j = p_j, entering through A, B, or the center P
            let mut contrib = |j: usize, dc: Vector3<f64>, dp: Option<&Vector3<f64>>| {
                let mut dm = -dc.dot(&p);
                let mut di = 0.0;
                if let Some(dp) = dp {
                    dm += -c.dot(dp);
                    di += -3.0 * i_val * p.dot(dp) / (r * r);
                }
                di += common * dm - i_val * c.dot(&dc) / (cn * cn);
                row.add(j, di);
            };
            contrib(ip, Vector3::zeros(), Some(&p));
            contrib(ir, b.cross(&pts[ir]), None);
            contrib(il, b.cross(&(-pts[il])), None);
            contrib(id, pts[id].cross(&a), None);
            contrib(iu, (-pts[iu]).cross(&a), None);
        }
    }
    (data_rows, reg_rows)
}

fn apply_rows(rows: &[Row], v: &[f64], out: &mut [f64]) {
    for (o, row) in out.iter_mut().zip(rows) {
        let mut acc = 0.0;
        for i in 0..row.n {
            acc += row.coeff[i] * v[row.idx[i]];
        }
        *o = acc;
    }
}

fn scatter_rows(rows: &[Row], w: &[f64], out: &mut [f64]) {
    for (wi, row) in w.iter().zip(rows) {
        for i in 0..row.n {
            out[row.idx[i]] += row.coeff[i] * wi;
        }
    }
}

/// Jacobi-preconditioned conjugate gradients on the Gauss-Newton normal
/// equations, matrix-free through the sparse rows.
fn pcg(
    data_rows: &[Row],
    reg_rows: &[Row],
    rhs: &[f64],
    iters: usize,
    tol: f64,
) -> Vec<f64> {
    let n = rhs.len();
    let damping = 1e-12;
    let mut diag = vec![damping; n];
    for rows in [data_rows, reg_rows] {
        for row in rows.iter() {
            for i in 0..row.n {
                diag[row.idx[i]] += row.coeff[i] * row.coeff[i];
            }
        }
    }
    let h_apply = |v: &[f64], tmp1: &mut [f64], tmp2: &mut [f64], out: &mut [f64]| {
        out.iter_mut()
            .zip(v)
            .for_each(|(o, &vi)| *o = damping * vi);
        apply_rows(data_rows, v, tmp1);
        scatter_rows(data_rows, tmp1, out);
        apply_rows(reg_rows, v, tmp2);
        scatter_rows(reg_rows, tmp2, out);
    };
    let mut x = vec![0.0; n];
    let mut r = rhs.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&diag).map(|(ri, di)| ri / di).collect();
    let mut p = z.clone();
    let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
    let rhs_norm: f64 = rhs.iter().map(|v| v * v).sum::<f64>().sqrt();
    if rhs_norm == 0.0 {
        return x;
    }
    let mut tmp1 = vec![0.0; n];
    let mut tmp2 = vec![0.0; n];
    let mut hp = vec![0.0; n];
    for _ in 0..iters {
        h_apply(&p, &mut tmp1, &mut tmp2, &mut hp);
        let php: f64 = p.iter().zip(&hp).map(|(a, b)| a * b).sum();
        if php <= 0.0 {
            break;
        }
        let alpha = rz / php;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * hp[i];
        }
        let rnorm: f64 = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if rnorm < tol * rhs_norm {
            break;
        }
        for i in 0..n {
            z[i] = r[i] / diag[i];
        }
        let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    x
}

struct GridOutcome {
    u: Vec<f64>,
    history: Vec<f64>,
    iterations: usize,
    converged: bool,
    stalled: bool,
}

fn solve_grid(
    img: &GrayImage,
    k: &CameraIntrinsics,
    m: &ShadingModel,
    params: &SfsParams,
    init_u: Vec<f64>,
) -> GridOutcome {
    let (w, h) = (img.width, img.height);
    let dirs: Vec<Vector3<f64>> = (0..w * h)
        .map(|i| {
            let (x, y) = (i % w, i / w);
            Vector3::new(
                (x as f64 - k.cx) / k.fx,
                (y as f64 - k.cy) / k.fy,
                1.0,
            )
        })
        .collect();
    let grid = Grid { w, h, dirs: &dirs };
    let sqrt_reg = params.reg.sqrt();
    let mut u = init_u;
    let (d0, r0) = residuals(&u, &grid, img, m.albedo, sqrt_reg);
    let mut energy = energy_of(&d0, &r0);
    let mut history = vec![energy];
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..params.max_iters {
        iterations = it + 1;
        let (data_rows, reg_rows) = jacobian(&u, &grid, m.albedo, sqrt_reg);
        let (data_r, reg_r) = residuals(&u, &grid, img, m.albedo, sqrt_reg);
        let mut rhs = vec![0.0; u.len()];
        scatter_rows(&data_rows, &data_r, &mut rhs);
        scatter_rows(&reg_rows, &reg_r, &mut rhs);
        for v in &mut rhs {
            *v = -*v;
        }
        let delta = pcg(&data_rows, &reg_rows, &rhs, params.pcg_iters, params.pcg_tol);
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..=params.max_halvings {
            let trial: Vec<f64> = u
                .iter()
                .zip(&delta)
                .map(|(&ui, &di)| ui + step * di)
                .collect();
            let (dt, rt) = residuals(&trial, &grid, img, m.albedo, sqrt_reg);
            let e_trial = energy_of(&dt, &rt);
            if e_trial < energy && e_trial.is_finite() {
                u = trial;
                let rel = (energy - e_trial) / energy.max(1e-300);
                energy = e_trial;
                history.push(energy);
                accepted = true;
                if rel < params.rel_tol {
                    converged = true;
                }
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            return GridOutcome {
                u,
                history,
                iterations,
                converged: false,
                stalled: true,
            };
        }
        if converged {
            break;
        }
    }
    GridOutcome {
        u,
        history,
        iterations,
        converged,
        stalled: false,
    }
}

/// Recover depth from a single shaded image.
///
/// Images larger than the solver cap are downsampled by factors of two,
/// solved, and the result is upsampled bilinearly to the input size. The
/// validity mask of the result excludes zero-irradiance pixels.
pub fn depth_from_shading(
    img: &GrayImage,
    k: &CameraIntrinsics,
    m: &ShadingModel,
    params: &SfsParams,
    init: &DepthImage,
) -> Result<SfsSolution, SfsError> {
    if img.width != k.width || img.height != k.height {
        return Err(SfsError::BadInput(
            "image size does not match intrinsics".into(),
        ));
    }
    if init.width != img.width || init.height != img.height {
        return Err(SfsError::BadInput("init size does not match image".into()));
    }
    if img.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(SfsError::BadInput("image values must lie in [0,1]".into()));
    }
    // fill invalid init pixels with the mean valid depth
    let mean = init
        .mean_depth()
        .ok_or_else(|| SfsError::BadInput("init has no valid depth".into()))?;
    let mut work_img = img.clone();
    let mut work_k = *k;
    let mut work_init: Vec<f64> = init
        .depth
        .iter()
        .zip(&init.valid)
        .map(|(&d, &v)| if v { d } else { mean })
        .collect();
    while work_img.width > params.max_width || work_img.height > params.max_height {
        work_img = work_img.downsample_half();
        let (w2, h2) = (work_img.width, work_img.height);
        let mut down = vec![0.0; w2 * h2];
        let w = work_k.width;
        for y in 0..h2 {
            for x in 0..w2 {
                down[y * w2 + x] = 0.25
                    * (work_init[2 * y * w + 2 * x]
                        + work_init[2 * y * w + 2 * x + 1]
                        + work_init[(2 * y + 1) * w + 2 * x]
                        + work_init[(2 * y + 1) * w + 2 * x + 1]);
            }
        }
        work_init = down;
        work_k = work_k.half();
    }

    // coarse-to-fine schedule: the shading energy has narrow curved valleys
    // that trap Gauss-Newton from a flat start, but coarse solutions land in
    // the right basin and refine cleanly
    let mut pyramid = vec![(work_img.clone(), work_k)];
    loop {
        let (last, k_last) = pyramid.last().unwrap();
        if last.width / 2 < 8 || last.height / 2 < 8 {
            break;
        }
        let next = (last.downsample_half(), k_last.half());
        pyramid.push(next);
    }
    let mut coarse_init = work_init.clone();
    let mut dims = (work_img.width, work_img.height);
    for _ in 1..pyramid.len() {
        let (w2, h2) = (dims.0 / 2, dims.1 / 2);
        let mut down = vec![0.0; w2 * h2];
        for y in 0..h2 {
            for x in 0..w2 {
                down[y * w2 + x] = 0.25
                    * (coarse_init[2 * y * dims.0 + 2 * x]
                        + coarse_init[2 * y * dims.0 + 2 * x + 1]
                        + coarse_init[(2 * y + 1) * dims.0 + 2 * x]
                        + coarse_init[(2 * y + 1) * dims.0 + 2 * x + 1]);
            }
        }
        coarse_init = down;
        dims = (w2, h2);
    }
    let mut u: Vec<f64> = coarse_init.iter().map(|&d| d.ln()).collect();
    let mut u_dims = dims;
    let mut outcome = None;
    for (img_l, k_l) in pyramid.iter().rev() {
        if (img_l.width, img_l.height) != u_dims {
            u = upsample_bilinear(&u, u_dims, (img_l.width, img_l.height));
            u_dims = (img_l.width, img_l.height);
        }
        outcome = Some(solve_grid(img_l, k_l, m, params, u));
        u = outcome.as_ref().unwrap().u.clone();
    }
    let outcome = outcome.expect("pyramid has at least one level");
    let full = {
        let coarse = GrayImage {
            width: work_img.width,
            height: work_img.height,
            data: outcome.u.iter().map(|&ui| ui.exp()).collect(),
        };
        if coarse.width == img.width && coarse.height == img.height {
            coarse
        } else {
            GrayImage::from_fn(img.width, img.height, |x, y| {
                sample_clamped(&coarse, x, y, img.width, img.height)
            })
        }
    };
    let depth = DepthImage::from_fn(img.width, img.height, |x, y| {
        let i = y * img.width + x;
        if img.data[i] <= 1e-6 {
            None
        } else {
            Some(full.get(x, y))
        }
    });
    let solution = SfsSolution {
        depth,
        energy_history: outcome.history,
        iterations: outcome.iterations,
        converged: outcome.converged,
    };
    if outcome.stalled {
        return Err(SfsError::Stalled {
            best: Box::new(solution),
        });
    }
    Ok(solution)
}

/// Bilinear upsample of a scalar grid to an arbitrary larger size.
fn upsample_bilinear(data: &[f64], from: (usize, usize), to: (usize, usize)) -> Vec<f64> {
    let src = GrayImage {
        width: from.0,
        height: from.1,
        data: data.to_vec(),
    };
    let mut out = Vec::with_capacity(to.0 * to.1);
    for y in 0..to.1 {
        for x in 0..to.0 {
            out.push(sample_clamped(&src, x, y, to.0, to.1));
        }
    }
    out
}

/// Sample a coarse grid at the position corresponding to fine pixel (x, y),
/// clamping at the borders.
fn sample_clamped(coarse: &GrayImage, x: usize, y: usize, fine_w: usize, fine_h: usize) -> f64 {
    let sx = coarse.width as f64 / fine_w as f64;
    let sy = coarse.height as f64 / fine_h as f64;
    let cx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (coarse.width - 1) as f64 - 1e-9);
    let cy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (coarse.height - 1) as f64 - 1e-9);
    coarse
        .sample_bilinear(cx, cy)
        .unwrap_or_else(|| coarse.get(cx.round() as usize, cy.round() as usize))
}
