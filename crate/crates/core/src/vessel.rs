//! Multiscale vesselness filtering and frame enhancement.
//!
//! Endoscopic frames are poorly textured; ridge-like vessel structures are
//! amplified so downstream photometric tracking has gradients to work with.
//! The filter analyzes the eigenvalues of the scale-normalized Hessian and
//! keeps elongated (one small, one large eigenvalue) structures of the
//! configured polarity.

use crate::image::{gaussian_blur, GrayImage, RgbImage};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VesselError {
    #[error("sigma {0} is below the minimum scale of 0.5 pixels")]
    SigmaTooSmall(f64),
    #[error("invalid parameters: {0}")]
    BadParams(String),
}

/// Which intensity polarity counts as vessel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Polarity {
    /// Dark structures on a bright background (lambda2 > 0).
    DarkOnBright,
    /// Bright structures on a dark background (lambda2 < 0).
    BrightOnDark,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct VesselnessParams {
    /// Gaussian scales in pixels.
    pub scales: Vec<f64>,
    /// Blobness sensitivity.
    pub beta: f64,
    /// Structureness sensitivity, calibrated for intensities in [0,255].
    pub c: f64,
    pub polarity: Polarity,
    /// Additive blend gain used by [`enhance_frame`].
    pub gain: f64,
}

impl Default for VesselnessParams {
    fn default() -> Self {
        VesselnessParams {
            scales: vec![1.0, 2.0, 3.0, 4.0],
            beta: 0.5,
            c: 15.0,
            polarity: Polarity::DarkOnBright,
            gain: 1.0,
        }
    }
}

impl VesselnessParams {
    pub fn validate(&self) -> Result<(), VesselError> {
        if self.scales.is_empty() {
            return Err(VesselError::BadParams("scale list is empty".into()));
        }
        for &s in &self.scales {
            if s < 0.5 {
                return Err(VesselError::SigmaTooSmall(s));
            }
        }
        if self.beta <= 0.0 || self.c <= 0.0 {
            return Err(VesselError::BadParams("beta and c must be positive".into()));
        }
        Ok(())
    }
}

/// Per-pixel symmetric second derivatives; `ixy` serves for both off-diagonal
/// entries, so symmetry holds by construction.
#[derive(Debug, Clone)]
pub struct HessianField {
    pub width: usize,
    pub height: usize,
    pub ixx: Vec<f64>,
    pub ixy: Vec<f64>,
    pub iyy: Vec<f64>,
}

/// Scale-normalized (sigma^2 multiplier) Gaussian second derivatives.
///
/// The image is first blurred with a separable Gaussian (reflective
/// boundaries), then differentiated with central-difference stencils.
pub fn hessian_at_scale(img: &GrayImage, sigma: f64) -> Result<HessianField, VesselError> {
    if sigma < 0.5 {
        return Err(VesselError::SigmaTooSmall(sigma));
    }
    let blurred = gaussian_blur(img, sigma);
    let (w, h) = (img.width, img.height);
    let s2 = sigma * sigma;
    let refl = crate::image::reflect_index;
    let at = |x: isize, y: isize| blurred.get(refl(x, w), refl(y, h));
    let mut ixx = vec![0.0; w * h];
    let mut ixy = vec![0.0; w * h];
    let mut iyy = vec![0.0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            let c = at(x, y);
            ixx[i] = s2 * (at(x + 1, y) - 2.0 * c + at(x - 1, y));
            iyy[i] = s2 * (at(x, y + 1) - 2.0 * c + at(x, y - 1));
            ixy[i] = s2
                * 0.25
                * (at(x + 1, y + 1) - at(x - 1, y + 1) - at(x + 1, y - 1) + at(x - 1, y - 1));
        }
    }
    Ok(HessianField {
        width: w,
        height: h,
        ixx,
        ixy,
        iyy,
    })
}

/// Eigenvalues ordered by absolute value and the matching unit eigenvectors.
#[derive(Debug, Clone)]
pub struct EigenField {
    pub width: usize,
    pub height: usize,
    pub lambda1: Vec<f64>,
    pub lambda2: Vec<f64>,
    pub u1: Vec<[f64; 2]>,
    pub u2: Vec<[f64; 2]>,
}

/// Closed-form eigendecomposition of one symmetric 2x2 matrix
/// [[a, b], [b, c]]; returns ((lambda1, u1), (lambda2, u2)) with
/// |lambda1| <= |lambda2| and u1 perpendicular to u2.
pub fn eigen_symmetric_2x2(a: f64, b: f64, c: f64) -> ((f64, [f64; 2]), (f64, [f64; 2])) {
    let mean = 0.5 * (a + c);
    let diff = 0.5 * (a - c);
    let disc = (diff * diff + b * b).sqrt();
    let lo = mean - disc;
    let hi = mean + disc;
    let (l1, l2) = if lo.abs() <= hi.abs() { (lo, hi) } else { (hi, lo) };
    // eigenvector for l2: the larger of the two analytic candidates
    let cand_a = [b, l2 - a];
    let cand_b = [l2 - c, b];
    let na = cand_a[0] * cand_a[0] + cand_a[1] * cand_a[1];
    let nb = cand_b[0] * cand_b[0] + cand_b[1] * cand_b[1];
    let v = if na >= nb { cand_a } else { cand_b };
    let n = (v[0] * v[0] + v[1] * v[1]).sqrt();
    let u2 = if n < 1e-300 {
        // isotropic matrix, any orthonormal basis works
        [0.0, 1.0]
    } else {
        [v[0] / n, v[1] / n]
    };
    let u1 = [-u2[1], u2[0]];
    ((l1, u1), (l2, u2))
}

pub fn eigen2x2(h: &HessianField) -> EigenField {
    let n = h.width * h.height;
    let mut out = EigenField {
        width: h.width,
        height: h.height,
        lambda1: vec![0.0; n],
        lambda2: vec![0.0; n],
        u1: vec![[0.0; 2]; n],
        u2: vec![[0.0; 2]; n],
    };
    for i in 0..n {
        let ((l1, u1), (l2, u2)) = eigen_symmetric_2x2(h.ixx[i], h.ixy[i], h.iyy[i]);
        out.lambda1[i] = l1;
        out.lambda2[i] = l2;
        out.u1[i] = u1;
        out.u2[i] = u2;
    }
    out
}

fn response_from_eigen(l1: f64, l2: f64, params: &VesselnessParams) -> f64 {
    let wrong_sign = match params.polarity {
        Polarity::DarkOnBright => l2 <= 0.0,
        Polarity::BrightOnDark => l2 >= 0.0,
    };
    if wrong_sign {
        return 0.0;
    }
    let rb = l1 / l2;
    let s2 = l1 * l1 + l2 * l2;
    (-rb * rb / (2.0 * params.beta * params.beta)).exp()
        * (1.0 - (-s2 / (2.0 * params.c * params.c)).exp())
}

/// Raw per-pixel maximum response over scales plus the argmax sigma
/// (0 where the response is 0). No final rescaling.
pub fn vesselness_raw(
    img: &GrayImage,
    params: &VesselnessParams,
) -> Result<(GrayImage, GrayImage), VesselError> {
    params.validate()?;
    // beta/c defaults are calibrated for 0..255 intensities
    let scaled = GrayImage {
        width: img.width,
        height: img.height,
        data: img.data.iter().map(|&v| v * 255.0).collect(),
    };
    let mut best = GrayImage::new(img.width, img.height);
    let mut best_sigma = GrayImage::new(img.width, img.height);
    for &sigma in &params.scales {
        let h = hessian_at_scale(&scaled, sigma)?;
        let e = eigen2x2(&h);
        for i in 0..best.data.len() {
            let v = response_from_eigen(e.lambda1[i], e.lambda2[i], params);
            if v > best.data[i] {
                best.data[i] = v;
                best_sigma.data[i] = sigma;
            }
        }
    }
    Ok((best, best_sigma))
}

/// Multiscale vesselness: per-pixel maximum over scales, rescaled so the
/// strongest response maps to 1 (all-zero responses stay zero).
pub fn vesselness(img: &GrayImage, params: &VesselnessParams) -> Result<GrayImage, VesselError> {
    let (mut best, _) = vesselness_raw(img, params)?;
    let (_, hi) = best.min_max();
    if hi > 0.0 {
        for v in &mut best.data {
            *v /= hi;
        }
    }
    Ok(best)
}

/// Full enhancement pipeline: luminance, vesselness, additive blend
/// `clamp(gray + gain * vesselness, 0, 1)`.
pub fn enhance_frame(rgb: &RgbImage, params: &VesselnessParams) -> Result<GrayImage, VesselError> {
    let gray = rgb.luminance();
    enhance_gray(&gray, params)
}

/// Enhancement for an already grayscale frame.
pub fn enhance_gray(gray: &GrayImage, params: &VesselnessParams) -> Result<GrayImage, VesselError> {
    if params.gain == 0.0 {
        return Ok(gray.clone());
    }
    let v = vesselness(gray, params)?;
    let mut out = gray.clone();
    for (o, &vv) in out.data.iter_mut().zip(&v.data) {
        *o = (*o + params.gain * vv).clamp(0.0, 1.0);
    }
    Ok(out)
}
