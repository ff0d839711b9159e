//! Scalar and RGB image buffers plus portable-pixmap serialization.
//!
//! Pipeline images keep intensities in [0,1]; test fixtures may hold
//! arbitrary finite values (for example analytic quadratics).

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad image file {path}: {reason}")]
    Format { path: String, reason: String },
    #[error("invalid parameter: {0}")]
    Parameter(String),
}

fn io_err(path: &Path, source: std::io::Error) -> ImageError {
    ImageError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn fmt_err(path: &Path, reason: impl Into<String>) -> ImageError {
    ImageError::Format {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

/// Row-major scalar image.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        GrayImage {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        GrayImage {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn min_max(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in &self.data {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }

    /// Bilinear sample at fractional pixel coordinates; `None` outside the
    /// valid interpolation domain.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> Option<f64> {
        if !(x >= 0.0 && y >= 0.0) {
            return None;
        }
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        if x0 + 1 >= self.width || y0 + 1 >= self.height {
            return None;
        }
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let v00 = self.get(x0, y0);
        let v10 = self.get(x0 + 1, y0);
        let v01 = self.get(x0, y0 + 1);
        let v11 = self.get(x0 + 1, y0 + 1);
        Some(v00 * (1.0 - fx) * (1.0 - fy) + v10 * fx * (1.0 - fy) + v01 * (1.0 - fx) * fy + v11 * fx * fy)
    }

    /// 2x2 box-average downsample (dimensions halve, rounding down).
    pub fn downsample_half(&self) -> GrayImage {
        let w = self.width / 2;
        let h = self.height / 2;
        GrayImage::from_fn(w, h, |x, y| {
            let (x2, y2) = (2 * x, 2 * y);
            0.25 * (self.get(x2, y2)
                + self.get(x2 + 1, y2)
                + self.get(x2, y2 + 1)
                + self.get(x2 + 1, y2 + 1))
        })
    }

    /// 90 degree counter-clockwise rotation (square or rectangular).
    pub fn rotate90_ccw(&self) -> GrayImage {
        GrayImage::from_fn(self.height, self.width, |x, y| {
            self.get(self.width - 1 - y, x)
        })
    }
}

/// Row-major 8-bit RGB image.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[u8; 3]>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        RgbImage {
            width,
            height,
            data: vec![[0, 0, 0]; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        RgbImage {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: [u8; 3]) {
        self.data[y * self.width + x] = v;
    }

    /// Rec. 601 luminance scaled to [0,1].
    pub fn luminance(&self) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .map(|p| {
                    (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64) / 255.0
                })
                .collect(),
        }
    }
}

/// Symmetric (edge-inclusive) boundary reflection into [0, n).
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    debug_assert!(n > 0);
    let period = 2 * n;
    let mut i = i % period;
    if i < 0 {
        i += period;
    }
    if i >= n {
        i = period - 1 - i;
    }
    i as usize
}

/// Sampled Gaussian kernel, truncated at 4 sigma and normalized to unit sum.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    assert!(sigma > 0.0, "sigma must be positive");
    let radius = (4.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    for v in &mut k {
        *v /= s;
    }
    k
}

/// Separable Gaussian blur with reflective boundary handling.
pub fn gaussian_blur(img: &GrayImage, sigma: f64) -> GrayImage {
    let k = gaussian_kernel(sigma);
    let radius = (k.len() / 2) as isize;
    let (w, h) = (img.width, img.height);
    // horizontal pass
    let mut tmp = GrayImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, &kv) in k.iter().enumerate() {
                let xi = reflect_index(x as isize + j as isize - radius, w);
                acc += kv * img.get(xi, y);
            }
            tmp.set(x, y, acc);
        }
    }
    // vertical pass
    let mut out = GrayImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, &kv) in k.iter().enumerate() {
                let yi = reflect_index(y as isize + j as isize - radius, h);
                acc += kv * tmp.get(x, yi);
            }
            out.set(x, y, acc);
        }
    }
    out
}

fn parse_pnm_header<'a>(
    bytes: &'a [u8],
    path: &Path,
) -> Result<(&'a [u8], usize, usize, u32, &'a [u8]), ImageError> {
    if bytes.len() < 2 {
        return Err(fmt_err(path, "truncated header"));
    }
    let magic = &bytes[..2];
    let mut rest = &bytes[2..];
    let mut fields = [0usize; 3];
    let mut got = 0;
    while got < 3 {
        // skip whitespace and comments
        loop {
            match rest.first() {
                Some(b) if b.is_ascii_whitespace() => rest = &rest[1..],
                Some(b'#') => {
                    let end = rest
                        .iter()
                        .position(|&b| b == b'\n')
                        .ok_or_else(|| fmt_err(path, "unterminated comment"))?;
                    rest = &rest[end + 1..];
                }
                _ => break,
            }
        }
        let end = rest
            .iter()
            .position(|b| b.is_ascii_whitespace())
            .ok_or_else(|| fmt_err(path, "truncated header"))?;
        let tok = std::str::from_utf8(&rest[..end])
            .map_err(|_| fmt_err(path, "non-ascii header token"))?;
        fields[got] = tok
            .parse()
            .map_err(|_| fmt_err(path, format!("bad header field '{tok}'")))?;
        got += 1;
        rest = &rest[end..];
    }
    // exactly one whitespace byte separates header from pixel data
    rest = &rest[1..];
    Ok((magic, fields[0], fields[1], fields[2] as u32, rest))
}

/// Write an 8-bit binary PGM; values are clamped from [0,1] to 0..=255.
pub fn write_pgm8(path: &Path, img: &GrayImage) -> Result<(), ImageError> {
    let f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(f);
    write!(w, "P5\n{} {}\n255\n", img.width, img.height).map_err(|e| io_err(path, e))?;
    let buf: Vec<u8> = img
        .data
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    w.write_all(&buf).map_err(|e| io_err(path, e))?;
    Ok(())
}

/// Write a 16-bit binary PGM (big-endian samples, netpbm convention).
pub fn write_pgm16(path: &Path, width: usize, height: usize, data: &[u16]) -> Result<(), ImageError> {
    assert_eq!(data.len(), width * height);
    let f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(f);
    write!(w, "P5\n{width} {height}\n65535\n").map_err(|e| io_err(path, e))?;
    let mut buf = Vec::with_capacity(data.len() * 2);
    for &v in data {
        buf.extend_from_slice(&v.to_be_bytes());
    }
    w.write_all(&buf).map_err(|e| io_err(path, e))?;
    Ok(())
}

pub enum PgmData {
    Bits8(Vec<u8>),
    Bits16(Vec<u16>),
}

/// Read a binary PGM (8- or 16-bit).
pub fn read_pgm(path: &Path) -> Result<(usize, usize, PgmData), ImageError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let (magic, width, height, maxval, rest) = parse_pnm_header(&bytes, path)?;
    if magic != b"P5" {
        return Err(fmt_err(path, "expected binary PGM magic P5"));
    }
    let n = width * height;
    if maxval <= 255 {
        if rest.len() < n {
            return Err(fmt_err(path, "truncated pixel data"));
        }
        Ok((width, height, PgmData::Bits8(rest[..n].to_vec())))
    } else {
        if rest.len() < 2 * n {
            return Err(fmt_err(path, "truncated pixel data"));
        }
        let data = rest[..2 * n]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect();
        Ok((width, height, PgmData::Bits16(data)))
    }
}

/// Read an 8-bit PGM as intensities in [0,1].
pub fn read_pgm8_gray(path: &Path) -> Result<GrayImage, ImageError> {
    let (width, height, data) = read_pgm(path)?;
    match data {
        PgmData::Bits8(d) => Ok(GrayImage {
            width,
            height,
            data: d.iter().map(|&v| v as f64 / 255.0).collect(),
        }),
        PgmData::Bits16(d) => Ok(GrayImage {
            width,
            height,
            data: d.iter().map(|&v| v as f64 / 65535.0).collect(),
        }),
    }
}

/// Write an 8-bit binary PPM.
pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<(), ImageError> {
    let f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(f);
    write!(w, "P6\n{} {}\n255\n", img.width, img.height).map_err(|e| io_err(path, e))?;
    let mut buf = Vec::with_capacity(img.data.len() * 3);
    for p in &img.data {
        buf.extend_from_slice(p);
    }
    w.write_all(&buf).map_err(|e| io_err(path, e))?;
    Ok(())
}

/// Read an 8-bit binary PPM.
pub fn read_ppm(path: &Path) -> Result<RgbImage, ImageError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let (magic, width, height, maxval, rest) = parse_pnm_header(&bytes, path)?;
    if magic != b"P6" {
        return Err(fmt_err(path, "expected binary PPM magic P6"));
    }
    if maxval != 255 {
        return Err(fmt_err(path, "only 8-bit PPM supported"));
    }
    let n = width * height * 3;
    if rest.len() < n {
        return Err(fmt_err(path, "truncated pixel data"));
    }
    let data = rest[..n]
        .chunks_exact(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect();
    Ok(RgbImage {
        width,
        height,
        data,
    })
}

/// Write a raw little-endian f64 dump with a one-line ASCII header.
pub fn write_raw_f64(path: &Path, img: &GrayImage) -> Result<(), ImageError> {
    let f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(f);
    write!(w, "R64 {} {}\n", img.width, img.height).map_err(|e| io_err(path, e))?;
    let mut buf = Vec::with_capacity(img.data.len() * 8);
    for &v in &img.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf).map_err(|e| io_err(path, e))?;
    Ok(())
}

pub fn read_raw_f64(path: &Path) -> Result<GrayImage, ImageError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| fmt_err(path, "missing header line"))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| fmt_err(path, "bad header"))?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some("R64") {
        return Err(fmt_err(path, "expected R64 magic"));
    }
    let width: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| fmt_err(path, "bad width"))?;
    let height: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| fmt_err(path, "bad height"))?;
    let body = &bytes[nl + 1..];
    let n = width * height;
    if body.len() < n * 8 {
        return Err(fmt_err(path, "truncated f64 data"));
    }
    let data = body[..n * 8]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(GrayImage {
        width,
        height,
        data,
    })
}
