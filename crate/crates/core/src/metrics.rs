//! Image quality metrics on real-valued (typically magnitude) images.

use serde::{Deserialize, Serialize};

use crate::error::{check_shape, Error, Result};
use crate::kspace::ComplexImage;

/// Reported PSNR when the two images are identical.
pub const PSNR_SENTINEL: f64 = 99.99;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const HFEN_KERNEL: usize = 15;
pub const HFEN_SIGMA: f64 = 1.5;

#[derive(Debug, Clone, PartialEq)]
pub struct RealImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl RealImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::InvalidInput(format!(
                "{} values for a {height}x{width} image",
                data.len()
            )));
        }
        Ok(RealImage { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let data = (0..height * width).map(|i| f(i / width, i % width)).collect();
        RealImage { height, width, data }
    }

    /// Pixelwise complex modulus.
    pub fn magnitude(img: &ComplexImage) -> Self {
        RealImage {
            height: img.height(),
            width: img.width(),
            data: img.magnitude(),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.width + c]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        RealImage {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// `20 log10(max(ref) / rmse)`, or [`PSNR_SENTINEL`] for zero error.
pub fn psnr(reference: &RealImage, test: &RealImage) -> Result<f64> {
    check_shape(reference.shape(), test.shape())?;
    let peak = reference.max();
    if peak <= 0.0 {
        return Err(Error::Degenerate("reference peak must be positive for PSNR".into()));
    }
    let mse = reference
        .data
        .iter()
        .zip(&test.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / reference.data.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_SENTINEL);
    }
    Ok((20.0 * (peak / mse.sqrt()).log10()).min(PSNR_SENTINEL))
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let mut w = Vec::with_capacity(size * size);
    for a in &g {
        for b in &g {
            w.push(a * b);
        }
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Weighted local statistics over every fully contained window.
fn filter_valid(img: &[f64], h: usize, w: usize, kernel: &[f64], k: usize) -> Vec<f64> {
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            let mut acc = 0.0;
            for i in 0..k {
                let row = &img[(r + i) * w + c..(r + i) * w + c + k];
                for (x, kv) in row.iter().zip(&kernel[i * k..(i + 1) * k]) {
                    acc += x * kv;
                }
            }
            out[r * ow + c] = acc;
        }
    }
    out
}

/// Mean local SSIM with an 11x11 Gaussian window (sigma 1.5) over the valid region.
/// `data_range` defaults to `max(ref)`.
pub fn ssim(reference: &RealImage, test: &RealImage, k1: f64, k2: f64, data_range: Option<f64>) -> Result<f64> {
    check_shape(reference.shape(), test.shape())?;
    let (h, w) = reference.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidInput(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let l = data_range.unwrap_or_else(|| reference.max());
    let c1 = (k1 * l).powi(2);
    let c2 = (k2 * l).powi(2);
    let win = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let (x, y) = (&reference.data, &test.data);
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mu_x = filter_valid(x, h, w, &win, SSIM_WINDOW);
    let mu_y = filter_valid(y, h, w, &win, SSIM_WINDOW);
    let xx = filter_valid(&prod(x, x), h, w, &win, SSIM_WINDOW);
    let yy = filter_valid(&prod(y, y), h, w, &win, SSIM_WINDOW);
    let xy = filter_valid(&prod(x, y), h, w, &win, SSIM_WINDOW);
    let n = mu_x.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let vx = xx[i] - mx * mx;
            let vy = yy[i] - my * my;
            let cov = xy[i] - mx * my;
            ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / n as f64)
}

/// SSIM with `k1 = 0.01`, `k2 = 0.03`, `L = max(ref)`.
pub fn ssim_default(reference: &RealImage, test: &RealImage) -> Result<f64> {
    ssim(reference, test, 0.01, 0.03, None)
}

/// SSIM variant for signed susceptibility-like maps: `L = 1`, `k1 = 0.01`, `k2 = 0.001`.
pub fn xsim(reference: &RealImage, test: &RealImage) -> Result<f64> {
    ssim(reference, test, 0.01, 0.001, Some(1.0))
}

/// Zero-sum Laplacian-of-Gaussian kernel.
fn log_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let s2 = sigma * sigma;
    let mut g = Vec::with_capacity(size * size);
    let mut r2 = Vec::with_capacity(size * size);
    for i in 0..size {
        for j in 0..size {
            let d = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
            r2.push(d);
            g.push((-d / (2.0 * s2)).exp());
        }
    }
    let gs: f64 = g.iter().sum();
    let mut k: Vec<f64> = g.iter().zip(&r2).map(|(g, d)| g / gs * (d - 2.0 * s2) / (s2 * s2)).collect();
    let mean = k.iter().sum::<f64>() / k.len() as f64;
    k.iter_mut().for_each(|v| *v -= mean);
    k
}

/// Half-sample symmetric index reflection (`d c b a | a b c d | d c b a`).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

fn log_filter(img: &RealImage, kernel: &[f64], k: usize) -> Vec<f64> {
    let (h, w) = img.shape();
    let half = (k / 2) as isize;
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for i in 0..k {
                let rr = reflect(r as isize + i as isize - half, h);
                for j in 0..k {
                    let cc = reflect(c as isize + j as isize - half, w);
                    acc += img.data[rr * w + cc] * kernel[i * k + j];
                }
            }
            out[r * w + c] = acc;
        }
    }
    out
}

/// High-frequency error norm: relative L2 error after a 15x15 LoG filter (sigma 1.5).
pub fn hfen(reference: &RealImage, test: &RealImage) -> Result<f64> {
    check_shape(reference.shape(), test.shape())?;
    let kernel = log_kernel(HFEN_KERNEL, HFEN_SIGMA);
    let a = log_filter(reference, &kernel, HFEN_KERNEL);
    let b = log_filter(test, &kernel, HFEN_KERNEL);
    let denom = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let energy = reference.data.iter().map(|v| v * v).sum::<f64>().sqrt();
    if denom <= 1e-12 * energy {
        return Err(Error::Degenerate("reference has no high-frequency content".into()));
    }
    let num = a.iter().zip(&b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
    Ok(num / denom)
}

/// Names accepted by [`evaluate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Psnr,
    Ssim,
    Hfen,
    Xsim,
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "psnr" => Ok(Metric::Psnr),
            "ssim" => Ok(Metric::Ssim),
            "hfen" => Ok(Metric::Hfen),
            "xsim" => Ok(Metric::Xsim),
            other => Err(Error::InvalidInput(format!("unknown metric '{other}'"))),
        }
    }
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Psnr => "psnr",
            Metric::Ssim => "ssim",
            Metric::Hfen => "hfen",
            Metric::Xsim => "xsim",
        }
    }

    pub fn compute(self, reference: &RealImage, test: &RealImage) -> Result<f64> {
        match self {
            Metric::Psnr => psnr(reference, test),
            Metric::Ssim => ssim_default(reference, test),
            Metric::Hfen => hfen(reference, test),
            Metric::Xsim => xsim(reference, test),
        }
    }
}

/// Evaluates each metric on the magnitudes of two complex images.
pub fn evaluate(reference: &ComplexImage, test: &ComplexImage, metrics: &[Metric]) -> Result<Vec<(Metric, f64)>> {
    let (a, b) = (RealImage::magnitude(reference), RealImage::magnitude(test));
    metrics.iter().map(|&m| Ok((m, m.compute(&a, &b)?))).collect()
}
