//! Random ellipse phantoms and simulated undersampled acquisitions.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kspace::{forward_model, normalize, zero_fill, ComplexImage, KSpaceData};
use crate::masks::{make_mask, MaskSpec, SamplingMask};

pub const MIN_PHANTOM_SIZE: usize = 16;

/// Sum of random ellipses with intensities in `[0.2, 1]`, normalized to unit
/// peak magnitude. The first ellipse is a large body; the rest sit inside it.
/// `with_phase` multiplies by a smooth quadratic phase bounded by `pi`.
pub fn ellipse_phantom(size: usize, n_ellipses: usize, seed: u64, with_phase: bool) -> Result<ComplexImage> {
    if size < MIN_PHANTOM_SIZE {
        return Err(Error::InvalidInput(format!(
            "phantom size must be at least {MIN_PHANTOM_SIZE}, got {size}"
        )));
    }
    if n_ellipses == 0 {
        return Err(Error::Degenerate("a phantom needs at least one ellipse".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ellipses = Vec::with_capacity(n_ellipses);
    ellipses.push(Ellipse {
        cx: rng.random_range(-0.05..0.05),
        cy: rng.random_range(-0.05..0.05),
        a: rng.random_range(0.6..0.85),
        b: rng.random_range(0.45..0.75),
        theta: rng.random_range(0.0..PI),
        value: rng.random_range(0.2..1.0),
    });
    for _ in 1..n_ellipses {
        let r = rng.random_range(0.0..0.45);
        let ang = rng.random_range(0.0..2.0 * PI);
        ellipses.push(Ellipse {
            cx: r * ang.cos(),
            cy: r * ang.sin(),
            a: rng.random_range(0.05..0.3),
            b: rng.random_range(0.05..0.3),
            theta: rng.random_range(0.0..PI),
            value: rng.random_range(0.2..1.0),
        });
    }
    let coeffs: [f64; 6] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
    let phase_peak = rng.random_range(0.3..1.0) * PI;

    let coord = |i: usize| (2.0 * i as f64 + 1.0) / size as f64 - 1.0;
    let mut mag = vec![0.0; size * size];
    let mut phase = vec![0.0; size * size];
    for r in 0..size {
        for c in 0..size {
            let (x, y) = (coord(c), coord(r));
            mag[r * size + c] = ellipses.iter().filter(|e| e.contains(x, y)).map(|e| e.value).sum();
            phase[r * size + c] =
                coeffs[0] + coeffs[1] * x + coeffs[2] * y + coeffs[3] * x * y + coeffs[4] * x * x + coeffs[5] * y * y;
        }
    }
    let peak = phase.iter().fold(0.0f64, |m, p| m.max(p.abs())).max(1e-12);
    let data = mag
        .iter()
        .zip(&phase)
        .map(|(&m, &p)| {
            if with_phase {
                Complex64::from_polar(m, p / peak * phase_peak)
            } else {
                Complex64::new(m, 0.0)
            }
        })
        .collect();
    let img = ComplexImage::from_vec(size, size, data)?;
    Ok(normalize(&img)?.0)
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    theta: f64,
    value: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.theta.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (c * dx + s * dy) / self.a;
        let v = (-s * dx + c * dy) / self.b;
        u * u + v * v <= 1.0
    }
}

/// Phantom corpus with per-image seeds derived from `seed`.
pub fn phantom_set(count: usize, size: usize, seed: u64, with_phase: bool) -> Result<Vec<ComplexImage>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let n = rng.random_range(3..=8);
            ellipse_phantom(size, n, crate::derive_seed(seed, i as u64), with_phase)
        })
        .collect()
}

/// A simulated acquisition of one ground-truth image.
#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub x_cond: ComplexImage,
    pub y: KSpaceData,
    pub mask: SamplingMask,
    pub x0: ComplexImage,
}

/// Draws a mask from `spec` re-seeded with `seed`, measures `x0` and zero-fills.
pub fn make_training_pair(x0: &ComplexImage, spec: &MaskSpec, noise_sd: f64, seed: u64) -> Result<TrainingPair> {
    let mask = make_mask(&spec.with_seed(crate::derive_seed(seed, 0)), x0.height(), x0.width())?;
    let y = forward_model(x0, &mask, noise_sd, crate::derive_seed(seed, 1))?;
    let x_cond = zero_fill(&y, &mask)?;
    Ok(TrainingPair {
        x_cond,
        y,
        mask,
        x0: x0.clone(),
    })
}
