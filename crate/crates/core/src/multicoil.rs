//! Walsh coil sensitivities, matched-filter combination and the multi-coil
//! single-step reconstruction.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;

use crate::denoiser::Denoiser;
use crate::error::{check_shape, Error, Result};
use crate::kspace::{apply_dc, zero_fill, ComplexImage, KSpaceData};
use crate::masks::SamplingMask;
use crate::sampler::{denoise_from_condition, Trace};
use crate::schedule::NoiseSchedule;

pub const DEFAULT_WINDOW: usize = 7;

fn check_coils(coils: &[ComplexImage]) -> Result<(usize, usize)> {
    let first = coils
        .first()
        .ok_or_else(|| Error::InvalidInput("at least one coil is required".into()))?;
    for c in &coils[1..] {
        check_shape(first.shape(), c.shape())?;
    }
    Ok(first.shape())
}

/// Per-coil complex weights, unit L2 norm across coils wherever defined.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityMaps {
    maps: Vec<ComplexImage>,
}

impl SensitivityMaps {
    pub fn new(maps: Vec<ComplexImage>) -> Result<Self> {
        check_coils(&maps)?;
        Ok(SensitivityMaps { maps })
    }

    pub fn n_coils(&self) -> usize {
        self.maps.len()
    }

    pub fn maps(&self) -> &[ComplexImage] {
        &self.maps
    }

    /// L2 norm across coils at one pixel.
    pub fn pixel_norm(&self, r: usize, c: usize) -> f64 {
        self.maps.iter().map(|m| m.get(r, c).norm_sqr()).sum::<f64>().sqrt()
    }
}

/// Dominant eigenvector of the local coil covariance, phase-referenced to
/// coil 0. Pixels whose window holds no signal get zero weight.
pub fn estimate_sensitivities(coils: &[ComplexImage], window: usize) -> Result<SensitivityMaps> {
    let (h, w) = check_coils(coils)?;
    if window == 0 || window.is_multiple_of(2) {
        return Err(Error::Parameter(format!("window must be odd and positive, got {window}")));
    }
    let nc = coils.len();
    let half = (window / 2) as isize;
    let pixels: Vec<Vec<Complex64>> = (0..h * w)
        .into_par_iter()
        .map(|p| {
            let (r, c) = ((p / w) as isize, (p % w) as isize);
            let mut cov = DMatrix::<Complex64>::zeros(nc, nc);
            for rr in (r - half).max(0)..=(r + half).min(h as isize - 1) {
                for cc in (c - half).max(0)..=(c + half).min(w as isize - 1) {
                    let idx = rr as usize * w + cc as usize;
                    for i in 0..nc {
                        let vi = coils[i].data()[idx];
                        for j in 0..nc {
                            cov[(i, j)] += vi * coils[j].data()[idx].conj();
                        }
                    }
                }
            }
            dominant_direction(cov)
        })
        .collect();
    let maps = (0..nc)
        .map(|k| ComplexImage::from_vec(h, w, pixels.iter().map(|v| v[k]).collect()))
        .collect::<Result<Vec<_>>>()?;
    Ok(SensitivityMaps { maps })
}

fn dominant_direction(cov: DMatrix<Complex64>) -> Vec<Complex64> {
    let nc = cov.nrows();
    let zero = Complex64::new(0.0, 0.0);
    let scale = (0..nc).map(|i| cov[(i, i)].re).sum::<f64>();
    if scale <= 0.0 || !scale.is_finite() {
        return vec![zero; nc];
    }
    if nc == 1 {
        return vec![Complex64::new(1.0, 0.0)];
    }
    let eig = (cov / Complex64::new(scale, 0.0)).symmetric_eigen();
    let k = eig.eigenvalues.imax();
    let mut u: Vec<Complex64> = eig.eigenvectors.column(k).iter().copied().collect();
    let reference = u[0];
    let phase = if reference.norm() > 0.0 {
        reference.conj() / reference.norm()
    } else {
        Complex64::new(1.0, 0.0)
    };
    let norm = u.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    u.iter_mut().for_each(|z| *z = *z * phase / norm);
    u
}

/// Matched-filter combination `sum_c conj(S_c) img_c`.
pub fn coil_combine(coils: &[ComplexImage], sens: &SensitivityMaps) -> Result<ComplexImage> {
    let (h, w) = check_coils(coils)?;
    if coils.len() != sens.n_coils() {
        return Err(Error::InvalidInput(format!(
            "{} coil images but {} sensitivity maps",
            coils.len(),
            sens.n_coils()
        )));
    }
    check_shape((h, w), sens.maps[0].shape())?;
    let mut out = ComplexImage::zeros(h, w);
    for (img, s) in coils.iter().zip(&sens.maps) {
        out = out.zip_map(&img.zip_map(s, |a, b| a * b.conj()), |acc, t| acc + t);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MulticoilOptions {
    pub window: usize,
    /// Re-estimate sensitivities from the data-consistent coil images before the final combination.
    pub reestimate: bool,
}

impl Default for MulticoilOptions {
    fn default() -> Self {
        MulticoilOptions {
            window: DEFAULT_WINDOW,
            reestimate: false,
        }
    }
}

/// Six-step multi-coil pipeline: zero-fill each coil, estimate sensitivities,
/// combine, denoise without data consistency, expand to coils with per-coil
/// data consistency, and combine again.
#[allow(clippy::too_many_arguments)]
pub fn multicoil_reconstruct(
    model: &dyn Denoiser,
    sched: &NoiseSchedule,
    t0: usize,
    per_coil_y: &[KSpaceData],
    mask: &SamplingMask,
    seed: u64,
    opts: MulticoilOptions,
    trace: &Trace,
) -> Result<ComplexImage> {
    if per_coil_y.is_empty() {
        return Err(Error::InvalidInput("at least one coil is required".into()));
    }
    for y in per_coil_y {
        check_shape(mask.shape(), y.shape())?;
    }
    let zero_filled = per_coil_y
        .iter()
        .map(|y| zero_fill(y, mask))
        .collect::<Result<Vec<_>>>()?;
    let sens = estimate_sensitivities(&zero_filled, opts.window)?;
    let x_cond = coil_combine(&zero_filled, &sens)?;
    let x_hat = denoise_from_condition(model, &x_cond, sched, t0, seed, trace)?;
    let consistent = sens
        .maps
        .iter()
        .zip(per_coil_y)
        .map(|(s, y)| apply_dc(&x_hat.zip_map(s, |a, b| a * b), y, mask))
        .collect::<Result<Vec<_>>>()?;
    if opts.reestimate {
        let refreshed = estimate_sensitivities(&consistent, opts.window)?;
        coil_combine(&consistent, &refreshed)
    } else {
        coil_combine(&consistent, &sens)
    }
}

/// Smooth synthetic sensitivities: coils placed on a ring around the image,
/// Gaussian falloff with a linear phase ramp, normalized per pixel.
pub fn synthetic_sensitivities(height: usize, width: usize, n_coils: usize) -> Result<SensitivityMaps> {
    if n_coils == 0 {
        return Err(Error::InvalidInput("at least one coil is required".into()));
    }
    let raw: Vec<ComplexImage> = (0..n_coils)
        .map(|k| {
            let ang = 2.0 * std::f64::consts::PI * k as f64 / n_coils as f64;
            let (cy, cx) = (1.2 * ang.sin(), 1.2 * ang.cos());
            ComplexImage::from_fn(height, width, |r, c| {
                let y = 2.0 * r as f64 / height as f64 - 1.0;
                let x = 2.0 * c as f64 / width as f64 - 1.0;
                let d2 = (x - cx).powi(2) + (y - cy).powi(2);
                Complex64::from_polar((-d2 / 2.0).exp(), 0.5 * (x * ang.cos() - y * ang.sin()) + 0.3 * k as f64)
            })
        })
        .collect();
    let norms: Vec<f64> = (0..height * width)
        .map(|i| raw.iter().map(|m| m.data()[i].norm_sqr()).sum::<f64>().sqrt())
        .collect();
    let maps = raw
        .into_iter()
        .map(|m| {
            let data = m.data().iter().zip(&norms).map(|(z, n)| z / n).collect();
            ComplexImage::from_vec(height, width, data)
        })
        .collect::<Result<Vec<_>>>()?;
    SensitivityMaps::new(maps)
}

/// Coil images `S_c x`.
pub fn apply_sensitivities(x: &ComplexImage, sens: &SensitivityMaps) -> Result<Vec<ComplexImage>> {
    sens.maps
        .iter()
        .map(|s| {
            check_shape(x.shape(), s.shape())?;
            Ok(x.zip_map(s, |a, b| a * b))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantoms::ellipse_phantom;

    #[test]
    fn single_coil_has_unit_sensitivity() {
        let x = ellipse_phantom(16, 3, 1, true).unwrap();
        let s = estimate_sensitivities(std::slice::from_ref(&x), 3).unwrap();
        for (z, v) in s.maps()[0].data().iter().zip(x.data()) {
            if v.norm() > 0.0 {
                assert_eq!(*z, Complex64::new(1.0, 0.0));
            }
        }
    }

    #[test]
    fn identical_coils_share_weight() {
        let x = ellipse_phantom(16, 3, 2, true).unwrap();
        let s = estimate_sensitivities(&[x.clone(), x.clone()], 5).unwrap();
        let w = 1.0 / 2f64.sqrt();
        for r in 4..12 {
            for c in 4..12 {
                for m in s.maps() {
                    assert!((m.get(r, c) - Complex64::new(w, 0.0)).norm() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn zero_window_gives_zero_weight() {
        let z = ComplexImage::zeros(8, 8);
        let s = estimate_sensitivities(&[z.clone(), z.clone()], 3).unwrap();
        assert!(s.maps().iter().all(|m| m.max_abs() == 0.0));
        assert!(estimate_sensitivities(std::slice::from_ref(&z), 4).is_err());
    }

    #[test]
    fn matched_filter_recovers_magnitude() {
        let x = ellipse_phantom(24, 4, 3, true).unwrap();
        let sens = synthetic_sensitivities(24, 24, 4).unwrap();
        let coils = apply_sensitivities(&x, &sens).unwrap();
        let combined = coil_combine(&coils, &sens).unwrap();
        for (a, b) in combined.data().iter().zip(x.data()) {
            assert!((a.norm() - b.norm()).abs() < 1e-12);
        }
        let zeros = vec![ComplexImage::zeros(24, 24); 4];
        assert_eq!(coil_combine(&zeros, &sens).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn global_phase_does_not_change_magnitude() {
        let x = ellipse_phantom(16, 4, 5, true).unwrap();
        let sens = synthetic_sensitivities(16, 16, 3).unwrap();
        let coils = apply_sensitivities(&x, &sens).unwrap();
        let rot = Complex64::from_polar(1.0, 1.1);
        let rotated: Vec<_> = coils.iter().map(|c| c.map(|z| z * rot)).collect();
        let a = coil_combine(&coils, &estimate_sensitivities(&coils, 7).unwrap()).unwrap();
        let b = coil_combine(&rotated, &estimate_sensitivities(&rotated, 7).unwrap()).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p.norm() - q.norm()).abs() < 1e-6);
        }
    }
}
