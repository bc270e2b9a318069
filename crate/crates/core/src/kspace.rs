//! Complex image / k-space grids, centered orthonormal FFTs, the masked
//! acquisition model and projection data consistency.
//!
//! K-space is stored fftshifted: the DC bin sits at `(height / 2, width / 2)`.
//! Both transforms are unitary (`1/sqrt(N)` per axis), so the adjoint of the
//! acquisition operator is the inverse transform of the masked data.

use std::cell::RefCell;
use std::fmt;
use std::marker::PhantomData;
use std::ops::{Add, Mul, Sub};

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::FftPlanner;

use crate::error::{check_shape, Error, Result};
use crate::masks::SamplingMask;

/// Marker for the image domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Image;

/// Marker for the frequency domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Frequency;

/// Domain tag carried by [`Grid`].
pub trait Domain: Copy + fmt::Debug + PartialEq + Send + Sync + 'static {
    const NAME: &'static str;
}

impl Domain for Image {
    const NAME: &'static str = "image";
}

impl Domain for Frequency {
    const NAME: &'static str = "kspace";
}

/// A row-major 2D complex array tagged with its domain.
#[derive(Clone, PartialEq)]
pub struct Grid<D: Domain> {
    height: usize,
    width: usize,
    data: Vec<Complex64>,
    _domain: PhantomData<D>,
}

/// Image-domain complex array (the reconstruction target).
pub type ComplexImage = Grid<Image>;
/// Frequency-domain complex array (measurements).
pub type KSpaceData = Grid<Frequency>;

impl<D: Domain> fmt::Debug for Grid<D> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Grid")
            .field("domain", &D::NAME)
            .field("height", &self.height)
            .field("width", &self.width)
            .finish_non_exhaustive()
    }
}

impl<D: Domain> Grid<D> {
    pub fn zeros(height: usize, width: usize) -> Self {
        Grid {
            height,
            width,
            data: vec![Complex64::new(0.0, 0.0); height * width],
            _domain: PhantomData,
        }
    }

    /// Wraps row-major data, checking the length and finiteness invariants.
    pub fn from_vec(height: usize, width: usize, data: Vec<Complex64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidInput(format!(
                "grid dimensions must be positive, got {height}x{width}"
            )));
        }
        if data.len() != height * width {
            return Err(Error::InvalidInput(format!(
                "data length {} does not match {height}x{width}",
                data.len()
            )));
        }
        let grid = Grid {
            height,
            width,
            data,
            _domain: PhantomData,
        };
        grid.ensure_finite()?;
        Ok(grid)
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> Complex64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Grid {
            height,
            width,
            data,
            _domain: PhantomData,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<Complex64> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> Complex64 {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: Complex64) {
        self.data[row * self.width + col] = value;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    pub fn ensure_finite(&self) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!(
                "non-finite values in {} grid",
                D::NAME
            )))
        }
    }

    /// Euclidean norm over all entries.
    pub fn norm(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    pub fn norm_sqr(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    /// Largest entrywise modulus of `self - other`.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape(), other.shape(), "shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    /// `||self - other|| / ||other||`.
    pub fn relative_error(&self, reference: &Self) -> f64 {
        let diff: f64 = self
            .data
            .iter()
            .zip(&reference.data)
            .map(|(a, b)| (a - b).norm_sqr())
            .sum();
        (diff / reference.norm_sqr()).sqrt()
    }

    pub fn magnitude(&self) -> Vec<f64> {
        self.data.iter().map(|z| z.norm()).collect()
    }

    pub fn map(&self, f: impl Fn(Complex64) -> Complex64) -> Self {
        Grid {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&z| f(z)).collect(),
            _domain: PhantomData,
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(Complex64, Complex64) -> Complex64) -> Self {
        assert_eq!(self.shape(), other.shape(), "shape mismatch");
        Grid {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            _domain: PhantomData,
        }
    }

    /// `a * self + b * other`.
    pub fn lin_comb(&self, a: f64, other: &Self, b: f64) -> Self {
        self.zip_map(other, |x, y| x * a + y * b)
    }

    pub fn scale(&self, factor: f64) -> Self {
        self.map(|z| z * factor)
    }

    pub fn check_same_shape<E: Domain>(&self, other: &Grid<E>) -> Result<()> {
        check_shape(self.shape(), other.shape())
    }

    /// Splits into `[re..., im...]` channel planes.
    pub fn to_channels(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(2 * self.len());
        out.extend(self.data.iter().map(|z| z.re));
        out.extend(self.data.iter().map(|z| z.im));
        out
    }

    /// Inverse of [`Grid::to_channels`].
    pub fn from_channels(height: usize, width: usize, channels: &[f64]) -> Result<Self> {
        let n = height * width;
        if channels.len() != 2 * n {
            return Err(Error::InvalidInput(format!(
                "expected {} channel values, got {}",
                2 * n,
                channels.len()
            )));
        }
        let data = (0..n)
            .map(|i| Complex64::new(channels[i], channels[n + i]))
            .collect();
        Self::from_vec(height, width, data)
    }

    fn retag<E: Domain>(self) -> Grid<E> {
        Grid {
            height: self.height,
            width: self.width,
            data: self.data,
            _domain: PhantomData,
        }
    }
}

impl<D: Domain> Add for &Grid<D> {
    type Output = Grid<D>;
    fn add(self, rhs: Self) -> Grid<D> {
        self.zip_map(rhs, |a, b| a + b)
    }
}

impl<D: Domain> Sub for &Grid<D> {
    type Output = Grid<D>;
    fn sub(self, rhs: Self) -> Grid<D> {
        self.zip_map(rhs, |a, b| a - b)
    }
}

impl<D: Domain> Mul<f64> for &Grid<D> {
    type Output = Grid<D>;
    fn mul(self, rhs: f64) -> Grid<D> {
        self.scale(rhs)
    }
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// Moves index `i` of an `n`-long axis to its shifted position. `inverse`
/// selects ifftshift, which differs from fftshift only for odd `n`.
fn shift_index(i: usize, n: usize, inverse: bool) -> usize {
    let s = if inverse { n.div_ceil(2) } else { n / 2 };
    (i + s) % n
}

fn shift2(data: &[Complex64], h: usize, w: usize, inverse: bool) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); data.len()];
    for r in 0..h {
        let rr = shift_index(r, h, inverse);
        for c in 0..w {
            let cc = shift_index(c, w, inverse);
            out[rr * w + cc] = data[r * w + c];
        }
    }
    out
}

/// In-place unnormalized 2D DFT over rows then columns.
fn dft2_inplace(data: &mut [Complex64], h: usize, w: usize, inverse: bool) {
    PLANNER.with(|planner| {
        let mut planner = planner.borrow_mut();
        let row_fft = if inverse {
            planner.plan_fft_inverse(w)
        } else {
            planner.plan_fft_forward(w)
        };
        let col_fft = if inverse {
            planner.plan_fft_inverse(h)
        } else {
            planner.plan_fft_forward(h)
        };
        for row in data.chunks_exact_mut(w) {
            row_fft.process(row);
        }
        let mut column = vec![Complex64::new(0.0, 0.0); h];
        for c in 0..w {
            for r in 0..h {
                column[r] = data[r * w + c];
            }
            col_fft.process(&mut column);
            for r in 0..h {
                data[r * w + c] = column[r];
            }
        }
    });
}

fn centered_transform(data: &[Complex64], h: usize, w: usize, inverse: bool) -> Vec<Complex64> {
    // ifftshift -> DFT -> fftshift
    let mut buf = shift2(data, h, w, true);
    dft2_inplace(&mut buf, h, w, inverse);
    let mut out = shift2(&buf, h, w, false);
    let scale = 1.0 / ((h * w) as f64).sqrt();
    for z in &mut out {
        *z *= scale;
    }
    out
}

/// Unitary centered 2D DFT.
pub fn fft2c(img: &ComplexImage) -> Result<KSpaceData> {
    img.ensure_finite()?;
    let (h, w) = img.shape();
    let data = centered_transform(img.data(), h, w, false);
    Ok(Grid {
        height: h,
        width: w,
        data,
        _domain: PhantomData,
    })
}

/// Unitary centered inverse 2D DFT.
pub fn ifft2c(k: &KSpaceData) -> Result<ComplexImage> {
    k.ensure_finite()?;
    let (h, w) = k.shape();
    let data = centered_transform(k.data(), h, w, true);
    Ok(Grid {
        height: h,
        width: w,
        data,
        _domain: PhantomData,
    })
}

/// Masked acquisition `y = M . F x + noise`.
///
/// Noise is i.i.d. Gaussian with standard deviation `noise_sd` on each of
/// the real and imaginary parts, drawn in row-major order at sampled cells only.
pub fn forward_model(
    x: &ComplexImage,
    mask: &SamplingMask,
    noise_sd: f64,
    seed: u64,
) -> Result<KSpaceData> {
    check_shape(x.shape(), mask.shape())?;
    if !(noise_sd >= 0.0 && noise_sd.is_finite()) {
        return Err(Error::Parameter(format!(
            "noise_sd must be finite and non-negative, got {noise_sd}"
        )));
    }
    let mut k = fft2c(x)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise_sd.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Parameter(e.to_string()))?;
    for (z, &sampled) in k.data.iter_mut().zip(mask.cells()) {
        if !sampled {
            *z = Complex64::new(0.0, 0.0);
        } else if noise_sd > 0.0 {
            *z += Complex64::new(normal.sample(&mut rng), normal.sample(&mut rng));
        }
    }
    Ok(k)
}

/// Zero-filled reconstruction `A^H y`, the conditioning image.
pub fn zero_fill(y: &KSpaceData, mask: &SamplingMask) -> Result<ComplexImage> {
    check_shape(y.shape(), mask.shape())?;
    ifft2c(y)
}

/// Replaces the k-space of `x0` with `y` at sampled locations.
pub fn apply_dc(x0: &ComplexImage, y: &KSpaceData, mask: &SamplingMask) -> Result<ComplexImage> {
    check_shape(x0.shape(), y.shape())?;
    check_shape(x0.shape(), mask.shape())?;
    let mut k = fft2c(x0)?;
    for ((z, &yk), &sampled) in k.data.iter_mut().zip(y.data()).zip(mask.cells()) {
        if sampled {
            *z = yk;
        }
    }
    ifft2c(&k)
}

/// Projects an image-domain residual onto the unsampled k-space subspace,
/// i.e. applies `F^H (1 - M) F`. This is the Jacobian of [`apply_dc`] in `x0`.
pub fn project_unsampled(r: &ComplexImage, mask: &SamplingMask) -> Result<ComplexImage> {
    check_shape(r.shape(), mask.shape())?;
    let mut k = fft2c(r)?;
    for (z, &sampled) in k.data.iter_mut().zip(mask.cells()) {
        if sampled {
            *z = Complex64::new(0.0, 0.0);
        }
    }
    ifft2c(&k)
}

/// Divides by the maximum magnitude. Returns the normalized image and the scale.
pub fn normalize(img: &ComplexImage) -> Result<(ComplexImage, f64)> {
    img.ensure_finite()?;
    let scale = img.max_abs();
    if scale == 0.0 {
        return Err(Error::Degenerate("cannot normalize an all-zero image".into()));
    }
    let mut out = img.map(|z| z / scale);
    // Pin the peak to exactly 1 against division rounding.
    if let Some(peak) = out
        .data
        .iter_mut()
        .max_by(|a, b| a.norm().total_cmp(&b.norm()))
    {
        let m = peak.norm();
        if m != 1.0 {
            *peak /= m;
        }
    }
    Ok((out, scale))
}

impl KSpaceData {
    /// Reinterprets raw data as k-space without a transform.
    pub fn from_image_layout(img: ComplexImage) -> Self {
        img.retag()
    }
}

impl ComplexImage {
    /// Reinterprets raw data as an image without a transform.
    pub fn from_kspace_layout(k: KSpaceData) -> Self {
        k.retag()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masks::SamplingMask;
    use rand::Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> ComplexImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ComplexImage::from_fn(h, w, |_, _| {
            Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        })
    }

    /// Direct O(N^2) centered DFT used as an independent reference.
    fn direct_centered_dft(img: &ComplexImage) -> Vec<Complex64> {
        let (h, w) = img.shape();
        let (ch, cw) = (h / 2, w / 2);
        let norm = 1.0 / ((h * w) as f64).sqrt();
        let mut out = vec![Complex64::new(0.0, 0.0); h * w];
        for ku in 0..h {
            for kv in 0..w {
                let mut acc = Complex64::new(0.0, 0.0);
                for r in 0..h {
                    for c in 0..w {
                        let phase = -2.0 * std::f64::consts::PI
                            * ((ku as f64 - ch as f64) * (r as f64 - ch as f64) / h as f64
                                + (kv as f64 - cw as f64) * (c as f64 - cw as f64) / w as f64);
                        acc += img.get(r, c) * Complex64::from_polar(1.0, phase);
                    }
                }
                out[ku * w + kv] = acc * norm;
            }
        }
        out
    }

    #[test]
    fn zero_image_has_zero_kspace() {
        let k = fft2c(&ComplexImage::zeros(4, 4)).unwrap();
        assert!(k.data().iter().all(|z| z.norm() == 0.0));
        let x = ifft2c(&KSpaceData::zeros(4, 4)).unwrap();
        assert!(x.data().iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn constant_image_concentrates_at_dc() {
        let n = 8;
        let c = Complex64::new(0.7, -0.2);
        let k = fft2c(&ComplexImage::from_fn(n, n, |_, _| c)).unwrap();
        let reference = direct_centered_dft(&ComplexImage::from_fn(n, n, |_, _| c));
        for r in 0..n {
            for col in 0..n {
                let expected = if (r, col) == (n / 2, n / 2) {
                    c * n as f64
                } else {
                    Complex64::new(0.0, 0.0)
                };
                assert!((k.get(r, col) - expected).norm() < 1e-12);
                assert!((reference[r * n + col] - expected).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn dc_impulse_inverts_to_constant() {
        let n = 6;
        let mut k = KSpaceData::zeros(n, n);
        k.set(n / 2, n / 2, Complex64::new(n as f64, 0.0));
        let x = ifft2c(&k).unwrap();
        for z in x.data() {
            assert!((z - Complex64::new(1.0, 0.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn matches_direct_dft_for_odd_and_even_sizes() {
        for &(h, w) in &[(4, 4), (5, 3), (6, 7)] {
            let x = random_image(h, w, 11);
            let k = fft2c(&x).unwrap();
            let reference = direct_centered_dft(&x);
            for (a, b) in k.data().iter().zip(&reference) {
                assert!((a - b).norm() < 1e-10, "{h}x{w}");
            }
            let back = ifft2c(&k).unwrap();
            assert!(back.max_abs_diff(&x) < 1e-12);
        }
    }

    #[test]
    fn round_trip_is_identity() {
        let x = random_image(8, 8, 3);
        let back = ifft2c(&fft2c(&x).unwrap()).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-6);
        let k = KSpaceData::from_image_layout(random_image(8, 8, 4));
        let again = fft2c(&ifft2c(&k).unwrap()).unwrap();
        assert!(again.max_abs_diff(&k) < 1e-6);
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let mut x = ComplexImage::zeros(4, 4);
        x.set(1, 1, Complex64::new(f64::NAN, 0.0));
        assert!(matches!(fft2c(&x), Err(Error::InvalidInput(_))));
        assert!(ComplexImage::from_vec(1, 1, vec![Complex64::new(f64::INFINITY, 0.0)]).is_err());
    }

    #[test]
    fn forward_model_full_mask_is_fft() {
        let x = random_image(8, 8, 5);
        let y = forward_model(&x, &SamplingMask::full(8, 8), 0.0, 1).unwrap();
        assert_eq!(y, fft2c(&x).unwrap());
    }

    #[test]
    fn forward_model_dc_only_mask() {
        let x = random_image(8, 8, 6);
        let mut cells = vec![false; 64];
        cells[4 * 8 + 4] = true;
        let mask = SamplingMask::from_cells(8, 8, cells).unwrap();
        let y = forward_model(&x, &mask, 0.0, 1).unwrap();
        // Masked-DFT oracle: the DC bin is the scaled pixel sum.
        let sum: Complex64 = x.data().iter().sum();
        for (i, z) in y.data().iter().enumerate() {
            if i == 36 {
                assert!((z - sum / 8.0).norm() < 1e-12);
            } else {
                assert_eq!(z.norm(), 0.0);
            }
        }
    }

    #[test]
    fn forward_model_noise_is_seeded_and_confined() {
        let x = random_image(8, 8, 7);
        let cells: Vec<bool> = (0..64).map(|i| i % 8 < 4).collect();
        let mask = SamplingMask::from_cells(8, 8, cells).unwrap();
        let a = forward_model(&x, &mask, 0.1, 42).unwrap();
        let b = forward_model(&x, &mask, 0.1, 42).unwrap();
        let c = forward_model(&x, &mask, 0.1, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        for (z, &s) in a.data().iter().zip(mask.cells()) {
            if !s {
                assert_eq!(z.norm(), 0.0);
            }
        }
        assert!(forward_model(&x, &SamplingMask::full(4, 4), 0.0, 0).is_err());
    }

    #[test]
    fn zero_fill_of_full_sampling_recovers_image() {
        let x = random_image(8, 8, 8);
        let m = SamplingMask::full(8, 8);
        let y = forward_model(&x, &m, 0.0, 0).unwrap();
        assert!(zero_fill(&y, &m).unwrap().max_abs_diff(&x) < 1e-6);
        let z = zero_fill(&KSpaceData::zeros(8, 8), &m).unwrap();
        assert_eq!(z.max_abs(), 0.0);
    }

    #[test]
    fn dc_edge_masks() {
        let x0 = random_image(8, 8, 9);
        let truth = random_image(8, 8, 10);
        let full = SamplingMask::full(8, 8);
        let y = forward_model(&truth, &full, 0.0, 0).unwrap();
        let out = apply_dc(&x0, &y, &full).unwrap();
        assert!(out.max_abs_diff(&ifft2c(&y).unwrap()) < 1e-12);

        let none = SamplingMask::from_cells_unchecked(8, 8, vec![false; 64]);
        let out = apply_dc(&x0, &KSpaceData::zeros(8, 8), &none).unwrap();
        assert!(out.max_abs_diff(&x0) < 1e-12);
    }

    #[test]
    fn normalize_scales_to_unit_peak() {
        let x = ComplexImage::from_fn(4, 4, |r, c| {
            Complex64::from_polar(2.0 * (r * 4 + c) as f64 / 15.0, 0.3 * r as f64)
        });
        let (out, scale) = normalize(&x).unwrap();
        assert_eq!(scale, 2.0);
        assert_eq!(out.max_abs(), 1.0);
        for (a, b) in out.data().iter().zip(x.data()) {
            if b.norm() > 0.0 {
                assert!((a.arg() - b.arg()).abs() < 1e-12);
            }
        }
        let (same, s1) = normalize(&out).unwrap();
        assert_eq!(s1, 1.0);
        assert!(same.max_abs_diff(&out) < 1e-15);
        assert!(matches!(
            normalize(&ComplexImage::zeros(3, 3)),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn zero_fill_aliases_under_gaussian_1d() {
        use crate::masks::{make_mask, MaskKind, MaskSpec};
        let x = ComplexImage::from_fn(32, 32, |r, c| {
            let (u, v) = (r as f64 - 16.0, c as f64 - 16.0);
            let e1 = (u / 12.0).powi(2) + (v / 9.0).powi(2) <= 1.0;
            let e2 = ((u - 2.0) / 4.0).powi(2) + ((v + 3.0) / 3.0).powi(2) <= 1.0;
            Complex64::new(0.5 * e1 as u8 as f64 + 0.5 * e2 as u8 as f64, 0.0)
        });
        let spec = MaskSpec::new(MaskKind::Gaussian1d, 4.0, 4, 1);
        let mask = make_mask(&spec, 32, 32).unwrap();
        let y = forward_model(&x, &mask, 0.0, 0).unwrap();
        let zf = zero_fill(&y, &mask).unwrap();
        assert!(zf.relative_error(&x) > 0.05);
    }
}
