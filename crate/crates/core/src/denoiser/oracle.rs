//! Exact posterior-mean denoiser for a linear-Gaussian toy problem.
//!
//! Images are treated as real vectors in channel layout `[re..., im...]`.
//! The prior is `N(mu, Sigma)`; each sampled k-space cell contributes two
//! real measurements (real and imaginary part of the centered unitary DFT)
//! with independent noise of standard deviation `noise_sd`.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::kspace::{fft2c, forward_model, ComplexImage, KSpaceData};
use crate::masks::SamplingMask;

#[derive(Debug, Clone)]
pub struct GaussianToyProblem {
    height: usize,
    width: usize,
    prior_mean: DVector<f64>,
    prior_cov: DMatrix<f64>,
    prior_chol: DMatrix<f64>,
    mask: SamplingMask,
    noise_sd: f64,
    forward: DMatrix<f64>,
}

impl GaussianToyProblem {
    pub fn new(
        mask: SamplingMask,
        prior_mean: Vec<f64>,
        prior_cov: DMatrix<f64>,
        noise_sd: f64,
    ) -> Result<Self> {
        let (height, width) = mask.shape();
        let n = 2 * height * width;
        if prior_mean.len() != n || prior_cov.shape() != (n, n) {
            return Err(Error::InvalidInput(format!(
                "prior must have dimension {n} for a {height}x{width} image"
            )));
        }
        if !(noise_sd >= 0.0 && noise_sd.is_finite()) {
            return Err(Error::Parameter(format!("noise_sd must be >= 0, got {noise_sd}")));
        }
        if (&prior_cov - prior_cov.transpose()).amax() > 1e-12 * prior_cov.amax().max(1.0) {
            return Err(Error::InvalidInput("prior covariance is not symmetric".into()));
        }
        let prior_chol = prior_cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::InvalidInput("prior covariance is not positive definite".into()))?
            .l();
        let forward = measurement_matrix(&mask)?;
        Ok(GaussianToyProblem {
            height,
            width,
            prior_mean: DVector::from_vec(prior_mean),
            prior_cov,
            prior_chol,
            mask,
            noise_sd,
            forward,
        })
    }

    /// A random instance: zero-mean-ish prior with a random well-conditioned covariance.
    pub fn random(mask: SamplingMask, noise_sd: f64, seed: u64) -> Result<Self> {
        let n = 2 * mask.height() * mask.width();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = || -> f64 { StandardNormal.sample(&mut rng) };
        let g = DMatrix::from_fn(n, n, |_, _| draw() / (n as f64).sqrt());
        let cov = &g * g.transpose() * 0.5 + DMatrix::identity(n, n) * 0.1;
        let cov = (&cov + cov.transpose()) * 0.5;
        let mean = (0..n).map(|_| 0.5 * draw()).collect();
        GaussianToyProblem::new(mask, mean, cov, noise_sd)
    }

    pub fn dim(&self) -> usize {
        2 * self.height * self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn mask(&self) -> &SamplingMask {
        &self.mask
    }

    pub fn noise_sd(&self) -> f64 {
        self.noise_sd
    }

    pub fn prior_mean(&self) -> &DVector<f64> {
        &self.prior_mean
    }

    pub fn prior_cov(&self) -> &DMatrix<f64> {
        &self.prior_cov
    }

    /// Real measurement operator, two rows per sampled cell in row-major cell order.
    pub fn forward_matrix(&self) -> &DMatrix<f64> {
        &self.forward
    }

    pub fn to_vector(&self, img: &ComplexImage) -> DVector<f64> {
        DVector::from_vec(img.to_channels())
    }

    pub fn to_image(&self, v: &DVector<f64>) -> Result<ComplexImage> {
        ComplexImage::from_channels(self.height, self.width, v.as_slice())
    }

    /// Stacks the sampled entries of `y` as `[re, im]` pairs, matching [`Self::forward_matrix`].
    pub fn measurement_vector(&self, y: &KSpaceData) -> Result<DVector<f64>> {
        crate::error::check_shape(self.shape(), y.shape())?;
        let mut out = Vec::with_capacity(self.forward.nrows());
        for (c, &m) in y.data().iter().zip(self.mask.cells()) {
            if m {
                out.push(c.re);
                out.push(c.im);
            }
        }
        Ok(DVector::from_vec(out))
    }

    pub fn sample_prior(&self, seed: u64) -> ComplexImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = DVector::from_fn(self.dim(), |_, _| StandardNormal.sample(&mut rng));
        let x = &self.prior_mean + &self.prior_chol * z;
        self.to_image(&x).expect("finite prior draw")
    }

    pub fn measure(&self, x0: &ComplexImage, seed: u64) -> Result<KSpaceData> {
        forward_model(x0, &self.mask, self.noise_sd, seed)
    }

    /// Gaussian conditioning of the prior on `z = B x + noise` with noise covariance `diag(r)`.
    fn condition(&self, b: &DMatrix<f64>, r: &DVector<f64>, z: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let sb = &self.prior_cov * b.transpose();
        let s = b * &sb + DMatrix::from_diagonal(r);
        let resid = z - b * &self.prior_mean;
        let (gain_resid, gain_bs) = match s.clone().cholesky() {
            Some(ch) => (ch.solve(&resid), ch.solve(&sb.transpose())),
            None => {
                let lu = s.lu();
                let a = lu
                    .solve(&resid)
                    .ok_or_else(|| Error::Degenerate("singular posterior system".into()))?;
                let c = lu
                    .solve(&sb.transpose())
                    .ok_or_else(|| Error::Degenerate("singular posterior system".into()))?;
                (a, c)
            }
        };
        let mean = &self.prior_mean + &sb * gain_resid;
        let cov = &self.prior_cov - &sb * gain_bs;
        Ok((mean, cov))
    }

    /// Posterior mean and covariance of `x0` given the measurements only.
    pub fn posterior(&self, y: &KSpaceData) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let z = self.measurement_vector(y)?;
        let r = DVector::from_element(z.len(), self.noise_sd * self.noise_sd);
        self.condition(&self.forward, &r, &z)
    }

    pub fn posterior_mean(&self, y: &KSpaceData) -> Result<ComplexImage> {
        let (m, _) = self.posterior(y)?;
        self.to_image(&m)
    }

    /// `E[x0 | y, x_t]` for `x_t = alpha x0 + sigma eps`.
    pub fn denoised_mean(&self, y: &KSpaceData, x_t: &ComplexImage, gamma_bar: f64) -> Result<ComplexImage> {
        crate::error::check_shape(self.shape(), x_t.shape())?;
        let alpha = gamma_bar.sqrt();
        let sigma2 = (1.0 - gamma_bar).max(0.0);
        let n = self.dim();
        let zy = self.measurement_vector(y)?;
        let m = zy.len();
        let mut b = DMatrix::zeros(m + n, n);
        b.rows_mut(0, m).copy_from(&self.forward);
        b.rows_mut(m, n).copy_from(&(DMatrix::identity(n, n) * alpha));
        let mut z = DVector::zeros(m + n);
        z.rows_mut(0, m).copy_from(&zy);
        z.rows_mut(m, n).copy_from(&self.to_vector(x_t));
        let mut r = DVector::from_element(m + n, sigma2);
        r.rows_mut(0, m).fill(self.noise_sd * self.noise_sd);
        let (mean, _) = self.condition(&b, &r, &z)?;
        self.to_image(&mean)
    }
}

fn measurement_matrix(mask: &SamplingMask) -> Result<DMatrix<f64>> {
    let (h, w) = mask.shape();
    let n = 2 * h * w;
    let rows = 2 * mask.sampled_count();
    let mut a = DMatrix::zeros(rows, n);
    let mut unit = vec![0.0; n];
    for j in 0..n {
        unit[j] = 1.0;
        let k = fft2c(&ComplexImage::from_channels(h, w, &unit)?)?;
        unit[j] = 0.0;
        let mut r = 0;
        for (c, &m) in k.data().iter().zip(mask.cells()) {
            if m {
                a[(r, j)] = c.re;
                a[(r + 1, j)] = c.im;
                r += 2;
            }
        }
    }
    Ok(a)
}

/// The analytic denoiser bound to one toy problem and one measurement.
/// Ignores the conditioning image and uses `y` directly.
#[derive(Debug, Clone)]
pub struct GaussianOracle {
    problem: GaussianToyProblem,
    y: KSpaceData,
}

impl GaussianOracle {
    pub fn new(problem: GaussianToyProblem, y: KSpaceData) -> Result<Self> {
        crate::error::check_shape(problem.shape(), y.shape())?;
        Ok(GaussianOracle { problem, y })
    }

    pub fn problem(&self) -> &GaussianToyProblem {
        &self.problem
    }

    pub fn measurements(&self) -> &KSpaceData {
        &self.y
    }

    pub fn predict_v(&self, x_t: &ComplexImage, gamma_bar: f64) -> Result<ComplexImage> {
        let sigma = (1.0 - gamma_bar).max(0.0).sqrt();
        if sigma == 0.0 {
            return Ok(ComplexImage::zeros(x_t.height(), x_t.width()));
        }
        let alpha = gamma_bar.sqrt();
        let x0 = self.problem.denoised_mean(&self.y, x_t, gamma_bar)?;
        Ok(x_t.lin_comb(alpha / sigma, &x0, -1.0 / sigma))
    }
}
