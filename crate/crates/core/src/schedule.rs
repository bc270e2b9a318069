//! Cosine noise schedule and the diffusion algebra built on it.
//!
//! A schedule stores the cumulative signal level `gamma_bar[t]` for
//! `t = 0..=T`. Everything else derives from it:
//! `alpha_t = sqrt(gamma_bar[t])`, `sigma_t = sqrt(1 - gamma_bar[t])`,
//! `x_t = alpha_t x0 + sigma_t eps` and `v = alpha_t eps - sigma_t x0`.

use std::f64::consts::FRAC_PI_2;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_shape, Error, Result};
use crate::kspace::ComplexImage;

/// Floor applied to `gamma_bar[T]` so that `sigma_T < 1` and `alpha_T > 0`.
pub const GAMMA_BAR_FLOOR: f64 = 1e-8;

/// How the cosine law is turned into cumulative levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CosineLaw {
    /// `gamma_bar[t] = cos^2(pi/2 * t/T)`.
    #[default]
    Cumulative,
    /// `gamma_bar[t] = prod_{i<=t} cos^2(pi/2 * i/T)`.
    Product,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    gamma_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Wraps an explicit level table, checking the invariants.
    pub fn from_gamma_bar(gamma_bar: Vec<f64>) -> Result<Self> {
        if gamma_bar.len() < 2 {
            return Err(Error::Parameter("schedule needs at least one step".into()));
        }
        if gamma_bar[0] != 1.0 {
            return Err(Error::Parameter(format!(
                "gamma_bar[0] must be 1, got {}",
                gamma_bar[0]
            )));
        }
        if gamma_bar.windows(2).any(|w| !(w[1] < w[0])) {
            return Err(Error::Parameter("gamma_bar must be strictly decreasing".into()));
        }
        if gamma_bar.iter().any(|&g| !(0.0..=1.0).contains(&g)) {
            return Err(Error::Parameter("gamma_bar must lie in [0, 1]".into()));
        }
        Ok(NoiseSchedule { gamma_bar })
    }

    /// Number of reverse steps `T`.
    pub fn steps(&self) -> usize {
        self.gamma_bar.len() - 1
    }

    pub fn gamma_bar(&self, t: usize) -> f64 {
        self.gamma_bar[t]
    }

    pub fn gamma_bars(&self) -> &[f64] {
        &self.gamma_bar
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.gamma_bar[t].sqrt()
    }

    pub fn sigma(&self, t: usize) -> f64 {
        (1.0 - self.gamma_bar[t]).sqrt()
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            Err(Error::InvalidStep(format!(
                "t = {t} outside schedule range 0..={}",
                self.steps()
            )))
        } else {
            Ok(())
        }
    }

    /// Default shortcut start point `T/8`, at least 1.
    pub fn default_t0(&self) -> usize {
        (self.steps() / 8).max(1)
    }
}

/// Cosine schedule with `T` steps; `T` must be a power of two.
pub fn make_cosine_schedule(steps: usize) -> Result<NoiseSchedule> {
    make_cosine_schedule_with(steps, CosineLaw::Cumulative)
}

pub fn make_cosine_schedule_with(steps: usize, law: CosineLaw) -> Result<NoiseSchedule> {
    if steps == 0 || !steps.is_power_of_two() {
        return Err(Error::Parameter(format!(
            "T must be a positive power of two, got {steps}"
        )));
    }
    let level = |t: usize| (FRAC_PI_2 * t as f64 / steps as f64).cos().powi(2);
    let mut gamma_bar = Vec::with_capacity(steps + 1);
    gamma_bar.push(1.0);
    let mut running = 1.0;
    for t in 1..=steps {
        let g = match law {
            CosineLaw::Cumulative => level(t),
            CosineLaw::Product => {
                running *= level(t);
                running
            }
        };
        gamma_bar.push(g.clamp(GAMMA_BAR_FLOOR, 1.0));
    }
    // Clamping can flatten the tail of the product law; keep it strictly decreasing.
    for t in 1..=steps {
        if gamma_bar[t] >= gamma_bar[t - 1] {
            gamma_bar[t] = gamma_bar[t - 1] * 0.5;
        }
    }
    NoiseSchedule::from_gamma_bar(gamma_bar)
}

/// Keeps every second level: `gamma_bar'[t] = gamma_bar[2t]`.
pub fn halve_schedule(sched: &NoiseSchedule) -> Result<NoiseSchedule> {
    let steps = sched.steps();
    if !steps.is_multiple_of(2) {
        return Err(Error::Parameter(format!("cannot halve an odd grid of {steps} steps")));
    }
    NoiseSchedule::from_gamma_bar(sched.gamma_bar.iter().step_by(2).copied().collect())
}

/// Standard complex normal noise with unit variance per real channel.
pub fn sample_noise(height: usize, width: usize, seed: u64) -> ComplexImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || -> f64 { StandardNormal.sample(&mut rng) };
    let mut data = Vec::with_capacity(height * width);
    for _ in 0..height * width {
        let re = draw();
        let im = draw();
        data.push(Complex64::new(re, im));
    }
    ComplexImage::from_vec(height, width, data).expect("finite gaussian draws")
}

/// `x_t = sqrt(gamma_bar_t) x0 + sqrt(1 - gamma_bar_t) eps`.
pub fn forward_diffuse(
    x0: &ComplexImage,
    t: usize,
    sched: &NoiseSchedule,
    eps: &ComplexImage,
) -> Result<ComplexImage> {
    sched.check_t(t)?;
    check_shape(x0.shape(), eps.shape())?;
    Ok(x0.lin_comb(sched.alpha(t), eps, sched.sigma(t)))
}

/// `v = alpha_t eps - sigma_t x0`.
pub fn v_target(
    x0: &ComplexImage,
    eps: &ComplexImage,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<ComplexImage> {
    sched.check_t(t)?;
    check_shape(x0.shape(), eps.shape())?;
    Ok(eps.lin_comb(sched.alpha(t), x0, -sched.sigma(t)))
}

/// `x0_hat = alpha_t x_t - sigma_t v`.
pub fn x0_from_v(
    x_t: &ComplexImage,
    v: &ComplexImage,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<ComplexImage> {
    sched.check_t(t)?;
    check_shape(x_t.shape(), v.shape())?;
    Ok(x_t.lin_comb(sched.alpha(t), v, -sched.sigma(t)))
}

/// `eps = sigma_t x_t + alpha_t v`.
pub fn eps_from_v(
    x_t: &ComplexImage,
    v: &ComplexImage,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<ComplexImage> {
    sched.check_t(t)?;
    check_shape(x_t.shape(), v.shape())?;
    Ok(x_t.lin_comb(sched.sigma(t), v, sched.alpha(t)))
}

/// Deterministic DDIM update from `t_from` to `t_to < t_from`:
/// `x_to = alpha_to x0_hat + (sigma_to / sigma_from) (x_t - alpha_from x0_hat)`.
pub fn ddim_step(
    x_t: &ComplexImage,
    x0_hat: &ComplexImage,
    t_from: usize,
    t_to: usize,
    sched: &NoiseSchedule,
) -> Result<ComplexImage> {
    sched.check_t(t_from)?;
    if t_to >= t_from {
        return Err(Error::InvalidStep(format!(
            "DDIM step must go backwards, got {t_from} -> {t_to}"
        )));
    }
    check_shape(x_t.shape(), x0_hat.shape())?;
    let sigma_from = sched.sigma(t_from);
    if sigma_from == 0.0 {
        return Err(Error::InvalidStep(format!(
            "sigma is zero at t = {t_from}; no noise left to remove"
        )));
    }
    let ratio = sched.sigma(t_to) / sigma_from;
    let (a_to, a_from) = (sched.alpha(t_to), sched.alpha(t_from));
    Ok(x0_hat.zip_map(x_t, |x0, xt| x0 * a_to + (xt - x0 * a_from) * ratio))
}

/// Shortcut start point: forward-diffuses `x_cond` to level `t0` with seeded noise.
pub fn shortcut_init(
    x_cond: &ComplexImage,
    t0: usize,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<ComplexImage> {
    if t0 == 0 || t0 > sched.steps() {
        return Err(Error::InvalidStep(format!(
            "shortcut start {t0} outside 1..={}",
            sched.steps()
        )));
    }
    let eps = sample_noise(x_cond.height(), x_cond.width(), seed);
    forward_diffuse(x_cond, t0, sched, &eps)
}
