//! Reverse-diffusion reconstruction pipelines.

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::kspace::{apply_dc, zero_fill, ComplexImage, KSpaceData};
use crate::masks::SamplingMask;
use crate::metrics::RealImage;
use crate::schedule::{ddim_step, sample_noise, shortcut_init, x0_from_v, NoiseSchedule};

/// Where data consistency is enforced during sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DcMode {
    /// Once, on the final estimate.
    #[default]
    Final,
    /// On every intermediate clean-image estimate.
    EveryStep,
    Off,
}

impl std::str::FromStr for DcMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "final" => Ok(DcMode::Final),
            "every" | "every_step" => Ok(DcMode::EveryStep),
            "off" | "none" => Ok(DcMode::Off),
            other => Err(Error::InvalidInput(format!("unknown dc mode '{other}'"))),
        }
    }
}

/// Counts denoiser invocations and data-consistency projections.
#[derive(Debug, Default)]
pub struct Trace {
    denoiser_calls: AtomicUsize,
    dc_calls: AtomicUsize,
}

impl Trace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn denoiser_calls(&self) -> usize {
        self.denoiser_calls.load(Ordering::SeqCst)
    }

    pub fn dc_calls(&self) -> usize {
        self.dc_calls.load(Ordering::SeqCst)
    }
}

/// Measurements plus the conditioning image they induce.
struct Acquisition<'a> {
    y: &'a KSpaceData,
    mask: &'a SamplingMask,
    x_cond: ComplexImage,
}

impl<'a> Acquisition<'a> {
    fn new(y: &'a KSpaceData, mask: &'a SamplingMask) -> Result<Self> {
        let x_cond = zero_fill(y, mask)?;
        Ok(Acquisition { y, mask, x_cond })
    }

    fn dc(&self, x: &ComplexImage, trace: &Trace) -> Result<ComplexImage> {
        trace.dc_calls.fetch_add(1, Ordering::SeqCst);
        apply_dc(x, self.y, self.mask)
    }
}

/// DDIM from `x_start` at index `t_start` down to 0 on `sched`.
#[allow(clippy::too_many_arguments)]
fn reverse(
    model: &dyn Denoiser,
    x_cond: &ComplexImage,
    x_start: ComplexImage,
    t_start: usize,
    sched: &NoiseSchedule,
    dc_mode: DcMode,
    acq: Option<&Acquisition>,
    trace: &Trace,
) -> Result<ComplexImage> {
    let mut x = x_start;
    for t in (1..=t_start).rev() {
        trace.denoiser_calls.fetch_add(1, Ordering::SeqCst);
        let v = model.predict_v(x_cond, &x, sched.gamma_bar(t))?;
        let mut x0 = x0_from_v(&x, &v, t, sched)?;
        if let (DcMode::EveryStep, Some(a)) = (dc_mode, acq) {
            x0 = a.dc(&x0, trace)?;
        }
        x = ddim_step(&x, &x0, t, t - 1, sched)?;
    }
    match (dc_mode, acq) {
        (DcMode::Final, Some(a)) => a.dc(&x, trace),
        _ => Ok(x),
    }
}

/// Full `T`-step sampling from pure noise.
pub fn sample_full(
    model: &dyn Denoiser,
    y: &KSpaceData,
    mask: &SamplingMask,
    sched: &NoiseSchedule,
    seed: u64,
    dc_mode: DcMode,
) -> Result<ComplexImage> {
    sample_full_traced(model, y, mask, sched, seed, dc_mode, &Trace::new())
}

pub fn sample_full_traced(
    model: &dyn Denoiser,
    y: &KSpaceData,
    mask: &SamplingMask,
    sched: &NoiseSchedule,
    seed: u64,
    dc_mode: DcMode,
    trace: &Trace,
) -> Result<ComplexImage> {
    let acq = Acquisition::new(y, mask)?;
    let (h, w) = y.shape();
    let x_t = sample_noise(h, w, seed);
    reverse(model, &acq.x_cond, x_t, sched.steps(), sched, dc_mode, Some(&acq), trace)
}

/// Shortcut sampling: forward-diffuse the zero-filled image to `t0`, then `t0` DDIM steps.
pub fn sample_shortcut(
    model: &dyn Denoiser,
    y: &KSpaceData,
    mask: &SamplingMask,
    sched: &NoiseSchedule,
    t0: usize,
    seed: u64,
    dc_mode: DcMode,
) -> Result<ComplexImage> {
    sample_shortcut_traced(model, y, mask, sched, t0, seed, dc_mode, &Trace::new())
}

#[allow(clippy::too_many_arguments)]
pub fn sample_shortcut_traced(
    model: &dyn Denoiser,
    y: &KSpaceData,
    mask: &SamplingMask,
    sched: &NoiseSchedule,
    t0: usize,
    seed: u64,
    dc_mode: DcMode,
    trace: &Trace,
) -> Result<ComplexImage> {
    let acq = Acquisition::new(y, mask)?;
    let x_start = shortcut_init(&acq.x_cond, t0, sched, seed)?;
    reverse(model, &acq.x_cond, x_start, t0, sched, dc_mode, Some(&acq), trace)
}

/// Shortcut sampling from a given conditioning image, without any data consistency.
pub fn denoise_from_condition(
    model: &dyn Denoiser,
    x_cond: &ComplexImage,
    sched: &NoiseSchedule,
    t0: usize,
    seed: u64,
    trace: &Trace,
) -> Result<ComplexImage> {
    let x_start = shortcut_init(x_cond, t0, sched, seed)?;
    reverse(model, x_cond, x_start, t0, sched, DcMode::Off, None, trace)
}

fn require_single_step(t0: usize) -> Result<()> {
    if t0 == 1 {
        Ok(())
    } else {
        Err(Error::Grid(format!(
            "single-step reconstruction needs a model whose start index is 1, got {t0}"
        )))
    }
}

/// One denoiser call from the shortcut start followed by data consistency.
/// `sched` is the distilled grid and `t0` its start index, which must be 1.
pub fn reconstruct_single_step(
    model: &dyn Denoiser,
    sched: &NoiseSchedule,
    t0: usize,
    y: &KSpaceData,
    mask: &SamplingMask,
    seed: u64,
) -> Result<ComplexImage> {
    reconstruct_single_step_traced(model, sched, t0, y, mask, seed, DcMode::Final, &Trace::new())
}

#[allow(clippy::too_many_arguments)]
pub fn reconstruct_single_step_traced(
    model: &dyn Denoiser,
    sched: &NoiseSchedule,
    t0: usize,
    y: &KSpaceData,
    mask: &SamplingMask,
    seed: u64,
    dc_mode: DcMode,
    trace: &Trace,
) -> Result<ComplexImage> {
    require_single_step(t0)?;
    sample_shortcut_traced(model, y, mask, sched, t0, seed, dc_mode, trace)
}

/// Pixelwise mean and magnitude standard deviation over repeated reconstructions.
#[derive(Debug, Clone)]
pub struct UncertaintyMap {
    pub mean: ComplexImage,
    pub sd: RealImage,
}

/// Repeats shortcut reconstruction once per seed (sample standard deviation, `n - 1`).
pub fn uncertainty_map(
    model: &dyn Denoiser,
    sched: &NoiseSchedule,
    t0: usize,
    y: &KSpaceData,
    mask: &SamplingMask,
    seeds: &[u64],
) -> Result<UncertaintyMap> {
    if seeds.len() < 2 {
        return Err(Error::InvalidInput("uncertainty needs at least two repeats".into()));
    }
    let runs = seeds
        .iter()
        .map(|&s| sample_shortcut(model, y, mask, sched, t0, s, DcMode::Final))
        .collect::<Result<Vec<_>>>()?;
    let n = runs.len() as f64;
    let (h, w) = y.shape();
    let mut mean = ComplexImage::zeros(h, w);
    for r in &runs {
        mean = mean.lin_comb(1.0, r, 1.0 / n);
    }
    let mags: Vec<Vec<f64>> = runs.iter().map(|r| r.magnitude()).collect();
    let sd = (0..h * w)
        .map(|i| {
            let shift = mags[0][i];
            let dev: Vec<f64> = mags.iter().map(|m| m[i] - shift).collect();
            let mu = dev.iter().sum::<f64>() / n;
            (dev.iter().map(|d| (d - mu).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        })
        .collect();
    Ok(UncertaintyMap {
        mean,
        sd: RealImage::new(h, w, sd)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{CountingDenoiser, ExactDenoiser};
    use crate::kspace::{fft2c, forward_model};
    use crate::masks::{make_mask, MaskKind, MaskSpec};
    use crate::schedule::{halve_schedule, make_cosine_schedule};

    fn setup() -> (ComplexImage, KSpaceData, SamplingMask) {
        let x0 = sample_noise(8, 8, 3);
        let mask = make_mask(&MaskSpec::new(MaskKind::Gaussian1d, 2.0, 2, 1), 8, 8).unwrap();
        let y = forward_model(&x0, &mask, 0.0, 0).unwrap();
        (x0, y, mask)
    }

    #[test]
    fn exact_denoiser_collapses_every_sampler() {
        let (x0, y, mask) = setup();
        let sched = make_cosine_schedule(16).unwrap();
        let d = CountingDenoiser::new(ExactDenoiser { x0: x0.clone() });
        for seed in [1, 2] {
            let out = sample_full(&d, &y, &mask, &sched, seed, DcMode::Off).unwrap();
            assert!(out.max_abs_diff(&x0) < 1e-10);
        }
        assert_eq!(d.calls(), 32);
        d.reset();
        let out = sample_shortcut(&d, &y, &mask, &sched, 5, 4, DcMode::EveryStep).unwrap();
        assert!(out.max_abs_diff(&x0) < 1e-10);
        assert_eq!(d.calls(), 5);
    }

    #[test]
    fn outputs_satisfy_measurements() {
        let (x0, y, mask) = setup();
        let sched = make_cosine_schedule(8).unwrap();
        let d = ExactDenoiser { x0: sample_noise(8, 8, 99) };
        for mode in [DcMode::Final, DcMode::EveryStep] {
            let out = sample_full(&d, &y, &mask, &sched, 1, mode).unwrap();
            let k = fft2c(&out).unwrap();
            for ((a, b), &m) in k.data().iter().zip(y.data()).zip(mask.cells()) {
                if m {
                    assert!((a - b).norm() < 1e-5);
                }
            }
        }
        let _ = x0;
    }

    #[test]
    fn single_step_contract() {
        let (x0, y, mask) = setup();
        let mut sched = make_cosine_schedule(16).unwrap();
        for _ in 0..4 {
            sched = halve_schedule(&sched).unwrap();
        }
        let d = CountingDenoiser::new(ExactDenoiser { x0: sample_noise(8, 8, 5) });
        let a = reconstruct_single_step(&d, &sched, 1, &y, &mask, 7).unwrap();
        assert_eq!(d.calls(), 1);
        let b = reconstruct_single_step(&d, &sched, 1, &y, &mask, 7).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            reconstruct_single_step(&d, &sched, 2, &y, &mask, 7),
            Err(Error::Grid(_)) | Err(Error::InvalidStep(_))
        ));
        let full = SamplingMask::full(8, 8);
        let yf = fft2c(&x0).unwrap();
        let out = reconstruct_single_step(&d, &sched, 1, &yf, &full, 3).unwrap();
        assert!(out.max_abs_diff(&x0) < 1e-5);
    }

    #[test]
    fn trace_counts_dc_applications() {
        let (_, y, mask) = setup();
        let sched = make_cosine_schedule(4).unwrap();
        let d = ExactDenoiser { x0: sample_noise(8, 8, 5) };
        for (mode, expected) in [(DcMode::Off, 0), (DcMode::Final, 1), (DcMode::EveryStep, 4)] {
            let trace = Trace::new();
            sample_full_traced(&d, &y, &mask, &sched, 0, mode, &trace).unwrap();
            assert_eq!(trace.dc_calls(), expected);
            assert_eq!(trace.denoiser_calls(), 4);
        }
    }

    #[test]
    fn uncertainty_of_fixed_seeds_is_zero() {
        let (_, y, mask) = setup();
        let sched = make_cosine_schedule(8).unwrap();
        let d = ExactDenoiser { x0: sample_noise(8, 8, 5) };
        let u = uncertainty_map(&d, &sched, 2, &y, &mask, &[4; 5]).unwrap();
        assert!(u.sd.data().iter().all(|&s| s == 0.0));
        let single = sample_shortcut(&d, &y, &mask, &sched, 2, 4, DcMode::Final).unwrap();
        assert!(u.mean.max_abs_diff(&single) < 1e-12);
        assert!(uncertainty_map(&d, &sched, 2, &y, &mask, &[1]).is_err());
    }
}
