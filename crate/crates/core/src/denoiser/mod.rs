//! v-predicting denoisers behind one interface.

pub mod adam;
pub mod net;
pub mod oracle;
pub mod tape;

use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_shape, Error, Result};
use crate::kspace::{apply_dc, project_unsampled, ComplexImage, KSpaceData};
use crate::masks::SamplingMask;

pub use adam::{adam_update, AdamState};
pub use net::{ConvDenoiser, InitScheme, NetHyper};
pub use oracle::{GaussianOracle, GaussianToyProblem};
pub use tape::Real;

/// `N(x_cond, x_t, gamma_bar) -> v`.
pub trait Denoiser: Sync {
    fn predict_v(&self, x_cond: &ComplexImage, x_t: &ComplexImage, gamma_bar: f64) -> Result<ComplexImage>;
}

fn check_gamma(gamma_bar: f64) -> Result<()> {
    if gamma_bar > 0.0 && gamma_bar <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("gamma_bar must lie in (0, 1], got {gamma_bar}")))
    }
}

impl<T: Real> Denoiser for ConvDenoiser<T> {
    fn predict_v(&self, x_cond: &ComplexImage, x_t: &ComplexImage, gamma_bar: f64) -> Result<ComplexImage> {
        self.predict(x_cond, x_t, gamma_bar)
    }
}

impl Denoiser for GaussianOracle {
    fn predict_v(&self, x_cond: &ComplexImage, x_t: &ComplexImage, gamma_bar: f64) -> Result<ComplexImage> {
        check_gamma(gamma_bar)?;
        check_shape(x_cond.shape(), x_t.shape())?;
        GaussianOracle::predict_v(self, x_t, gamma_bar)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    OracleGaussian,
    ConvResidual,
}

/// A concrete model: the analytic oracle or the trainable network.
#[derive(Debug, Clone)]
pub enum DenoiserModel {
    Oracle(GaussianOracle),
    Conv(ConvDenoiser<f32>),
}

impl DenoiserModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            DenoiserModel::Oracle(_) => ModelKind::OracleGaussian,
            DenoiserModel::Conv(_) => ModelKind::ConvResidual,
        }
    }

    pub fn n_params(&self) -> usize {
        match self {
            DenoiserModel::Oracle(_) => 0,
            DenoiserModel::Conv(n) => n.n_params(),
        }
    }

    pub fn as_conv(&self) -> Option<&ConvDenoiser<f32>> {
        match self {
            DenoiserModel::Conv(n) => Some(n),
            DenoiserModel::Oracle(_) => None,
        }
    }
}

impl Denoiser for DenoiserModel {
    fn predict_v(&self, x_cond: &ComplexImage, x_t: &ComplexImage, gamma_bar: f64) -> Result<ComplexImage> {
        match self {
            DenoiserModel::Oracle(o) => Denoiser::predict_v(o, x_cond, x_t, gamma_bar),
            DenoiserModel::Conv(n) => n.predict(x_cond, x_t, gamma_bar),
        }
    }
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn predict_v(&self, x_cond: &ComplexImage, x_t: &ComplexImage, gamma_bar: f64) -> Result<ComplexImage> {
        (**self).predict_v(x_cond, x_t, gamma_bar)
    }
}

/// Knows the clean image and returns the exact `v` for any `x_t`.
#[derive(Debug, Clone)]
pub struct ExactDenoiser {
    pub x0: ComplexImage,
}

impl Denoiser for ExactDenoiser {
    fn predict_v(&self, _x_cond: &ComplexImage, x_t: &ComplexImage, gamma_bar: f64) -> Result<ComplexImage> {
        check_gamma(gamma_bar)?;
        check_shape(self.x0.shape(), x_t.shape())?;
        let sigma = (1.0 - gamma_bar).sqrt();
        if sigma == 0.0 {
            return Ok(ComplexImage::zeros(x_t.height(), x_t.width()));
        }
        Ok(x_t.lin_comb(gamma_bar.sqrt() / sigma, &self.x0, -1.0 / sigma))
    }
}

/// Counts invocations of the wrapped denoiser.
#[derive(Debug)]
pub struct CountingDenoiser<D> {
    inner: D,
    calls: AtomicUsize,
}

impl<D: Denoiser> CountingDenoiser<D> {
    pub fn new(inner: D) -> Self {
        CountingDenoiser {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::SeqCst);
    }

    pub fn inner(&self) -> &D {
        &self.inner
    }
}

impl<D: Denoiser> Denoiser for CountingDenoiser<D> {
    fn predict_v(&self, x_cond: &ComplexImage, x_t: &ComplexImage, gamma_bar: f64) -> Result<ComplexImage> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.predict_v(x_cond, x_t, gamma_bar)
    }
}

/// Data-consistency term of the distillation loss.
#[derive(Debug, Clone)]
pub struct DcTerm {
    pub y: KSpaceData,
    pub mask: SamplingMask,
    /// Teacher reconstruction after data consistency.
    pub x_teacher: ComplexImage,
}

/// One regression example.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub x_cond: ComplexImage,
    pub x_t: ComplexImage,
    pub gamma_bar: f64,
    pub target_v: ComplexImage,
    pub dc: Option<DcTerm>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    /// Weight of the data-consistency term; ignored for samples without one.
    pub dc_weight: f64,
}

impl Default for LossSpec {
    fn default() -> Self {
        LossSpec { dc_weight: 1.0 }
    }
}

/// Loss split into its two terms.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub v_term: f64,
    pub dc_term: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.v_term + self.dc_term
    }
}

/// Per-sample loss and its gradient with respect to the predicted `v`.
///
/// Both terms are squared L2 norms averaged over the real elements.
pub fn sample_loss(v: &ComplexImage, sample: &TrainSample, spec: &LossSpec) -> Result<(LossParts, ComplexImage)> {
    let n = 2.0 * v.len() as f64;
    let diff = v - &sample.target_v;
    let mut parts = LossParts {
        v_term: diff.norm_sqr() / n,
        dc_term: 0.0,
    };
    let mut dv = diff.scale(2.0 / n);
    if let (Some(dc), true) = (&sample.dc, spec.dc_weight != 0.0) {
        let alpha = sample.gamma_bar.sqrt();
        let sigma = (1.0 - sample.gamma_bar).max(0.0).sqrt();
        let x0_student = sample.x_t.lin_comb(alpha, v, -sigma);
        let r = &apply_dc(&x0_student, &dc.y, &dc.mask)? - &dc.x_teacher;
        parts.dc_term = spec.dc_weight * r.norm_sqr() / n;
        let back = project_unsampled(&r, &dc.mask)?;
        dv = dv.lin_comb(1.0, &back, -sigma * spec.dc_weight * 2.0 / n);
    }
    Ok((parts, dv))
}

/// Mean loss over the batch and its parameter gradient for a network of any precision.
pub fn network_gradient<T: Real>(
    net: &ConvDenoiser<T>,
    batch: &[TrainSample],
    spec: &LossSpec,
) -> Result<(LossParts, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let per_sample: Vec<Result<(LossParts, Vec<f64>)>> = batch
        .par_iter()
        .map(|s| {
            let mut parts = LossParts::default();
            let (_, _, grad) = net.predict_with_grad(&s.x_cond, &s.x_t, s.gamma_bar, |v| {
                let (p, dv) = sample_loss(v, s, spec)?;
                parts = p;
                Ok((p.total(), dv))
            })?;
            Ok((parts, grad))
        })
        .collect();
    let scale = 1.0 / batch.len() as f64;
    let mut total = LossParts::default();
    let mut grad = vec![0.0; net.n_params()];
    for r in per_sample {
        let (p, g) = r?;
        total.v_term += p.v_term * scale;
        total.dc_term += p.dc_term * scale;
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b * scale);
    }
    if !total.total().is_finite() {
        return Err(Error::Divergence(format!(
            "non-finite loss (v term {}, dc term {})",
            total.v_term, total.dc_term
        )));
    }
    Ok((total, grad))
}

/// Batch loss and gradient; only the trainable kind supports this.
pub fn gradient(model: &DenoiserModel, batch: &[TrainSample], spec: &LossSpec) -> Result<(LossParts, Vec<f64>)> {
    match model {
        DenoiserModel::Conv(net) => network_gradient(net, batch, spec),
        DenoiserModel::Oracle(_) => Err(Error::Unsupported("the analytic oracle has no parameters".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kspace::{fft2c, forward_model, zero_fill};
    use crate::masks::{make_mask, MaskKind, MaskSpec};
    use crate::schedule::sample_noise;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_hyper() -> NetHyper {
        NetHyper {
            widths: vec![3, 4],
            blocks_per_level: 1,
            attention: true,
            gamma_embed_dim: 4,
            embed_hidden: 5,
            init: InitScheme::FanIn,
        }
    }

    fn dc_sample(seed: u64) -> TrainSample {
        let (h, w) = (8, 8);
        let x0 = sample_noise(h, w, seed);
        let mask = make_mask(&MaskSpec::new(MaskKind::Gaussian1d, 2.0, 2, seed), h, w).unwrap();
        let y = forward_model(&x0, &mask, 0.0, 0).unwrap();
        TrainSample {
            x_cond: zero_fill(&y, &mask).unwrap(),
            x_t: sample_noise(h, w, seed + 100),
            gamma_bar: 0.37,
            target_v: sample_noise(h, w, seed + 200),
            dc: Some(DcTerm {
                y,
                mask,
                x_teacher: sample_noise(h, w, seed + 300),
            }),
        }
    }

    #[test]
    fn oracle_has_no_gradient() {
        let mask = SamplingMask::full(2, 2);
        let p = GaussianToyProblem::random(mask, 0.1, 0).unwrap();
        let y = fft2c(&p.sample_prior(1)).unwrap();
        let m = DenoiserModel::Oracle(GaussianOracle::new(p, y).unwrap());
        let err = gradient(&m, &[dc_sample(0)], &LossSpec::default()).unwrap_err();
        assert!(matches!(err, Error::Unsupported(_)));
        assert_eq!(m.n_params(), 0);
    }

    #[test]
    fn perfect_prediction_has_zero_loss_and_gradient() {
        let net = ConvDenoiser::<f64>::new(tiny_hyper(), 1).unwrap();
        let mut s = dc_sample(2);
        s.target_v = net.predict(&s.x_cond, &s.x_t, s.gamma_bar).unwrap();
        let alpha = s.gamma_bar.sqrt();
        let sigma = (1.0 - s.gamma_bar).sqrt();
        let x0 = s.x_t.lin_comb(alpha, &s.target_v, -sigma);
        let dc = s.dc.as_mut().unwrap();
        dc.x_teacher = apply_dc(&x0, &dc.y, &dc.mask).unwrap();
        let (loss, grad) = network_gradient(&net, &[s], &LossSpec::default()).unwrap();
        assert!(loss.total() < 1e-24);
        assert!(grad.iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn output_bias_gradient_of_zero_network() {
        let net = ConvDenoiser::<f64>::zeros(tiny_hyper()).unwrap();
        let mut s = dc_sample(3);
        s.dc = None;
        let n = 2.0 * s.x_t.len() as f64;
        let (loss, grad) = network_gradient(&net, &[s.clone()], &LossSpec::default()).unwrap();
        assert!((loss.v_term - s.target_v.norm_sqr() / n).abs() < 1e-12);
        let sum_re: f64 = s.target_v.data().iter().map(|c| c.re).sum();
        let sum_im: f64 = s.target_v.data().iter().map(|c| c.im).sum();
        let k = grad.len();
        assert!((grad[k - 2] + 2.0 * sum_re / n).abs() < 1e-12);
        assert!((grad[k - 1] + 2.0 * sum_im / n).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut net = ConvDenoiser::<f64>::new(tiny_hyper(), 7).unwrap();
        let batch = vec![dc_sample(4), dc_sample(5)];
        let spec = LossSpec::default();
        let (_, grad) = network_gradient(&net, &batch, &spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-4;
        for _ in 0..20 {
            let i = rng.random_range(0..net.n_params());
            let orig = net.params()[i];
            net.params_mut()[i] = orig + h;
            let (lp, _) = network_gradient(&net, &batch, &spec).unwrap();
            net.params_mut()[i] = orig - h;
            let (lm, _) = network_gradient(&net, &batch, &spec).unwrap();
            net.params_mut()[i] = orig;
            let fd = (lp.total() - lm.total()) / (2.0 * h);
            let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6);
            assert!(rel <= 1e-3, "param {i}: fd {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn counting_wrapper_counts() {
        let x0 = sample_noise(4, 4, 0);
        let d = CountingDenoiser::new(ExactDenoiser { x0: x0.clone() });
        for _ in 0..3 {
            d.predict_v(&x0, &x0, 0.5).unwrap();
        }
        assert_eq!(d.calls(), 3);
        d.reset();
        assert_eq!(d.calls(), 0);
    }
}
