//! Residual convolutional v-predictor.
//!
//! Encoder/decoder over `widths.len()` resolution levels with additive skips,
//! `blocks_per_level` residual blocks per level and optional single-head
//! self-attention at the coarsest level. The noise level enters through a
//! sinusoidal feature vector and a three-layer perceptron whose output
//! modulates every residual block of a level with a per-channel scale and
//! shift.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tape::{Real, Shape, Tape, Var};
use crate::error::{Error, Result};
use crate::kspace::ComplexImage;

/// Parameter initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Fan-in scaled normal weights, zero biases, gains drawn from N(1, 0.001).
    #[default]
    FanIn,
    /// Every parameter drawn from N(1, 0.001).
    ConstantOne,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetHyper {
    pub widths: Vec<usize>,
    pub blocks_per_level: usize,
    pub attention: bool,
    pub gamma_embed_dim: usize,
    pub embed_hidden: usize,
    #[serde(default)]
    pub init: InitScheme,
}

impl Default for NetHyper {
    fn default() -> Self {
        NetHyper {
            widths: vec![32, 64, 128],
            blocks_per_level: 2,
            attention: true,
            gamma_embed_dim: 16,
            embed_hidden: 64,
            init: InitScheme::FanIn,
        }
    }
}

impl NetHyper {
    /// A reduced configuration that trains in minutes on one CPU core.
    pub fn small() -> Self {
        NetHyper {
            widths: vec![16, 32, 32],
            blocks_per_level: 2,
            attention: true,
            gamma_embed_dim: 16,
            embed_hidden: 32,
            init: InitScheme::FanIn,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Parameter("network widths must be non-empty and positive".into()));
        }
        if self.gamma_embed_dim < 2 || !self.gamma_embed_dim.is_multiple_of(2) {
            return Err(Error::Parameter("gamma_embed_dim must be even and at least 2".into()));
        }
        if self.embed_hidden == 0 {
            return Err(Error::Parameter("embed_hidden must be positive".into()));
        }
        Ok(())
    }

    /// Side lengths must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.widths.len() - 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum InitKind {
    FanIn(usize),
    Zero,
    Gain,
}

#[derive(Debug, Clone, Copy)]
struct Entry {
    offset: usize,
    shape: Shape,
}

impl Entry {
    fn len(&self) -> usize {
        self.shape[0] * self.shape[1] * self.shape[2]
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvP {
    w: Entry,
    b: Entry,
    k: usize,
}

#[derive(Debug, Clone, Copy)]
struct LinearP {
    w: Entry,
    b: Entry,
}

#[derive(Debug, Clone, Copy)]
struct ResP {
    conv1: ConvP,
    conv2: ConvP,
    gain: Entry,
}

#[derive(Debug, Clone, Copy)]
struct AttnP {
    q: ConvP,
    k: ConvP,
    v: ConvP,
    o: ConvP,
}

#[derive(Debug, Clone)]
struct Layout {
    embed: [LinearP; 3],
    conv_in: ConvP,
    enc: Vec<Vec<ResP>>,
    down: Vec<ConvP>,
    attn: Option<AttnP>,
    up: Vec<ConvP>,
    dec: Vec<Vec<ResP>>,
    conv_out: ConvP,
    /// Offset of each level's (scale, shift) pair in the embedding output.
    film: Vec<usize>,
    inits: Vec<(Entry, InitKind)>,
    total: usize,
}

struct Builder {
    inits: Vec<(Entry, InitKind)>,
    total: usize,
}

impl Builder {
    fn entry(&mut self, shape: Shape, init: InitKind) -> Entry {
        let e = Entry {
            offset: self.total,
            shape,
        };
        self.total += e.len();
        self.inits.push((e, init));
        e
    }

    fn conv(&mut self, cin: usize, cout: usize, k: usize) -> ConvP {
        ConvP {
            w: self.entry([cout, cin * k * k, 1], InitKind::FanIn(cin * k * k)),
            b: self.entry([cout, 1, 1], InitKind::Zero),
            k,
        }
    }

    fn linear(&mut self, n_in: usize, n_out: usize) -> LinearP {
        LinearP {
            w: self.entry([n_out, n_in, 1], InitKind::FanIn(n_in)),
            b: self.entry([n_out, 1, 1], InitKind::Zero),
        }
    }

    fn res(&mut self, c: usize) -> ResP {
        ResP {
            conv1: self.conv(c, c, 3),
            conv2: self.conv(c, c, 3),
            gain: self.entry([c, 1, 1], InitKind::Gain),
        }
    }
}

const IN_CHANNELS: usize = 4;
const OUT_CHANNELS: usize = 2;

impl Layout {
    fn new(hyper: &NetHyper) -> Self {
        let mut b = Builder {
            inits: Vec::new(),
            total: 0,
        };
        let levels = hyper.widths.len();
        let film_total: usize = hyper.widths.iter().map(|w| 2 * w).sum();
        let embed = [
            b.linear(hyper.gamma_embed_dim, hyper.embed_hidden),
            b.linear(hyper.embed_hidden, hyper.embed_hidden),
            b.linear(hyper.embed_hidden, film_total),
        ];
        let mut film = Vec::with_capacity(levels);
        let mut acc = 0;
        for &w in &hyper.widths {
            film.push(acc);
            acc += 2 * w;
        }
        let conv_in = b.conv(IN_CHANNELS, hyper.widths[0], 3);
        let mut enc = Vec::new();
        let mut down = Vec::new();
        for l in 0..levels {
            enc.push((0..hyper.blocks_per_level).map(|_| b.res(hyper.widths[l])).collect());
            if l + 1 < levels {
                down.push(b.conv(hyper.widths[l], hyper.widths[l + 1], 3));
            }
        }
        let attn = hyper.attention.then(|| {
            let c = hyper.widths[levels - 1];
            AttnP {
                q: b.conv(c, c, 1),
                k: b.conv(c, c, 1),
                v: b.conv(c, c, 1),
                o: b.conv(c, c, 1),
            }
        });
        let mut up = Vec::new();
        let mut dec = Vec::new();
        for l in 0..levels - 1 {
            up.push(b.conv(hyper.widths[l + 1], hyper.widths[l], 3));
            dec.push((0..hyper.blocks_per_level).map(|_| b.res(hyper.widths[l])).collect());
        }
        let conv_out = b.conv(hyper.widths[0], OUT_CHANNELS, 3);
        Layout {
            embed,
            conv_in,
            enc,
            down,
            attn,
            up,
            dec,
            conv_out,
            film,
            inits: b.inits,
            total: b.total,
        }
    }
}

/// Noise-level features: `[alpha, sigma]` followed by sinusoids of the
/// clamped log signal-to-noise ratio.
pub fn gamma_features(gamma_bar: f64, dim: usize) -> Vec<f64> {
    let alpha = gamma_bar.sqrt();
    let sigma = (1.0 - gamma_bar).max(0.0).sqrt();
    let log_snr = (gamma_bar.ln() - (1.0 - gamma_bar).max(1e-12).ln()).clamp(-20.0, 20.0);
    let mut out = vec![alpha, sigma];
    let pairs = (dim - 2) / 2;
    for j in 0..pairs {
        let freq = 2f64.powf(j as f64 * 4.0 / pairs.max(1) as f64) / 4.0;
        out.push((freq * log_snr).sin());
        out.push((freq * log_snr).cos());
    }
    out
}

/// The trainable denoiser, generic over its floating-point precision.
#[derive(Debug, Clone)]
pub struct ConvDenoiser<T: Real> {
    hyper: NetHyper,
    layout: Layout,
    params: Vec<T>,
}

impl<T: Real> PartialEq for ConvDenoiser<T> {
    fn eq(&self, other: &Self) -> bool {
        self.hyper == other.hyper && self.params == other.params
    }
}

impl<T: Real> ConvDenoiser<T> {
    /// Randomly initialized network.
    pub fn new(hyper: NetHyper, seed: u64) -> Result<Self> {
        hyper.validate()?;
        let layout = Layout::new(&hyper);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![T::zero(); layout.total];
        let near_one = Normal::new(1.0, 0.001).expect("valid normal");
        for &(entry, kind) in &layout.inits {
            let slot = &mut params[entry.offset..entry.offset + entry.len()];
            match (hyper.init, kind) {
                (InitScheme::ConstantOne, _) | (_, InitKind::Gain) => {
                    slot.iter_mut().for_each(|p| *p = T::of(near_one.sample(&mut rng)))
                }
                (InitScheme::FanIn, InitKind::Zero) => {}
                (InitScheme::FanIn, InitKind::FanIn(fan_in)) => {
                    let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("valid normal");
                    slot.iter_mut().for_each(|p| *p = T::of(normal.sample(&mut rng)));
                }
            }
        }
        Ok(ConvDenoiser {
            hyper,
            layout,
            params,
        })
    }

    /// Network with every parameter zero; it predicts `v = 0`.
    pub fn zeros(hyper: NetHyper) -> Result<Self> {
        hyper.validate()?;
        let layout = Layout::new(&hyper);
        let params = vec![T::zero(); layout.total];
        Ok(ConvDenoiser {
            hyper,
            layout,
            params,
        })
    }

    pub fn from_params(hyper: NetHyper, params: Vec<T>) -> Result<Self> {
        hyper.validate()?;
        let layout = Layout::new(&hyper);
        if params.len() != layout.total {
            return Err(Error::Format(format!(
                "expected {} parameters, found {}",
                layout.total,
                params.len()
            )));
        }
        Ok(ConvDenoiser {
            hyper,
            layout,
            params,
        })
    }

    pub fn hyper(&self) -> &NetHyper {
        &self.hyper
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    /// Copies the network into another precision.
    pub fn cast<U: Real>(&self) -> ConvDenoiser<U> {
        ConvDenoiser {
            hyper: self.hyper.clone(),
            layout: self.layout.clone(),
            params: self.params.iter().map(|p| U::of(p.as_f64())).collect(),
        }
    }

    fn check_inputs(&self, x_cond: &ComplexImage, x_t: &ComplexImage, gamma_bar: f64) -> Result<()> {
        x_cond.check_same_shape(x_t)?;
        if !(gamma_bar > 0.0 && gamma_bar <= 1.0) {
            return Err(Error::InvalidInput(format!(
                "gamma_bar must lie in (0, 1], got {gamma_bar}"
            )));
        }
        let m = self.hyper.size_multiple();
        if !x_t.height().is_multiple_of(m) || !x_t.width().is_multiple_of(m) {
            return Err(Error::InvalidInput(format!(
                "image {}x{} not divisible by {m} for {} levels",
                x_t.height(),
                x_t.width(),
                self.hyper.widths.len()
            )));
        }
        Ok(())
    }

    fn p(&self, tape: &mut Tape<T>, e: Entry) -> Var {
        tape.param(&self.params[e.offset..e.offset + e.len()], e.shape, e.offset)
    }

    fn conv(&self, tape: &mut Tape<T>, x: Var, c: ConvP) -> Var {
        let w = self.p(tape, c.w);
        let b = self.p(tape, c.b);
        tape.conv(x, w, b, c.k)
    }

    fn linear(&self, tape: &mut Tape<T>, x: Var, l: LinearP) -> Var {
        let w = self.p(tape, l.w);
        let b = self.p(tape, l.b);
        tape.linear(x, w, b)
    }

    fn res_block(&self, tape: &mut Tape<T>, x: Var, r: &ResP, film: (Var, Var)) -> Var {
        let h = tape.silu(x);
        let h = self.conv(tape, h, r.conv1);
        let h = tape.film(h, film.0, film.1);
        let h = tape.silu(h);
        let h = self.conv(tape, h, r.conv2);
        let g = self.p(tape, r.gain);
        let h = tape.gain(h, g);
        tape.add(x, h)
    }

    fn attention(&self, tape: &mut Tape<T>, x: Var, a: &AttnP) -> Var {
        let [c, h, w] = tape.shape(x);
        let q = self.conv(tape, x, a.q);
        let k = self.conv(tape, x, a.k);
        let v = self.conv(tape, x, a.v);
        let scores = tape.matmul(q, k, true, false);
        let scores = tape.scale(scores, T::of(1.0 / (c as f64).sqrt()));
        let attn = tape.softmax_rows(scores);
        let o = tape.matmul(v, attn, false, true);
        let o = tape.reshape(o, [c, h, w]);
        let o = self.conv(tape, o, a.o);
        tape.add(x, o)
    }

    /// Records the forward pass; returns the `[2, h, w]` output (re, im planes).
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        x_cond: &ComplexImage,
        x_t: &ComplexImage,
        gamma_bar: f64,
    ) -> Result<Var> {
        self.check_inputs(x_cond, x_t, gamma_bar)?;
        let (h, w) = x_t.shape();
        let mut input: Vec<T> = Vec::with_capacity(IN_CHANNELS * h * w);
        input.extend(x_cond.to_channels().into_iter().map(T::of));
        input.extend(x_t.to_channels().into_iter().map(T::of));
        let x = tape.input(input, [IN_CHANNELS, h, w]);

        let features: Vec<T> = gamma_features(gamma_bar, self.hyper.gamma_embed_dim)
            .into_iter()
            .map(T::of)
            .collect();
        let n_feat = features.len();
        let e = tape.input(features, [n_feat, 1, 1]);
        let e = self.linear(tape, e, self.layout.embed[0]);
        let e = tape.silu(e);
        let e = self.linear(tape, e, self.layout.embed[1]);
        let e = tape.silu(e);
        let e = self.linear(tape, e, self.layout.embed[2]);
        let film: Vec<(Var, Var)> = self
            .hyper
            .widths
            .iter()
            .zip(&self.layout.film)
            .map(|(&c, &off)| (tape.slice(e, off, c), tape.slice(e, off + c, c)))
            .collect();

        let levels = self.hyper.widths.len();
        let mut hcur = self.conv(tape, x, self.layout.conv_in);
        let mut skips = Vec::with_capacity(levels);
        for l in 0..levels {
            for r in &self.layout.enc[l] {
                hcur = self.res_block(tape, hcur, r, film[l]);
            }
            if l + 1 < levels {
                skips.push(hcur);
                let pooled = tape.avg_pool(hcur);
                hcur = self.conv(tape, pooled, self.layout.down[l]);
            }
        }
        if let Some(a) = &self.layout.attn {
            hcur = self.attention(tape, hcur, a);
        }
        for l in (0..levels - 1).rev() {
            let up = tape.upsample(hcur);
            let up = self.conv(tape, up, self.layout.up[l]);
            hcur = tape.add(up, skips[l]);
            for r in &self.layout.dec[l] {
                hcur = self.res_block(tape, hcur, r, film[l]);
            }
        }
        let hcur = tape.silu(hcur);
        Ok(self.conv(tape, hcur, self.layout.conv_out))
    }

    /// Predicted `v` for one input pair.
    pub fn predict(&self, x_cond: &ComplexImage, x_t: &ComplexImage, gamma_bar: f64) -> Result<ComplexImage> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, x_cond, x_t, gamma_bar)?;
        let values: Vec<f64> = tape.value(out).iter().map(|v| v.as_f64()).collect();
        ComplexImage::from_channels(x_t.height(), x_t.width(), &values)
    }

    /// Forward pass plus the parameter gradient of `<seed, output>`, where
    /// `seed` is `dL/dv` in channel layout. Returns the prediction and gradient.
    pub fn predict_with_grad<F>(
        &self,
        x_cond: &ComplexImage,
        x_t: &ComplexImage,
        gamma_bar: f64,
        loss_grad: F,
    ) -> Result<(ComplexImage, f64, Vec<f64>)>
    where
        F: FnOnce(&ComplexImage) -> Result<(f64, ComplexImage)>,
    {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, x_cond, x_t, gamma_bar)?;
        let values: Vec<f64> = tape.value(out).iter().map(|v| v.as_f64()).collect();
        let v = ComplexImage::from_channels(x_t.height(), x_t.width(), &values)
            .map_err(|_| Error::Divergence("network produced non-finite output".into()))?;
        let (loss, dv) = loss_grad(&v)?;
        let seed: Vec<T> = dv.to_channels().into_iter().map(T::of).collect();
        let grad = tape.backward(out, &seed, self.params.len());
        Ok((v, loss, grad.into_iter().map(|g| g.as_f64()).collect()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::sample_noise;

    fn tiny() -> NetHyper {
        NetHyper {
            widths: vec![3, 4],
            blocks_per_level: 1,
            attention: true,
            gamma_embed_dim: 4,
            embed_hidden: 5,
            init: InitScheme::FanIn,
        }
    }

    #[test]
    fn zero_network_predicts_zero() {
        let net = ConvDenoiser::<f32>::zeros(NetHyper::small()).unwrap();
        let x = sample_noise(8, 8, 1);
        let v = net.predict(&x, &x, 0.3).unwrap();
        assert_eq!(v.max_abs(), 0.0);
    }

    #[test]
    fn evaluation_is_deterministic() {
        let net = ConvDenoiser::<f32>::new(NetHyper::small(), 3).unwrap();
        let (a, b) = (sample_noise(8, 8, 1), sample_noise(8, 8, 2));
        let v1 = net.predict(&a, &b, 0.6).unwrap();
        let v2 = net.predict(&a, &b, 0.6).unwrap();
        assert_eq!(v1.to_channels(), v2.to_channels());
        assert_eq!(ConvDenoiser::<f32>::new(NetHyper::small(), 3).unwrap(), net);
    }

    #[test]
    fn rejects_bad_inputs() {
        let net = ConvDenoiser::<f64>::new(tiny(), 0).unwrap();
        let x = sample_noise(4, 4, 1);
        assert!(net.predict(&x, &x, 0.0).is_err());
        assert!(net.predict(&x, &x, 1.5).is_err());
        assert!(net.predict(&x, &sample_noise(4, 2, 1), 0.5).is_err());
        assert!(net.predict(&sample_noise(3, 3, 1), &sample_noise(3, 3, 1), 0.5).is_err());
        let bad = NetHyper {
            widths: vec![],
            ..tiny()
        };
        assert!(ConvDenoiser::<f64>::new(bad, 0).is_err());
    }

    #[test]
    fn constant_one_init() {
        let h = NetHyper {
            init: InitScheme::ConstantOne,
            ..tiny()
        };
        let net = ConvDenoiser::<f64>::new(h, 0).unwrap();
        let mean = net.params().iter().sum::<f64>() / net.n_params() as f64;
        assert!((mean - 1.0).abs() < 1e-3);
    }

    #[test]
    fn gamma_features_are_finite_on_the_whole_range() {
        for g in [1e-8, 0.1, 0.5, 0.99, 1.0] {
            let f = gamma_features(g, 16);
            assert_eq!(f.len(), 16);
            assert!(f.iter().all(|v| v.is_finite()));
        }
    }
}
