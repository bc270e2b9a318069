//! Conditional pretraining and iterative selective distillation.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::{
    adam_update, network_gradient, AdamState, ConvDenoiser, DcTerm, Denoiser, LossParts, LossSpec, NetHyper,
    TrainSample,
};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::kspace::{apply_dc, ComplexImage, KSpaceData};
use crate::masks::{MaskKind, MaskSpec, SamplingMask};
use crate::phantoms::make_training_pair;
use crate::schedule::{
    ddim_step, forward_diffuse, halve_schedule, make_cosine_schedule_with, sample_noise, CosineLaw,
    NoiseSchedule,
};

/// Lower bound on the noise level used as a divisor in the verbatim target.
pub const SIGMA_FLOOR: f64 = 1e-4;

/// How training pairs are simulated from clean images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Mask families; one is picked per sample and re-seeded every mini-batch.
    pub masks: Vec<MaskSpec>,
    pub noise_sd: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            masks: vec![MaskSpec::new(MaskKind::Gaussian1d, 4.0, 8, 0)],
            noise_sd: 0.0,
        }
    }
}

impl DataConfig {
    fn validate(&self) -> Result<()> {
        if self.masks.is_empty() {
            return Err(Error::Parameter("mask pool is empty".into()));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return Err(Error::Parameter(format!("noise_sd must be >= 0, got {}", self.noise_sd)));
        }
        Ok(())
    }
}

/// Stops a round once the smoothed loss stops improving.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EarlyStop {
    pub window: usize,
    pub min_improvement: f64,
    pub smoothing: f64,
}

impl Default for EarlyStop {
    fn default() -> Self {
        EarlyStop {
            window: 500,
            min_improvement: 1e-5,
            smoothing: 0.99,
        }
    }
}

struct Monitor {
    cfg: Option<EarlyStop>,
    ema: Option<f64>,
    last_checkpoint: Option<f64>,
}

impl Monitor {
    fn new(cfg: Option<EarlyStop>) -> Self {
        Monitor {
            cfg,
            ema: None,
            last_checkpoint: None,
        }
    }

    /// Records a loss; returns true when training should stop.
    fn update(&mut self, step: usize, loss: f64) -> bool {
        let Some(cfg) = self.cfg else { return false };
        let ema = match self.ema {
            None => loss,
            Some(e) => cfg.smoothing * e + (1.0 - cfg.smoothing) * loss,
        };
        self.ema = Some(ema);
        if cfg.window == 0 || !step.is_multiple_of(cfg.window) {
            return false;
        }
        let stop = matches!(self.last_checkpoint, Some(prev) if prev - ema < cfg.min_improvement);
        self.last_checkpoint = Some(ema);
        stop
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    /// Number of reverse steps of the training grid.
    pub t_steps: usize,
    pub law: CosineLaw,
    /// Shortcut start index on the training grid; defaults to `t_steps / 8`.
    pub t0: Option<usize>,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub data: DataConfig,
    pub hyper: NetHyper,
    pub seed: u64,
    pub early_stop: Option<EarlyStop>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            t_steps: 128,
            law: CosineLaw::Cumulative,
            t0: None,
            steps: 10_000,
            batch_size: 8,
            lr: 5e-5,
            lr_schedule: LrSchedule::Constant,
            data: DataConfig::default(),
            hyper: NetHyper::default(),
            seed: 0,
            early_stop: Some(EarlyStop::default()),
        }
    }
}

/// Learning-rate policy over a run of `n` optimizer steps.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from `lr` down to `lr * final_frac`.
    Cosine { final_frac: f64 },
}

impl LrSchedule {
    pub fn rate(&self, lr: f64, step: usize, n: usize) -> f64 {
        match *self {
            LrSchedule::Constant => lr,
            LrSchedule::Cosine { final_frac } => {
                let p = if n <= 1 { 0.0 } else { (step - 1) as f64 / (n - 1) as f64 };
                let c = 0.5 * (1.0 + (std::f64::consts::PI * p).cos());
                lr * (final_frac + (1.0 - final_frac) * c)
            }
        }
    }
}

/// Which regression target distillation uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    /// Noise recovered from the start point `x_t` at the level of `t - 2`.
    Verbatim,
    /// The `v` that carries `x_t` to the teacher's two-step state in one DDIM step.
    #[default]
    Progressive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    /// Number of halving rounds (K).
    pub rounds: usize,
    pub steps_per_round: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub dc_enabled: bool,
    /// Restrict draws to the last half of the teacher grid; otherwise the whole path.
    pub selective: bool,
    pub target: TargetMode,
    pub data: DataConfig,
    pub seed: u64,
    pub early_stop: Option<EarlyStop>,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            rounds: 4,
            steps_per_round: 10_000,
            batch_size: 8,
            lr: 5e-5,
            lr_schedule: LrSchedule::Constant,
            dc_enabled: true,
            selective: true,
            target: TargetMode::Progressive,
            data: DataConfig::default(),
            seed: 0,
            early_stop: Some(EarlyStop::default()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub stage: String,
    pub round: usize,
    pub steps_run: usize,
    pub final_loss: f64,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distill: Option<DistillMeta>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillMeta {
    pub selective: bool,
    pub dc_enabled: bool,
    pub target: TargetMode,
}

/// A network together with the grid it samples on and its shortcut start index.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub net: ConvDenoiser<f32>,
    pub schedule: NoiseSchedule,
    pub t0: usize,
    pub meta: TrainingMeta,
}

impl Denoiser for TrainedModel {
    fn predict_v(&self, x_cond: &ComplexImage, x_t: &ComplexImage, gamma_bar: f64) -> Result<ComplexImage> {
        self.net.predict(x_cond, x_t, gamma_bar)
    }
}

/// Progress record passed to training callbacks.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub round: usize,
    pub step: usize,
    pub loss: LossParts,
}

fn check_images(images: &[ComplexImage], hyper: &NetHyper) -> Result<()> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidInput("training set is empty".into()))?;
    let m = hyper.size_multiple();
    for img in images {
        crate::error::check_shape(first.shape(), img.shape())?;
    }
    if first.height() % m != 0 || first.width() % m != 0 {
        return Err(Error::InvalidInput(format!(
            "image size {:?} must be divisible by {m}",
            first.shape()
        )));
    }
    Ok(())
}

fn check_optimizer(steps: usize, batch: usize, lr: f64, schedule: LrSchedule) -> Result<()> {
    if steps == 0 || batch == 0 {
        return Err(Error::Parameter("steps and batch size must be positive".into()));
    }
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::Parameter(format!("learning rate must be positive, got {lr}")));
    }
    if let LrSchedule::Cosine { final_frac } = schedule {
        if !(0.0..=1.0).contains(&final_frac) {
            return Err(Error::Parameter(format!("final_frac must lie in [0, 1], got {final_frac}")));
        }
    }
    Ok(())
}

/// Picks an image and simulates its acquisition for one sample slot.
fn draw_pair(
    images: &[ComplexImage],
    data: &DataConfig,
    rng: &mut ChaCha8Rng,
    seed: u64,
) -> Result<crate::phantoms::TrainingPair> {
    let img = &images[rng.random_range(0..images.len())];
    let spec = &data.masks[rng.random_range(0..data.masks.len())];
    make_training_pair(img, spec, data.noise_sd, seed)
}

/// Conditional pretraining on the `v` objective.
pub fn pretrain(images: &[ComplexImage], cfg: &PretrainConfig) -> Result<TrainedModel> {
    pretrain_with_progress(images, cfg, &mut |_| {})
}

pub fn pretrain_with_progress(
    images: &[ComplexImage],
    cfg: &PretrainConfig,
    progress: &mut dyn FnMut(&StepRecord),
) -> Result<TrainedModel> {
    cfg.data.validate()?;
    check_optimizer(cfg.steps, cfg.batch_size, cfg.lr, cfg.lr_schedule)?;
    cfg.hyper.validate()?;
    check_images(images, &cfg.hyper)?;
    let schedule = make_cosine_schedule_with(cfg.t_steps, cfg.law)?;
    let t0 = cfg.t0.unwrap_or_else(|| schedule.default_t0());
    schedule.check_t(t0)?;
    if t0 == 0 {
        return Err(Error::Parameter("t0 must be at least 1".into()));
    }
    let net = ConvDenoiser::<f32>::new(cfg.hyper.clone(), derive_seed(cfg.seed, 0))?;
    let (net, steps_run, final_loss) = fit(net, &schedule, cfg, images, progress)?;
    Ok(TrainedModel {
        net,
        schedule,
        t0,
        meta: TrainingMeta {
            stage: "pretrain".into(),
            round: 0,
            steps_run,
            final_loss,
            seed: cfg.seed,
            distill: None,
        },
    })
}

/// One pretraining example: random level, random noise, `v` target.
fn pretrain_sample(
    images: &[ComplexImage],
    sched: &NoiseSchedule,
    data: &DataConfig,
    seed: u64,
) -> Result<TrainSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pair = draw_pair(images, data, &mut rng, derive_seed(seed, 1))?;
    let t = rng.random_range(1..=sched.steps());
    let (h, w) = pair.x0.shape();
    let eps = sample_noise(h, w, derive_seed(seed, 2));
    let x_t = forward_diffuse(&pair.x0, t, sched, &eps)?;
    let target_v = eps.lin_comb(sched.alpha(t), &pair.x0, -sched.sigma(t));
    Ok(TrainSample {
        x_cond: pair.x_cond,
        x_t,
        gamma_bar: sched.gamma_bar(t),
        target_v,
        dc: None,
    })
}

fn fit(
    mut net: ConvDenoiser<f32>,
    sched: &NoiseSchedule,
    cfg: &PretrainConfig,
    images: &[ComplexImage],
    progress: &mut dyn FnMut(&StepRecord),
) -> Result<(ConvDenoiser<f32>, usize, f64)> {
    let mut adam = AdamState::new(net.n_params());
    let mut monitor = Monitor::new(cfg.early_stop);
    let mut last = f64::NAN;
    let mut steps_run = 0;
    for step in 1..=cfg.steps {
        let base = derive_seed(cfg.seed, step as u64);
        let batch = (0..cfg.batch_size)
            .into_par_iter()
            .map(|i| pretrain_sample(images, sched, &cfg.data, derive_seed(base, i as u64)))
            .collect::<Result<Vec<_>>>()?;
        let (loss, grad) = network_gradient(&net, &batch, &LossSpec::default())?;
        adam_update(net.params_mut(), &grad, &mut adam, cfg.lr_schedule.rate(cfg.lr, step, cfg.steps))?;
        last = loss.total();
        steps_run = step;
        progress(&StepRecord { round: 0, step, loss });
        if monitor.update(step, last) {
            break;
        }
    }
    Ok((net, steps_run, last))
}

/// Teacher-derived regression target for one student example.
#[derive(Debug, Clone)]
pub struct DistillTarget {
    pub x_t: ComplexImage,
    pub v_hat: ComplexImage,
    /// Teacher's two-step clean estimate (data-consistent when measurements are given).
    pub x_teacher: ComplexImage,
}

/// Runs the teacher for two DDIM steps from `x_t = alpha_t x0 + sigma_t eps`
/// (`t -> t-1 -> t-2` on the teacher grid) and builds the student target.
#[allow(clippy::too_many_arguments)]
pub fn distill_target(
    teacher: &dyn Denoiser,
    x_cond: &ComplexImage,
    x0: &ComplexImage,
    t: usize,
    sched: &NoiseSchedule,
    eps: &ComplexImage,
    dc: Option<(&KSpaceData, &SamplingMask)>,
    mode: TargetMode,
) -> Result<DistillTarget> {
    if t < 2 || !t.is_multiple_of(2) {
        return Err(Error::InvalidStep(format!("distillation needs an even t >= 2, got {t}")));
    }
    sched.check_t(t)?;
    let (t1, t2) = (t - 1, t - 2);
    let x_t = forward_diffuse(x0, t, sched, eps)?;
    let v = teacher.predict_v(x_cond, &x_t, sched.gamma_bar(t))?;
    let x0_first = x_t.lin_comb(sched.alpha(t), &v, -sched.sigma(t));
    let x_t1 = ddim_step(&x_t, &x0_first, t, t1, sched)?;
    let v1 = teacher.predict_v(x_cond, &x_t1, sched.gamma_bar(t1))?;
    let x0_second = x_t1.lin_comb(sched.alpha(t1), &v1, -sched.sigma(t1));
    let (a_t, s_t) = (sched.alpha(t), sched.sigma(t));
    let (a2, s2) = (sched.alpha(t2), sched.sigma(t2));
    let (v_hat, x_clean) = match mode {
        TargetMode::Verbatim => {
            let eps2 = x_t.lin_comb(1.0, &x0_second, -a2).scale(1.0 / s2.max(SIGMA_FLOOR));
            (eps2.lin_comb(a2, &x0_second, -s2), x0_second)
        }
        TargetMode::Progressive => {
            let x_t2 = ddim_step(&x_t1, &x0_second, t1, t2, sched)?;
            let ratio = s2 / s_t;
            let x_tilde = x_t2.lin_comb(1.0, &x_t, -ratio).scale(1.0 / (a2 - ratio * a_t));
            (x_t.lin_comb(a_t / s_t, &x_tilde, -1.0 / s_t), x_tilde)
        }
    };
    let x_teacher = match dc {
        Some((y, mask)) => apply_dc(&x_clean, y, mask)?,
        None => x_clean,
    };
    Ok(DistillTarget { x_t, v_hat, x_teacher })
}

/// Even levels eligible for distillation on a teacher grid of `teacher_steps`.
pub fn distill_window(teacher_steps: usize, selective: bool) -> Vec<usize> {
    let upper = if selective { teacher_steps / 2 } else { teacher_steps };
    (1..=upper / 2).map(|j| 2 * j).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub teacher_steps: usize,
    pub student_steps: usize,
    pub t0: usize,
    pub steps_run: usize,
    pub final_loss: f64,
    pub final_dc_term: f64,
    /// Number of draws of each teacher-grid level.
    pub t_counts: BTreeMap<usize, usize>,
    /// Samples whose loss included the data-consistency term.
    pub dc_terms: usize,
}

#[derive(Debug, Clone)]
pub struct DistillOutcome {
    /// One model per round, in order.
    pub models: Vec<TrainedModel>,
    pub rounds: Vec<RoundReport>,
}

impl DistillOutcome {
    pub fn final_model(&self) -> &TrainedModel {
        self.models.last().expect("at least one round")
    }
}

fn validate_rounds(teacher: &TrainedModel, rounds: usize) -> Result<()> {
    if rounds == 0 {
        return Err(Error::Parameter("at least one distillation round is required".into()));
    }
    let t0 = teacher.t0;
    let mut steps = teacher.schedule.steps();
    for k in 0..rounds {
        if steps < 4 || !steps.is_multiple_of(2) || (t0 >> k) < 2 || !(t0 >> k).is_multiple_of(2) {
            return Err(Error::Parameter(format!(
                "{rounds} rounds exceed the halvable range of a {}-step grid starting at {t0}",
                teacher.schedule.steps()
            )));
        }
        steps /= 2;
    }
    Ok(())
}

/// Iterative distillation: each round the student starts from the teacher,
/// learns to cover two teacher steps in one, then becomes the next teacher on
/// a halved grid.
pub fn distill(teacher: &TrainedModel, images: &[ComplexImage], cfg: &DistillConfig) -> Result<DistillOutcome> {
    distill_with_progress(teacher, images, cfg, &mut |_| {})
}

pub fn distill_with_progress(
    teacher: &TrainedModel,
    images: &[ComplexImage],
    cfg: &DistillConfig,
    progress: &mut dyn FnMut(&StepRecord),
) -> Result<DistillOutcome> {
    cfg.data.validate()?;
    check_optimizer(cfg.steps_per_round, cfg.batch_size, cfg.lr, cfg.lr_schedule)?;
    check_images(images, teacher.net.hyper())?;
    validate_rounds(teacher, cfg.rounds)?;
    let loss_spec = LossSpec {
        dc_weight: if cfg.dc_enabled { 1.0 } else { 0.0 },
    };
    let mut current = teacher.clone();
    let mut models = Vec::with_capacity(cfg.rounds);
    let mut reports = Vec::with_capacity(cfg.rounds);
    for round in 1..=cfg.rounds {
        let t_sched = current.schedule.clone();
        let window = distill_window(t_sched.steps(), cfg.selective);
        let mut student = current.net.clone();
        let mut adam = AdamState::new(student.n_params());
        let mut monitor = Monitor::new(cfg.early_stop);
        let mut t_counts = BTreeMap::new();
        let mut dc_terms = 0;
        let mut last = LossParts::default();
        let mut steps_run = 0;
        let round_seed = derive_seed(cfg.seed, round as u64);
        for step in 1..=cfg.steps_per_round {
            let base = derive_seed(round_seed, step as u64);
            let drawn = (0..cfg.batch_size)
                .into_par_iter()
                .map(|i| {
                    distill_sample(&current, images, &t_sched, &window, cfg, derive_seed(base, i as u64))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut batch = Vec::with_capacity(drawn.len());
            for (t, sample) in drawn {
                *t_counts.entry(t).or_insert(0) += 1;
                dc_terms += usize::from(sample.dc.is_some());
                batch.push(sample);
            }
            let (loss, grad) = network_gradient(&student, &batch, &loss_spec)?;
            let lr = cfg.lr_schedule.rate(cfg.lr, step, cfg.steps_per_round);
            adam_update(student.params_mut(), &grad, &mut adam, lr)?;
            last = loss;
            steps_run = step;
            progress(&StepRecord { round, step, loss });
            if monitor.update(step, loss.total()) {
                break;
            }
        }
        let next = TrainedModel {
            net: student,
            schedule: halve_schedule(&t_sched)?,
            t0: current.t0 / 2,
            meta: TrainingMeta {
                stage: "distill".into(),
                round,
                steps_run,
                final_loss: last.total(),
                seed: cfg.seed,
                distill: Some(DistillMeta {
                    selective: cfg.selective,
                    dc_enabled: cfg.dc_enabled,
                    target: cfg.target,
                }),
            },
        };
        reports.push(RoundReport {
            round,
            teacher_steps: t_sched.steps(),
            student_steps: next.schedule.steps(),
            t0: next.t0,
            steps_run,
            final_loss: last.total(),
            final_dc_term: last.dc_term,
            t_counts,
            dc_terms,
        });
        models.push(next.clone());
        current = next;
    }
    Ok(DistillOutcome { models, rounds: reports })
}

fn distill_sample(
    teacher: &TrainedModel,
    images: &[ComplexImage],
    sched: &NoiseSchedule,
    window: &[usize],
    cfg: &DistillConfig,
    seed: u64,
) -> Result<(usize, TrainSample)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pair = draw_pair(images, &cfg.data, &mut rng, derive_seed(seed, 1))?;
    let t = window[rng.random_range(0..window.len())];
    let (h, w) = pair.x0.shape();
    let eps = sample_noise(h, w, derive_seed(seed, 2));
    let dc = cfg.dc_enabled.then_some((&pair.y, &pair.mask));
    let target = distill_target(teacher, &pair.x_cond, &pair.x0, t, sched, &eps, dc, cfg.target)?;
    let dc_term = cfg.dc_enabled.then(|| DcTerm {
        y: pair.y.clone(),
        mask: pair.mask.clone(),
        x_teacher: target.x_teacher.clone(),
    });
    Ok((
        t,
        TrainSample {
            x_cond: pair.x_cond,
            x_t: target.x_t,
            gamma_bar: sched.gamma_bar(t),
            target_v: target.v_hat,
            dc: dc_term,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::ExactDenoiser;
    use crate::schedule::{eps_from_v, make_cosine_schedule};

    #[test]
    fn cosine_rate_runs_from_lr_to_floor() {
        let s = LrSchedule::Cosine { final_frac: 0.1 };
        assert_eq!(s.rate(2.0, 1, 11), 2.0);
        assert!((s.rate(2.0, 11, 11) - 0.2).abs() < 1e-12);
        assert!((s.rate(2.0, 6, 11) - 1.1).abs() < 1e-12);
        let rates: Vec<f64> = (1..=11).map(|k| s.rate(2.0, k, 11)).collect();
        assert!(rates.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(s.rate(2.0, 1, 1), 2.0);
        assert_eq!(LrSchedule::Constant.rate(2.0, 7, 11), 2.0);
    }

    #[test]
    fn out_of_range_floor_is_rejected() {
        for f in [-0.1, 1.5, f64::NAN] {
            assert!(check_optimizer(10, 2, 1e-3, LrSchedule::Cosine { final_frac: f }).is_err());
        }
        assert!(check_optimizer(10, 2, 1e-3, LrSchedule::Cosine { final_frac: 0.0 }).is_ok());
    }

    #[test]
    fn window_is_even_and_selective() {
        assert_eq!(distill_window(16, true), vec![2, 4, 6, 8]);
        assert_eq!(distill_window(16, false), vec![2, 4, 6, 8, 10, 12, 14, 16]);
        assert_eq!(distill_window(8, true), vec![2, 4]);
        assert_eq!(distill_window(4, true), vec![2]);
    }

    #[test]
    fn perfect_teacher_target() {
        let sched = make_cosine_schedule(16).unwrap();
        let x0 = sample_noise(4, 4, 1);
        let eps = sample_noise(4, 4, 2);
        let teacher = ExactDenoiser { x0: x0.clone() };
        for t in [2, 4, 8] {
            let (a2, s2) = (sched.alpha(t - 2), sched.sigma(t - 2));
            let x_t = forward_diffuse(&x0, t, &sched, &eps).unwrap();
            let got = distill_target(&teacher, &x0, &x0, t, &sched, &eps, None, TargetMode::Verbatim).unwrap();
            let expected = x_t
                .lin_comb(a2 / s2.max(SIGMA_FLOOR), &x0, -a2 * a2 / s2.max(SIGMA_FLOOR))
                .lin_comb(1.0, &x0, -s2);
            assert!(got.v_hat.max_abs_diff(&expected) < 1e-9, "t={t}");
            assert!(got.x_teacher.max_abs_diff(&x0) < 1e-12);
            assert!(got.v_hat.is_finite());
        }
    }

    #[test]
    fn progressive_target_with_perfect_teacher_is_the_true_v() {
        let sched = make_cosine_schedule(16).unwrap();
        let x0 = sample_noise(4, 4, 3);
        let eps = sample_noise(4, 4, 4);
        let teacher = ExactDenoiser { x0: x0.clone() };
        for t in [2, 6, 16] {
            let got =
                distill_target(&teacher, &x0, &x0, t, &sched, &eps, None, TargetMode::Progressive).unwrap();
            let v = eps.lin_comb(sched.alpha(t), &x0, -sched.sigma(t));
            assert!(got.v_hat.max_abs_diff(&v) < 1e-9, "t={t}");
            let recovered = eps_from_v(&got.x_t, &got.v_hat, t, &sched).unwrap();
            assert!(recovered.max_abs_diff(&eps) < 1e-9);
        }
    }

    #[test]
    fn odd_or_small_t_is_rejected() {
        let sched = make_cosine_schedule(16).unwrap();
        let x0 = sample_noise(4, 4, 1);
        let teacher = ExactDenoiser { x0: x0.clone() };
        for t in [0, 1, 3] {
            assert!(distill_target(&teacher, &x0, &x0, t, &sched, &x0, None, TargetMode::Verbatim).is_err());
        }
    }

    #[test]
    fn early_stop_triggers_on_plateau() {
        let mut m = Monitor::new(Some(EarlyStop {
            window: 10,
            min_improvement: 1e-5,
            smoothing: 0.5,
        }));
        let mut stopped_at = None;
        for step in 1..=100 {
            if m.update(step, 1.0) {
                stopped_at = Some(step);
                break;
            }
        }
        assert_eq!(stopped_at, Some(20));
        let mut never = Monitor::new(None);
        assert!((1..1000).all(|s| !never.update(s, 1.0)));
    }
}
