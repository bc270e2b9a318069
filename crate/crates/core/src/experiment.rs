//! Held-out evaluation and the data-consistency / selective-distillation ablation.

use serde::{Deserialize, Serialize};

use rayon::prelude::*;

use crate::denoiser::{Denoiser, GaussianOracle, GaussianToyProblem};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::kspace::{ComplexImage, KSpaceData};
use crate::masks::MaskSpec;
use crate::metrics::{psnr, ssim_default, RealImage};
use crate::phantoms::{make_training_pair, TrainingPair};
use crate::masks::SamplingMask;
use crate::sampler::{sample_full, sample_shortcut_traced, DcMode, Trace};
use crate::schedule::{make_cosine_schedule, NoiseSchedule};
use crate::training::{distill, DistillConfig, TrainedModel};

/// Simulated acquisitions of held-out images, one mask draw per image.
pub fn make_test_set(images: &[ComplexImage], spec: &MaskSpec, noise_sd: f64, seed: u64) -> Result<Vec<TrainingPair>> {
    images
        .iter()
        .enumerate()
        .map(|(i, x)| make_training_pair(x, spec, noise_sd, derive_seed(seed, i as u64)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub psnr: f64,
    pub ssim: f64,
    pub per_image_psnr: Vec<f64>,
    pub denoiser_calls: usize,
    pub dc_calls: usize,
}

fn summarize(pairs: &[TrainingPair], outputs: &[ComplexImage], trace: &Trace) -> Result<EvalSummary> {
    let mut per_image_psnr = Vec::with_capacity(pairs.len());
    let mut ssim_sum = 0.0;
    for (p, out) in pairs.iter().zip(outputs) {
        let (a, b) = (RealImage::magnitude(&p.x0), RealImage::magnitude(out));
        per_image_psnr.push(psnr(&a, &b)?);
        ssim_sum += ssim_default(&a, &b)?;
    }
    let n = pairs.len() as f64;
    Ok(EvalSummary {
        psnr: per_image_psnr.iter().sum::<f64>() / n,
        ssim: ssim_sum / n,
        per_image_psnr,
        denoiser_calls: trace.denoiser_calls(),
        dc_calls: trace.dc_calls(),
    })
}

/// Metrics of the zero-filled inputs.
pub fn evaluate_zero_fill(pairs: &[TrainingPair]) -> Result<EvalSummary> {
    let outputs: Vec<ComplexImage> = pairs.iter().map(|p| p.x_cond.clone()).collect();
    summarize(pairs, &outputs, &Trace::new())
}

/// Shortcut reconstruction of every test pair; reconstruction seeds derive from `seed`.
pub fn evaluate_model(
    model: &dyn Denoiser,
    sched: &NoiseSchedule,
    t0: usize,
    pairs: &[TrainingPair],
    dc_mode: DcMode,
    seed: u64,
) -> Result<EvalSummary> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("empty test set".into()));
    }
    let trace = Trace::new();
    let outputs = pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            sample_shortcut_traced(model, &p.y, &p.mask, sched, t0, derive_seed(seed, i as u64), dc_mode, &trace)
        })
        .collect::<Result<Vec<_>>>()?;
    summarize(pairs, &outputs, &trace)
}

/// One configuration of the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationCell {
    pub dc: bool,
    pub selective: bool,
}

impl AblationCell {
    pub const ALL: [AblationCell; 4] = [
        AblationCell { dc: true, selective: true },
        AblationCell { dc: false, selective: true },
        AblationCell { dc: true, selective: false },
        AblationCell { dc: false, selective: false },
    ];

    pub fn label(&self) -> String {
        format!(
            "{}/{}",
            if self.dc { "dc" } else { "no-dc" },
            if self.selective { "selective" } else { "whole-path" }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub distill: DistillConfig,
    pub cells: Vec<AblationCell>,
    pub eval_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundResult {
    pub round: usize,
    pub steps: usize,
    pub psnr: f64,
    pub ssim: f64,
    /// Projections applied at inference.
    pub dc_calls: usize,
    /// Training samples whose loss included the data-consistency term.
    pub dc_loss_terms: usize,
    pub per_image_psnr: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: AblationCell,
    pub rounds: Vec<RoundResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub zero_fill_psnr: f64,
    pub zero_fill_ssim: f64,
    pub cells: Vec<CellResult>,
}

impl AblationReport {
    pub fn cell(&self, dc: bool, selective: bool) -> Option<&CellResult> {
        self.cells.iter().find(|c| c.cell == AblationCell { dc, selective })
    }

    /// Plain-text table, one row per round and one column pair per cell.
    pub fn table(&self) -> String {
        let mut out = format!("zero-fill psnr={:.3} ssim={:.4}\n", self.zero_fill_psnr, self.zero_fill_ssim);
        out.push_str("round steps");
        for c in &self.cells {
            out.push_str(&format!(" | {:>20}", c.cell.label()));
        }
        out.push('\n');
        let rounds = self.cells.first().map_or(0, |c| c.rounds.len());
        for r in 0..rounds {
            let first = &self.cells[0].rounds[r];
            out.push_str(&format!("{:>5} {:>5}", first.round, first.steps));
            for c in &self.cells {
                let row = &c.rounds[r];
                out.push_str(&format!(" | {:>9.3} / {:>7.4}", row.psnr, row.ssim));
            }
            out.push('\n');
        }
        out
    }
}

/// Distills `teacher` once per cell and evaluates every round on the test pairs.
/// Round 0 is the teacher itself.
pub fn ablate(
    teacher: &TrainedModel,
    train: &[ComplexImage],
    test: &[TrainingPair],
    cfg: &AblationConfig,
) -> Result<AblationReport> {
    ablate_with_progress(teacher, train, test, cfg, &mut |_, _| {})
}

pub fn ablate_with_progress(
    teacher: &TrainedModel,
    train: &[ComplexImage],
    test: &[TrainingPair],
    cfg: &AblationConfig,
    progress: &mut dyn FnMut(AblationCell, &RoundResult),
) -> Result<AblationReport> {
    if cfg.cells.is_empty() {
        return Err(Error::InvalidInput("no ablation cells requested".into()));
    }
    let zero = evaluate_zero_fill(test)?;
    let mut cells = Vec::with_capacity(cfg.cells.len());
    for &cell in &cfg.cells {
        let dc_mode = if cell.dc { DcMode::Final } else { DcMode::Off };
        let run_cfg = DistillConfig {
            dc_enabled: cell.dc,
            selective: cell.selective,
            ..cfg.distill.clone()
        };
        let outcome = distill(teacher, train, &run_cfg)?;
        let mut rounds = Vec::with_capacity(outcome.models.len() + 1);
        let models = std::iter::once(teacher).chain(outcome.models.iter());
        for (k, m) in models.enumerate() {
            let e = evaluate_model(m, &m.schedule, m.t0, test, dc_mode, cfg.eval_seed)?;
            let row = RoundResult {
                round: k,
                steps: m.t0,
                psnr: e.psnr,
                ssim: e.ssim,
                dc_calls: e.dc_calls,
                dc_loss_terms: if k == 0 { 0 } else { outcome.rounds[k - 1].dc_terms },
                per_image_psnr: e.per_image_psnr,
            };
            progress(cell, &row);
            rounds.push(row);
        }
        cells.push(CellResult { cell, rounds });
    }
    Ok(AblationReport {
        zero_fill_psnr: zero.psnr,
        zero_fill_ssim: zero.ssim,
        cells,
    })
}

/// Settings for the analytic-denoiser posterior check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleCheckConfig {
    /// Real dimension of the toy problem; must be even.
    pub dim: usize,
    pub steps: usize,
    pub samples: usize,
    pub noise_sd: f64,
    pub seed: u64,
}

impl Default for OracleCheckConfig {
    fn default() -> Self {
        OracleCheckConfig {
            dim: 8,
            steps: 16,
            samples: 20_000,
            noise_sd: 0.3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OracleCheck {
    pub problem: GaussianToyProblem,
    pub y: KSpaceData,
    pub closed_form: ComplexImage,
    pub sampled_mean: ComplexImage,
    pub rel_error: f64,
}

/// Near-square grid holding `cells` pixels.
fn toy_shape(cells: usize) -> (usize, usize) {
    let h = (1..=cells).filter(|h| cells.is_multiple_of(*h) && h * h <= cells).max().unwrap_or(1);
    (h, cells / h)
}

/// Draws a random Gaussian toy problem on a checkerboard mask, runs full
/// sampling with the analytic denoiser once per seed and compares the sample
/// mean with the closed-form posterior mean.
pub fn oracle_posterior_check(cfg: &OracleCheckConfig) -> Result<OracleCheck> {
    if cfg.dim < 2 || !cfg.dim.is_multiple_of(2) {
        return Err(Error::Parameter(format!("dim must be even and at least 2, got {}", cfg.dim)));
    }
    if cfg.samples == 0 {
        return Err(Error::Parameter("samples must be positive".into()));
    }
    let (h, w) = toy_shape(cfg.dim / 2);
    let cells = (0..h * w).map(|i| (i / w + i % w) % 2 == 0).collect();
    let mask = SamplingMask::from_cells(h, w, cells)?;
    let problem = GaussianToyProblem::random(mask.clone(), cfg.noise_sd, derive_seed(cfg.seed, 0))?;
    let x0 = problem.sample_prior(derive_seed(cfg.seed, 1));
    let y = problem.measure(&x0, derive_seed(cfg.seed, 2))?;
    let closed_form = problem.posterior_mean(&y)?;
    let oracle = GaussianOracle::new(problem.clone(), y.clone())?;
    let sched = make_cosine_schedule(cfg.steps)?;
    let draws = (0..cfg.samples)
        .into_par_iter()
        .map(|i| sample_full(&oracle, &y, &mask, &sched, derive_seed(cfg.seed, 100 + i as u64), DcMode::Off))
        .collect::<Result<Vec<_>>>()?;
    let mut sum = ComplexImage::zeros(h, w);
    for d in &draws {
        sum = sum.lin_comb(1.0, d, 1.0);
    }
    let sampled_mean = sum.scale(1.0 / cfg.samples as f64);
    let rel_error = sampled_mean.relative_error(&closed_form);
    Ok(OracleCheck {
        problem,
        y,
        closed_form,
        sampled_mean,
        rel_error,
    })
}
