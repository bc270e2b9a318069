use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde_json::{json, Map, Value};
use ssdm_core::experiment::{ablate_with_progress, make_test_set, oracle_posterior_check, AblationCell, AblationConfig, OracleCheckConfig};
use ssdm_core::io::{
    load_checkpoint, read_grids, read_image, read_kspace, read_mask, save_checkpoint, write_grids, write_image,
    write_kspace, write_mask,
};
use ssdm_core::kspace::{forward_model, zero_fill, Frequency};
use ssdm_core::masks::{make_mask, realized_af};
use ssdm_core::metrics::{evaluate, Metric};
use ssdm_core::multicoil::{apply_sensitivities, multicoil_reconstruct, synthetic_sensitivities, MulticoilOptions};
use ssdm_core::phantoms::phantom_set;
use ssdm_core::sampler::{sample_shortcut_traced, uncertainty_map, DcMode, Trace};
use ssdm_core::training::{distill_with_progress, pretrain_with_progress, DataConfig, DistillConfig, PretrainConfig};
use ssdm_core::{derive_seed, ComplexImage, Error, MaskKind, MaskSpec, TrainedModel};

use crate::log::event;
use crate::{
    AblateArgs, Command, DistillArgs, DistillOpts, EvalArgs, MaskArgs, MaskOpts, PhantomArgs, PretrainArgs,
    ReconstructArgs, ReconstructMcArgs, SimulateArgs, ToyOracleArgs, TrainData, UncertaintyArgs,
};

pub enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

type CmdResult = Result<(), Failure>;

const LOG_EVERY: usize = 100;

pub fn configure_threads(flag: Option<usize>) -> Result<(), String> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var("SSDM_THREADS") {
            Ok(v) => Some(v.trim().parse().map_err(|_| format!("SSDM_THREADS must be an integer, got '{v}'"))?),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            return Err("thread count must be positive".into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| e.to_string())?;
    }
    Ok(())
}

pub fn run(cmd: Command) -> CmdResult {
    match cmd {
        Command::Phantom(a) => phantom(a),
        Command::Mask(a) => mask(a),
        Command::Simulate(a) => simulate(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Distill(a) => distill(a),
        Command::Reconstruct(a) => reconstruct(a),
        Command::ReconstructMc(a) => reconstruct_mc(a),
        Command::Eval(a) => eval(a),
        Command::Uncertainty(a) => uncertainty(a),
        Command::ToyOracle(a) => toy_oracle(a),
        Command::Ablate(a) => ablate(a),
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn mask_spec(opts: &MaskOpts, seed: u64) -> Result<MaskSpec, Failure> {
    let kind: MaskKind = opts
        .kind
        .as_deref()
        .unwrap_or("gaussian1d")
        .parse()
        .map_err(|e: Error| usage(e.to_string()))?;
    Ok(MaskSpec::new(kind, opts.af.unwrap_or(4.0), opts.acs.unwrap_or(4), seed))
}

fn mask_given(opts: &MaskOpts) -> bool {
    opts.kind.is_some() || opts.af.is_some() || opts.acs.is_some()
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::Runtime(e.into()))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Runtime(e.into()))?;
    fs::write(path, text + "\n").map_err(|e| Failure::Runtime(e.into()))
}

fn read_config<T: DeserializeOwned + Default>(path: Option<&PathBuf>) -> Result<T, Failure> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::Runtime(e.into()))?;
            serde_json::from_str(&text).map_err(|e| Failure::Runtime(e.into()))
        }
    }
}

/// All `.ciq` images in a directory, in file-name order.
fn read_image_dir(dir: &Path) -> Result<Vec<ComplexImage>, Failure> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Failure::Runtime(e.into()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ciq"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Failure::Runtime(Error::InvalidInput(format!("no .ciq images in {}", dir.display()))));
    }
    Ok(paths.iter().map(|p| read_image(p)).collect::<ssdm_core::Result<Vec<_>>>()?)
}

fn training_images(train: &TrainData, seed: u64) -> Result<Vec<ComplexImage>, Failure> {
    match (&train.data, train.phantoms) {
        (Some(dir), _) => read_image_dir(dir),
        (None, Some(n)) => Ok(phantom_set(n, train.size, derive_seed(seed, 7), train.phase)?),
        (None, None) => Err(usage("one of --data or --phantoms is required")),
    }
}

fn phantom(a: PhantomArgs) -> CmdResult {
    let images = phantom_set(a.count, a.size, a.seed, a.phase)?;
    create_dir(&a.out)?;
    for (i, img) in images.iter().enumerate() {
        write_image(&a.out.join(format!("phantom_{i:05}.ciq")), img)?;
    }
    event(
        "phantom",
        &[("count", a.count.to_string()), ("size", a.size.to_string()), ("out", a.out.display().to_string())],
    );
    Ok(())
}

fn mask(a: MaskArgs) -> CmdResult {
    let spec = mask_spec(&a.mask, a.seed)?;
    let m = make_mask(&spec, a.height, a.width)?;
    write_mask(&a.out, &m)?;
    event(
        "mask",
        &[
            ("kind", spec.kind.to_string()),
            ("requested_af", spec.af.to_string()),
            ("realized_af", format!("{:.4}", realized_af(&m)?)),
            ("out", a.out.display().to_string()),
        ],
    );
    Ok(())
}

fn simulate(a: SimulateArgs) -> CmdResult {
    if a.coils == 0 {
        return Err(usage("--coils must be positive"));
    }
    let x = read_image(&a.image)?;
    let (h, w) = x.shape();
    let spec = mask_spec(&a.mask, derive_seed(a.seed, 0))?;
    let m = make_mask(&spec, h, w)?;
    create_dir(&a.out)?;
    write_mask(&a.out.join("mask.ciq"), &m)?;
    if a.coils == 1 {
        let y = forward_model(&x, &m, a.noise_sd, derive_seed(a.seed, 1))?;
        write_kspace(&a.out.join("kspace.ciq"), &y)?;
        write_image(&a.out.join("zero_fill.ciq"), &zero_fill(&y, &m)?)?;
    } else {
        let sens = synthetic_sensitivities(h, w, a.coils)?;
        let coils = apply_sensitivities(&x, &sens)?;
        let ys = coils
            .iter()
            .enumerate()
            .map(|(c, img)| forward_model(img, &m, a.noise_sd, derive_seed(a.seed, 10 + c as u64)))
            .collect::<ssdm_core::Result<Vec<_>>>()?;
        let zf = ys.iter().map(|y| zero_fill(y, &m)).collect::<ssdm_core::Result<Vec<_>>>()?;
        write_grids(&a.out.join("kspace.ciq"), &ys)?;
        write_grids(&a.out.join("zero_fill.ciq"), &zf)?;
    }
    event(
        "simulate",
        &[
            ("coils", a.coils.to_string()),
            ("realized_af", format!("{:.4}", realized_af(&m)?)),
            ("out", a.out.display().to_string()),
        ],
    );
    Ok(())
}

fn data_config(base: DataConfig, mask: &MaskOpts, noise_sd: Option<f64>, config_given: bool, seed: u64) -> Result<DataConfig, Failure> {
    let mut data = base;
    if mask_given(mask) || !config_given {
        data.masks = vec![mask_spec(mask, seed)?];
    }
    if let Some(sd) = noise_sd {
        data.noise_sd = sd;
    }
    Ok(data)
}

fn pretrain(a: PretrainArgs) -> CmdResult {
    let mut cfg: PretrainConfig = read_config(a.config.as_ref())?;
    cfg.data = data_config(cfg.data, &a.mask, a.noise_sd, a.config.is_some(), a.seed)?;
    cfg.t_steps = a.t_steps.unwrap_or(cfg.t_steps);
    cfg.t0 = a.t0.or(cfg.t0);
    cfg.steps = a.steps.unwrap_or(cfg.steps);
    cfg.batch_size = a.batch.unwrap_or(cfg.batch_size);
    cfg.lr = a.lr.unwrap_or(cfg.lr);
    if let Some(w) = a.widths {
        cfg.hyper.widths = w;
    }
    cfg.seed = a.seed;
    let images = training_images(&a.train, a.seed)?;
    event(
        "pretrain_start",
        &[("images", images.len().to_string()), ("steps", cfg.steps.to_string()), ("T", cfg.t_steps.to_string())],
    );
    let model = pretrain_with_progress(&images, &cfg, &mut |r| {
        if r.step % LOG_EVERY == 0 {
            event("pretrain_step", &[("step", r.step.to_string()), ("loss", format!("{:.6}", r.loss.total()))]);
        }
    })?;
    save_checkpoint(&model, &a.out)?;
    event(
        "pretrain_done",
        &[
            ("steps_run", model.meta.steps_run.to_string()),
            ("final_loss", format!("{:.6}", model.meta.final_loss)),
            ("out", a.out.display().to_string()),
        ],
    );
    Ok(())
}

fn distill_config(opts: &DistillOpts) -> Result<DistillConfig, Failure> {
    let mut cfg: DistillConfig = read_config(opts.config.as_ref())?;
    cfg.data = data_config(cfg.data, &opts.mask, opts.noise_sd, opts.config.is_some(), opts.seed)?;
    cfg.rounds = opts.rounds.unwrap_or(cfg.rounds);
    cfg.steps_per_round = opts.steps.unwrap_or(cfg.steps_per_round);
    cfg.batch_size = opts.batch.unwrap_or(cfg.batch_size);
    cfg.lr = opts.lr.unwrap_or(cfg.lr);
    cfg.seed = opts.seed;
    Ok(cfg)
}

fn distill(a: DistillArgs) -> CmdResult {
    let teacher = load_checkpoint(&a.model)?;
    let mut cfg = distill_config(&a.opts)?;
    cfg.dc_enabled = !a.no_dc;
    cfg.selective = !a.whole_path;
    let images = training_images(&a.train, a.opts.seed)?;
    create_dir(&a.out)?;
    let outcome = distill_with_progress(&teacher, &images, &cfg, &mut |r| {
        if r.step % LOG_EVERY == 0 {
            event(
                "distill_step",
                &[
                    ("round", r.round.to_string()),
                    ("step", r.step.to_string()),
                    ("loss", format!("{:.6}", r.loss.total())),
                    ("dc_term", format!("{:.6}", r.loss.dc_term)),
                ],
            );
        }
    })?;
    for (m, r) in outcome.models.iter().zip(&outcome.rounds) {
        save_checkpoint(m, &a.out.join(format!("round_{}.ssdm", r.round)))?;
        event(
            "distill_round",
            &[
                ("round", r.round.to_string()),
                ("student_steps", r.student_steps.to_string()),
                ("t0", r.t0.to_string()),
                ("final_loss", format!("{:.6}", r.final_loss)),
            ],
        );
    }
    write_json(&a.out.join("report.json"), &json!({ "config": cfg, "rounds": outcome.rounds }))?;
    Ok(())
}

fn model_t0(model: &TrainedModel, t0: Option<usize>) -> usize {
    t0.unwrap_or(model.t0)
}

fn reconstruct(a: ReconstructArgs) -> CmdResult {
    let dc_mode: DcMode = a.dc.parse().map_err(|e: Error| usage(e.to_string()))?;
    let model = load_checkpoint(&a.model)?;
    let y = read_kspace(&a.kspace)?;
    let m = read_mask(&a.mask)?;
    let t0 = model_t0(&model, a.t0);
    let trace = Trace::new();
    let x = sample_shortcut_traced(&model, &y, &m, &model.schedule, t0, a.seed, dc_mode, &trace)?;
    write_image(&a.out, &x)?;
    event(
        "reconstruct",
        &[
            ("t0", t0.to_string()),
            ("denoiser_calls", trace.denoiser_calls().to_string()),
            ("dc_calls", trace.dc_calls().to_string()),
            ("out", a.out.display().to_string()),
        ],
    );
    Ok(())
}

fn reconstruct_mc(a: ReconstructMcArgs) -> CmdResult {
    let model = load_checkpoint(&a.model)?;
    let ys = read_grids::<Frequency>(&a.kspace)?;
    let m = read_mask(&a.mask)?;
    let t0 = model_t0(&model, a.t0);
    let opts = MulticoilOptions {
        window: a.window,
        reestimate: a.reestimate,
    };
    let trace = Trace::new();
    let x = multicoil_reconstruct(&model, &model.schedule, t0, &ys, &m, a.seed, opts, &trace)?;
    write_image(&a.out, &x)?;
    event(
        "reconstruct_mc",
        &[
            ("coils", ys.len().to_string()),
            ("t0", t0.to_string()),
            ("denoiser_calls", trace.denoiser_calls().to_string()),
            ("out", a.out.display().to_string()),
        ],
    );
    Ok(())
}

fn eval(a: EvalArgs) -> CmdResult {
    let metrics = a
        .metrics
        .iter()
        .map(|s| s.parse::<Metric>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| usage(e.to_string()))?;
    let reference = read_image(&a.reference)?;
    let test = read_image(&a.test)?;
    let mut report = Map::new();
    for (m, v) in evaluate(&reference, &test, &metrics)? {
        report.insert(m.name().into(), json!(v));
    }
    let report = Value::Object(report);
    println!("{report}");
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    Ok(())
}

fn uncertainty(a: UncertaintyArgs) -> CmdResult {
    if a.repeats < 2 {
        return Err(usage("--repeats must be at least 2"));
    }
    let model = load_checkpoint(&a.model)?;
    let y = read_kspace(&a.kspace)?;
    let m = read_mask(&a.mask)?;
    let t0 = model_t0(&model, a.t0);
    let seeds: Vec<u64> = (0..a.repeats as u64)
        .map(|i| if a.fixed_seed { a.seed } else { derive_seed(a.seed, i) })
        .collect();
    let u = uncertainty_map(&model, &model.schedule, t0, &y, &m, &seeds)?;
    create_dir(&a.out)?;
    write_image(&a.out.join("mean.ciq"), &u.mean)?;
    let (h, w) = u.sd.shape();
    let sd = ComplexImage::from_fn(h, w, |r, c| u.sd.get(r, c).into());
    write_image(&a.out.join("sd.ciq"), &sd)?;
    let max_sd = u.sd.max();
    let mean_sd = u.sd.data().iter().sum::<f64>() / u.sd.data().len() as f64;
    write_json(
        &a.out.join("summary.json"),
        &json!({ "repeats": a.repeats, "fixed_seed": a.fixed_seed, "max_sd": max_sd, "mean_sd": mean_sd }),
    )?;
    event("uncertainty", &[("repeats", a.repeats.to_string()), ("max_sd", format!("{max_sd:.6e}"))]);
    Ok(())
}

fn toy_oracle(a: ToyOracleArgs) -> CmdResult {
    let cfg = OracleCheckConfig {
        dim: a.dim,
        steps: a.steps,
        samples: a.samples,
        noise_sd: a.noise_sd,
        seed: a.seed,
    };
    let check = oracle_posterior_check(&cfg)?;
    let report = json!({
        "dim": cfg.dim,
        "steps": cfg.steps,
        "samples": cfg.samples,
        "rel_error": check.rel_error,
        "pass": check.rel_error < 0.02,
    });
    println!("posterior-mean relative error {:.4}%", 100.0 * check.rel_error);
    event("toy_oracle", &[("rel_error", format!("{:.6}", check.rel_error))]);
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    Ok(())
}

fn parse_cell(s: &str) -> Result<AblationCell, Failure> {
    let (dc, sel) = s
        .split_once('/')
        .ok_or_else(|| usage(format!("ablation cell '{s}' must look like dc/selective")))?;
    let dc = match dc {
        "dc" => true,
        "no-dc" => false,
        other => return Err(usage(format!("unknown dc setting '{other}'"))),
    };
    let selective = match sel {
        "selective" => true,
        "whole-path" => false,
        other => return Err(usage(format!("unknown distillation window '{other}'"))),
    };
    Ok(AblationCell { dc, selective })
}

fn ablate(a: AblateArgs) -> CmdResult {
    let teacher = load_checkpoint(&a.model)?;
    let distill = distill_config(&a.opts)?;
    let cells = match &a.cells {
        None => AblationCell::ALL.to_vec(),
        Some(list) => list.iter().map(|s| parse_cell(s)).collect::<Result<Vec<_>, _>>()?,
    };
    let images = training_images(&a.train, a.opts.seed)?;
    let (h, w) = images[0].shape();
    if h != w {
        return Err(Failure::Runtime(Error::InvalidInput("ablation test phantoms need square training images".into())));
    }
    let held_out = phantom_set(a.test_count, h, a.test_seed, a.train.phase)?;
    let spec = distill.data.masks[0];
    let test = make_test_set(&held_out, &spec, distill.data.noise_sd, derive_seed(a.test_seed, 1))?;
    let cfg = AblationConfig {
        distill,
        cells,
        eval_seed: derive_seed(a.test_seed, 2),
    };
    let report = ablate_with_progress(&teacher, &images, &test, &cfg, &mut |cell, row| {
        event(
            "ablate_round",
            &[
                ("cell", cell.label()),
                ("round", row.round.to_string()),
                ("steps", row.steps.to_string()),
                ("psnr", format!("{:.4}", row.psnr)),
                ("ssim", format!("{:.4}", row.ssim)),
            ],
        );
    })?;
    eprint!("{}", report.table());
    write_json(&a.out, &report)?;
    Ok(())
}
