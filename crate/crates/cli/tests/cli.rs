use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ssdm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ssdm"))
        .args(args)
        .env_remove("SSDM_THREADS")
        .output()
        .expect("spawn ssdm")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = ssdm(args);
    assert!(
        out.status.success(),
        "ssdm {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

#[test]
fn eval_of_identical_images_reports_sentinels() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["phantom", "--size", "16", "--count", "1", "--seed", "3", "--out", p(dir.path())]);
    let img = dir.path().join("phantom_00000.ciq");
    let out = ok(&["eval", "--reference", p(&img), "--test", p(&img)]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["psnr"], 99.99);
    assert_eq!(report["ssim"], 1.0);
    assert_eq!(report["xsim"], 1.0);
    assert_eq!(report["hfen"], 0.0);
}

#[test]
fn usage_errors_exit_with_one() {
    let out = ssdm(&["reconstruct", "--kspace", "k.ciq", "--mask", "m.ciq", "--out", "x.ciq"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("--model") && err.contains("Usage"), "{err}");

    assert_eq!(ssdm(&["eval", "--bogus"]).status.code(), Some(1));
    assert_eq!(ssdm(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(ssdm(&["mask", "--kind", "hexagonal", "--out", "m.ciq"]).status.code(), Some(1));
}

#[test]
fn help_exits_cleanly_and_lists_subcommands() {
    let out = ok(&["--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in [
        "phantom", "mask", "simulate", "pretrain", "distill", "reconstruct", "reconstruct-mc", "eval", "uncertainty",
        "toy-oracle", "ablate",
    ] {
        assert!(text.contains(cmd), "help is missing {cmd}");
    }
}

#[test]
fn runtime_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.ssdm");
    let out = ssdm(&[
        "reconstruct", "--model", p(&missing), "--kspace", "k.ciq", "--mask", "m.ciq", "--out", "x.ciq",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("event=error"));

    let junk = dir.path().join("junk.ssdm");
    fs::write(&junk, b"SSDM0 not a checkpoint").unwrap();
    let out = ssdm(&["reconstruct", "--model", p(&junk), "--kspace", "k.ciq", "--mask", "m.ciq", "--out", "x.ciq"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn toy_oracle_meets_the_posterior_tolerance() {
    let out = ok(&["toy-oracle", "--dim", "8", "--steps", "16"]);
    let text = String::from_utf8_lossy(&out.stdout);
    let pct: f64 = text
        .split_whitespace()
        .find_map(|w| w.strip_suffix('%').and_then(|v| v.parse().ok()))
        .expect("percentage in output");
    assert!(pct < 2.0, "{text}");
}

#[test]
fn thread_setting_is_validated() {
    let out = Command::new(env!("CARGO_BIN_EXE_ssdm"))
        .args(["toy-oracle", "--samples", "10"])
        .env("SSDM_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let out = ssdm(&["--threads", "0", "toy-oracle", "--samples", "10"]);
    assert_eq!(out.status.code(), Some(1));
}

/// Runs the whole chain in `dir` and returns every written file with its bytes.
fn pipeline(dir: &Path, threads: &str) -> Vec<(String, Vec<u8>)> {
    let d = |name: &str| dir.join(name);
    let t = ["--threads", threads];
    ok(&[&t[..], &["phantom", "--size", "16", "--count", "3", "--seed", "1", "--out", p(&d("train"))]].concat());
    let image = d("train").join("phantom_00000.ciq");
    ok(&[&t[..], &["mask", "--kind", "poisson2d", "--af", "3", "--acs", "2", "--height", "16", "--width", "16", "--seed", "2", "--out", p(&d("mask.ciq"))]].concat());
    ok(&[&t[..], &["simulate", "--image", p(&image), "--af", "2", "--acs", "2", "--seed", "3", "--out", p(&d("acq"))]].concat());
    ok(&[&t[..], &["simulate", "--image", p(&image), "--af", "2", "--acs", "2", "--coils", "3", "--seed", "3", "--out", p(&d("acq_mc"))]].concat());
    ok(&[
        &t[..],
        &["pretrain", "--data", p(&d("train")), "--af", "2", "--acs", "2", "--t-steps", "8", "--t0", "2", "--steps", "3",
          "--batch", "2", "--lr", "1e-3", "--widths", "4,8", "--seed", "4", "--out", p(&d("teacher.ssdm"))],
    ]
    .concat());
    ok(&[
        &t[..],
        &["distill", "--model", p(&d("teacher.ssdm")), "--data", p(&d("train")), "--af", "2", "--acs", "2", "--rounds",
          "1", "--steps", "2", "--batch", "2", "--lr", "1e-3", "--seed", "5", "--out", p(&d("student"))],
    ]
    .concat());
    let student = d("student").join("round_1.ssdm");
    let acq = d("acq");
    ok(&[
        &t[..],
        &["reconstruct", "--model", p(&student), "--kspace", p(&acq.join("kspace.ciq")), "--mask",
          p(&acq.join("mask.ciq")), "--seed", "6", "--out", p(&d("recon.ciq"))],
    ]
    .concat());
    ok(&[
        &t[..],
        &["reconstruct-mc", "--model", p(&student), "--kspace", p(&d("acq_mc").join("kspace.ciq")), "--mask",
          p(&d("acq_mc").join("mask.ciq")), "--window", "5", "--seed", "6", "--out", p(&d("recon_mc.ciq"))],
    ]
    .concat());
    ok(&[
        &t[..],
        &["uncertainty", "--model", p(&student), "--kspace", p(&acq.join("kspace.ciq")), "--mask",
          p(&acq.join("mask.ciq")), "--repeats", "3", "--seed", "7", "--out", p(&d("unc"))],
    ]
    .concat());
    ok(&[
        &t[..],
        &["eval", "--reference", p(&image), "--test", p(&d("recon.ciq")), "--out", p(&d("eval.json"))],
    ]
    .concat());
    ok(&[
        &t[..],
        &["ablate", "--model", p(&d("teacher.ssdm")), "--data", p(&d("train")), "--af", "2", "--acs", "2", "--rounds",
          "1", "--steps", "2", "--batch", "2", "--test-count", "2", "--cells", "dc/selective,no-dc/whole-path",
          "--out", p(&d("ablation.json"))],
    ]
    .concat());

    let mut files = Vec::new();
    collect(dir, dir, &mut files);
    files.sort();
    files
}

fn collect(root: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) {
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            collect(root, &path, out);
        } else {
            let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
            out.push((rel, fs::read(&path).unwrap()));
        }
    }
}

#[test]
fn full_pipeline_is_deterministic_across_thread_counts() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = pipeline(a.path(), "1");
    let second = pipeline(b.path(), "2");
    let names: Vec<&str> = first.iter().map(|(n, _)| n.as_str()).collect();
    for expected in ["teacher.ssdm", "student/round_1.ssdm", "student/report.json", "recon.ciq", "recon_mc.ciq", "unc/sd.ciq", "ablation.json", "eval.json"] {
        assert!(names.contains(&expected), "missing {expected} in {names:?}");
    }
    assert_eq!(first.len(), second.len());
    for ((na, ba), (nb, bb)) in first.iter().zip(&second) {
        assert_eq!(na, nb);
        assert!(ba == bb, "{na} differs between runs");
    }

    let ablation: serde_json::Value = serde_json::from_slice(&fs::read(a.path().join("ablation.json")).unwrap()).unwrap();
    let cells = ablation["cells"].as_array().unwrap();
    assert_eq!(cells.len(), 2);
    let no_dc = &cells[1]["rounds"];
    assert_eq!(no_dc[1]["dc_calls"], 0);
    assert_eq!(no_dc[1]["dc_loss_terms"], 0);
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(a.path().join("unc/summary.json")).unwrap()).unwrap();
    assert!(summary["max_sd"].as_f64().unwrap() > 0.0);
}
