//! On-disk formats.
//!
//! CIQ tensors are a raw little-endian blob (`name.ciq`) plus a JSON sidecar
//! (`name.ciq.json`). Complex data is stored as interleaved `f32` pairs,
//! masks as one byte per cell; multi-coil stacks store coils back to back.
//!
//! Checkpoints are a single file: the magic `SSDM1`, a little-endian `u32`
//! format version, a `u64` header length, the JSON header and the `f32`
//! parameter blob.

use std::fs;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::denoiser::{ConvDenoiser, ModelKind, NetHyper};
use crate::error::{Error, Result};
use crate::kspace::{Domain, Frequency, Grid, Image};
use crate::masks::{MaskKind, SamplingMask};
use crate::schedule::NoiseSchedule;
use crate::training::{TrainedModel, TrainingMeta};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    C64le,
    U8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CiqHeader {
    pub height: usize,
    pub width: usize,
    pub dtype: Dtype,
    pub domain: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_coils: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_kind: Option<MaskKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub requested_af: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acs_lines: Option<usize>,
}

/// Sidecar path for a CIQ blob.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn read_header(path: &Path) -> Result<CiqHeader> {
    let text = fs::read_to_string(sidecar_path(path))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_ciq(path: &Path, header: &CiqHeader, blob: &[u8]) -> Result<()> {
    fs::write(path, blob)?;
    fs::write(sidecar_path(path), serde_json::to_string_pretty(header)? + "\n")?;
    Ok(())
}

fn encode_complex(data: &[Complex64], out: &mut Vec<u8>) {
    for z in data {
        out.extend_from_slice(&(z.re as f32).to_le_bytes());
        out.extend_from_slice(&(z.im as f32).to_le_bytes());
    }
}

fn decode_complex(blob: &[u8]) -> Vec<Complex64> {
    blob.chunks_exact(8)
        .map(|c| {
            let re = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            let im = f32::from_le_bytes([c[4], c[5], c[6], c[7]]);
            Complex64::new(re as f64, im as f64)
        })
        .collect()
}

/// Writes one or more same-shaped grids of one domain.
pub fn write_grids<D: Domain>(path: &Path, grids: &[Grid<D>]) -> Result<()> {
    let first = grids
        .first()
        .ok_or_else(|| Error::InvalidInput("nothing to write".into()))?;
    let mut blob = Vec::with_capacity(8 * first.len() * grids.len());
    for g in grids {
        crate::error::check_shape(first.shape(), g.shape())?;
        encode_complex(g.data(), &mut blob);
    }
    let header = CiqHeader {
        height: first.height(),
        width: first.width(),
        dtype: Dtype::C64le,
        domain: D::NAME.into(),
        n_coils: (grids.len() > 1).then_some(grids.len()),
        mask_kind: None,
        requested_af: None,
        acs_lines: None,
    };
    write_ciq(path, &header, &blob)
}

/// Reads every grid (coil) stored in a CIQ file of the given domain.
pub fn read_grids<D: Domain>(path: &Path) -> Result<Vec<Grid<D>>> {
    let header = read_header(path)?;
    if header.dtype != Dtype::C64le {
        return Err(Error::Format(format!("{} holds a mask, not complex data", path.display())));
    }
    if header.domain != D::NAME {
        return Err(Error::Format(format!(
            "{} is in the {} domain, expected {}",
            path.display(),
            header.domain,
            D::NAME
        )));
    }
    let blob = fs::read(path)?;
    let n = header.height * header.width;
    let coils = header.n_coils.unwrap_or(1);
    if n == 0 || coils == 0 || blob.len() != 8 * n * coils {
        return Err(Error::Format(format!(
            "{}: expected {} bytes, found {}",
            path.display(),
            8 * n * coils,
            blob.len()
        )));
    }
    decode_complex(&blob)
        .chunks(n)
        .map(|c| Grid::from_vec(header.height, header.width, c.to_vec()))
        .collect()
}

fn read_single<D: Domain>(path: &Path) -> Result<Grid<D>> {
    let mut grids = read_grids::<D>(path)?;
    if grids.len() != 1 {
        return Err(Error::Format(format!(
            "{} holds {} coils, expected one image",
            path.display(),
            grids.len()
        )));
    }
    Ok(grids.remove(0))
}

pub fn write_image(path: &Path, img: &Grid<Image>) -> Result<()> {
    write_grids(path, std::slice::from_ref(img))
}

pub fn read_image(path: &Path) -> Result<Grid<Image>> {
    read_single(path)
}

pub fn write_kspace(path: &Path, k: &Grid<Frequency>) -> Result<()> {
    write_grids(path, std::slice::from_ref(k))
}

pub fn read_kspace(path: &Path) -> Result<Grid<Frequency>> {
    read_single(path)
}

pub fn write_mask(path: &Path, mask: &SamplingMask) -> Result<()> {
    let blob: Vec<u8> = mask.cells().iter().map(|&b| u8::from(b)).collect();
    let header = CiqHeader {
        height: mask.height(),
        width: mask.width(),
        dtype: Dtype::U8,
        domain: Frequency::NAME.into(),
        n_coils: None,
        mask_kind: Some(mask.kind()),
        requested_af: Some(mask.requested_af()),
        acs_lines: Some(mask.acs_lines()),
    };
    write_ciq(path, &header, &blob)
}

pub fn read_mask(path: &Path) -> Result<SamplingMask> {
    let header = read_header(path)?;
    if header.dtype != Dtype::U8 {
        return Err(Error::Format(format!("{} is not a u8 mask", path.display())));
    }
    let blob = fs::read(path)?;
    if blob.len() != header.height * header.width {
        return Err(Error::Format(format!(
            "{}: expected {} bytes, found {}",
            path.display(),
            header.height * header.width,
            blob.len()
        )));
    }
    if blob.iter().any(|&b| b > 1) {
        return Err(Error::Format(format!("{}: mask values must be 0 or 1", path.display())));
    }
    let mask = SamplingMask::from_cells(header.height, header.width, blob.iter().map(|&b| b == 1).collect())?;
    Ok(mask.with_meta(
        header.mask_kind.unwrap_or(MaskKind::Full),
        header.requested_af.unwrap_or(1.0),
        header.acs_lines.unwrap_or(0),
    ))
}

pub const MAGIC: &[u8; 5] = b"SSDM1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    kind: ModelKind,
    hyper: NetHyper,
    #[serde(rename = "T")]
    t_steps: usize,
    gamma_bar: Vec<f64>,
    t0: usize,
    n_params: usize,
    training_meta: TrainingMeta,
}

pub fn checkpoint_bytes(model: &TrainedModel) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        kind: ModelKind::ConvResidual,
        hyper: model.net.hyper().clone(),
        t_steps: model.schedule.steps(),
        gamma_bar: model.schedule.gamma_bars().to_vec(),
        t0: model.t0,
        n_params: model.net.n_params(),
        training_meta: model.meta.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(17 + json.len() + 4 * header.n_params);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in model.net.params() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    Ok(out)
}

fn take<'a>(bytes: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Format("checkpoint is truncated".into()));
    }
    let (head, tail) = bytes.split_at(n);
    *bytes = tail;
    Ok(head)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<TrainedModel> {
    let mut rest = bytes;
    if take(&mut rest, MAGIC.len())? != MAGIC {
        return Err(Error::Format("not an SSDM1 checkpoint".into()));
    }
    let version = u32::from_le_bytes(take(&mut rest, 4)?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let len = u64::from_le_bytes(take(&mut rest, 8)?.try_into().expect("8 bytes"));
    let len = usize::try_from(len).map_err(|_| Error::Format("header length overflows".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(take(&mut rest, len)?)
        .map_err(|e| Error::Format(format!("bad checkpoint header: {e}")))?;
    if header.kind != ModelKind::ConvResidual {
        return Err(Error::Format("only trainable models are stored in checkpoints".into()));
    }
    if header.gamma_bar.len() != header.t_steps + 1 {
        return Err(Error::Format(format!(
            "gamma_bar has {} entries for T = {}",
            header.gamma_bar.len(),
            header.t_steps
        )));
    }
    let blob = take(&mut rest, 4 * header.n_params)?;
    if !rest.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes after parameters", rest.len())));
    }
    let params: Vec<f32> = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let schedule = NoiseSchedule::from_gamma_bar(header.gamma_bar)
        .map_err(|e| Error::Format(format!("bad schedule: {e}")))?;
    schedule
        .check_t(header.t0)
        .map_err(|e| Error::Format(format!("bad t0: {e}")))?;
    Ok(TrainedModel {
        net: ConvDenoiser::from_params(header.hyper, params)?,
        schedule,
        t0: header.t0,
        meta: header.training_meta,
    })
}

pub fn save_checkpoint(model: &TrainedModel, path: &Path) -> Result<()> {
    fs::write(path, checkpoint_bytes(model)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TrainedModel> {
    checkpoint_from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{InitScheme, NetHyper};
    use crate::kspace::{fft2c, ComplexImage};
    use crate::masks::{make_mask, MaskSpec};
    use crate::schedule::{make_cosine_schedule, sample_noise};

    fn model() -> TrainedModel {
        let hyper = NetHyper {
            widths: vec![4, 8],
            blocks_per_level: 1,
            attention: false,
            gamma_embed_dim: 4,
            embed_hidden: 6,
            init: InitScheme::FanIn,
        };
        TrainedModel {
            net: ConvDenoiser::new(hyper, 3).unwrap(),
            schedule: make_cosine_schedule(16).unwrap(),
            t0: 2,
            meta: TrainingMeta {
                stage: "pretrain".into(),
                round: 0,
                steps_run: 5,
                final_loss: 0.25,
                seed: 1,
                distill: None,
            },
        }
    }

    #[test]
    fn checkpoint_round_trip_is_byte_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ssdm");
        let m = model();
        save_checkpoint(&m, &p).unwrap();
        let loaded = load_checkpoint(&p).unwrap();
        assert_eq!(loaded, m);
        assert_eq!(loaded.schedule.gamma_bars().len(), 17);
        let q = dir.path().join("n.ssdm");
        save_checkpoint(&loaded, &q).unwrap();
        assert_eq!(fs::read(&p).unwrap(), fs::read(&q).unwrap());
    }

    #[test]
    fn damaged_checkpoints_are_format_errors() {
        let bytes = checkpoint_bytes(&model()).unwrap();
        for cut in [0, 3, 9, 20, bytes.len() - 1] {
            assert!(matches!(checkpoint_from_bytes(&bytes[..cut]), Err(Error::Format(_))), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(checkpoint_from_bytes(&bad), Err(Error::Format(_))));
        let mut future = bytes;
        future[5] = 2;
        assert!(matches!(checkpoint_from_bytes(&future), Err(Error::Format(_))));
    }

    #[test]
    fn ciq_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let img = sample_noise(4, 6, 1);
        let p = dir.path().join("x.ciq");
        write_image(&p, &img).unwrap();
        let back = read_image(&p).unwrap();
        assert!(back.max_abs_diff(&img) < 1e-6);
        assert!(read_kspace(&p).is_err());
        let header = read_header(&p).unwrap();
        assert_eq!((header.height, header.width, header.dtype), (4, 6, Dtype::C64le));

        let k = fft2c(&img).unwrap();
        let kp = dir.path().join("k.ciq");
        write_kspace(&kp, &k).unwrap();
        assert!(read_kspace(&kp).unwrap().max_abs_diff(&k) < 1e-6);

        let mask = make_mask(&MaskSpec::new(MaskKind::Gaussian1d, 2.0, 2, 4), 4, 6).unwrap();
        let mp = dir.path().join("m.ciq");
        write_mask(&mp, &mask).unwrap();
        assert_eq!(read_mask(&mp).unwrap(), mask);
    }

    #[test]
    fn multi_coil_ciq() {
        let dir = tempfile::tempdir().unwrap();
        let coils: Vec<ComplexImage> = (0..3).map(|s| sample_noise(4, 4, s)).collect();
        let p = dir.path().join("c.ciq");
        write_grids(&p, &coils).unwrap();
        assert_eq!(read_header(&p).unwrap().n_coils, Some(3));
        let back = read_grids::<Image>(&p).unwrap();
        assert_eq!(back.len(), 3);
        assert!(read_image(&p).is_err());
    }
}
