//! Shared fixtures for the criterion benchmarks.

use ssdm_core::denoiser::{ConvDenoiser, NetHyper};
use ssdm_core::kspace::forward_model;
use ssdm_core::masks::make_mask;
use ssdm_core::phantoms::ellipse_phantom;
use ssdm_core::{ComplexImage, KSpaceData, MaskKind, MaskSpec, SamplingMask};

/// A phantom with its 4x Gaussian 1D acquisition.
pub struct Acquisition {
    pub x0: ComplexImage,
    pub mask: SamplingMask,
    pub y: KSpaceData,
}

pub fn acquisition(size: usize) -> Acquisition {
    let x0 = ellipse_phantom(size, 6, 1, true).expect("phantom");
    let mask = make_mask(&MaskSpec::new(MaskKind::Gaussian1d, 4.0, size / 8, 2), size, size).expect("mask");
    let y = forward_model(&x0, &mask, 0.0, 3).expect("acquisition");
    Acquisition { x0, mask, y }
}

pub fn small_net() -> ConvDenoiser<f32> {
    ConvDenoiser::new(NetHyper::small(), 0).expect("network")
}
