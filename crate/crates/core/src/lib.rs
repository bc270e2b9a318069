//! Single-step diffusion reconstruction of undersampled MRI k-space.
//!
//! The crate covers the whole chain from synthetic data to evaluation:
//!
//! * [`kspace`]: centered orthonormal FFTs, the masked acquisition model,
//!   zero-filling and projection data consistency.
//! * [`masks`]: 1D/2D Gaussian, random and variable-density Poisson-disc
//!   undersampling patterns.
//! * [`schedule`]: cosine noise schedule, v-parameterization algebra,
//!   deterministic DDIM steps, shortcut initialization and grid halving.
//! * [`denoiser`]: the v-predicting model interface, an analytic Gaussian
//!   posterior oracle and a small trainable residual conv net.
//! * [`training`]: conditional pretraining and iterative selective distillation.
//! * [`sampler`]: full, shortcut and single-step reconstruction pipelines.
//! * [`multicoil`]: Walsh coil sensitivities, matched-filter combination and
//!   the multi-coil single-step pipeline.
//! * [`metrics`]: PSNR, SSIM, XSIM and HFEN.
//! * [`phantoms`]: random ellipse phantoms and training-pair simulation.
//! * [`io`]: CIQ tensor containers and model checkpoints.
//! * [`experiment`]: the DC / selective-distillation ablation harness.

pub mod denoiser;
pub mod error;
pub mod experiment;
pub mod io;
pub mod kspace;
pub mod masks;
pub mod metrics;
pub mod multicoil;
pub mod phantoms;
pub mod sampler;
pub mod schedule;
pub mod training;

pub use denoiser::{Denoiser, DenoiserModel, GaussianToyProblem, NetHyper};
pub use error::{Error, Result};
pub use kspace::{ComplexImage, KSpaceData};
pub use masks::{MaskKind, MaskSpec, SamplingMask};
pub use schedule::NoiseSchedule;
pub use training::TrainedModel;

/// Derives a child seed from a parent seed and a stream index (SplitMix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
