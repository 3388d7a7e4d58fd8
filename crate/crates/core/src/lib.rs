//! Conditional 3D wavelet diffusion for brain-MRI lesion inpainting and
//! missing-modality synthesis.
//!
//! Volumes are mapped to eight half-resolution Haar subbands ([`wavelet`]),
//! diffused with an x0-predicting model ([`diffusion`], [`denoiser`]) and
//! conditioned on known tissue or modalities ([`conditioning`]). Supporting
//! modules cover training losses, mask generation, metrics and NIfTI I/O.

// `!(x > 0.0)` style guards are deliberate: they reject NaN too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod conditioning;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod manifest;
pub mod maskgen;
pub mod metrics;
pub mod nifti;
pub mod objectives;
pub mod schedule;
pub mod selftest;
pub mod synthetic;
pub mod volume;
pub mod wavelet;

pub use error::{Error, Result};
pub use volume::{Dims, MaskVolume, Modality, Volume};
pub use wavelet::{dwt3, idwt3, SubbandStack};
