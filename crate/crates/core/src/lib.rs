//! Simulation, reconstruction, denoising and evaluation of echo-planar
//! diffusion-weighted MRI slices.

pub mod calibration;
pub mod denoiser;
pub mod epi;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod fft;
pub mod fieldio;
pub mod filter;
pub mod morphology;
pub mod motion;
pub mod par;
pub mod phasefield;
pub mod phantom;
pub mod plot;
pub mod rng;
pub mod slice;

pub use error::{Error, ErrorClass, Result};
pub use slice::{modulus, Complex64, ComplexSlice, Domain, Mask, RealSlice, Slice, Spacing, Volume};
