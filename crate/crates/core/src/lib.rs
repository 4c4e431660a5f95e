//! Spatiotemporal field reconstruction from sparse, degraded observations
//! with a learned diffusion prior.

pub mod aodf;
pub mod denoiser;
pub mod error;
pub mod grid;
pub mod kv;
pub mod metrics;
pub mod net;
pub mod observe;
pub mod oracle;
pub mod rng;
pub mod sampler;
pub mod spectral;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use grid::{Field, GridSpec, MaskField, NormParams};
pub use observe::{Observation, OperatorKind};
