//! Few-view stationary cardiac SPECT reconstruction.
//!
//! The crate covers the whole dual-domain pipeline: a pinhole system matrix
//! and projector ([`geometry`]), MLEM ([`mlem`]), procedural phantoms and
//! Poisson acquisitions ([`phantom`]), a small reverse-mode autodiff engine
//! ([`autodiff`]), the projection-to-image transformer with its image-domain
//! refiner and WGAN critic ([`model`]), the training objectives ([`losses`]),
//! the training loop ([`training`]) and image-quality metrics ([`metrics`]).

pub mod autodiff;
pub mod cli;
pub mod datamodel;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod mlem;
pub mod model;
pub mod phantom;
pub mod training;

pub use error::{Error, Result};
