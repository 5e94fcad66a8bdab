//! Surrogate model mapping photoinjector RF phases to longitudinal
//! phase-space screen images.
//!
//! The crate contains a small reverse-mode tensor engine ([`tensor`]), the
//! encoder/decoder network ([`model`]), the multi-scale SSIM training loss
//! ([`loss`]), a synthetic stand-in for the injector beamline that produces
//! training images ([`beamline`]), physics extractors for screen images
//! ([`diagnostics`]) and the training workflows ([`trainer`]).

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod beamline;
pub mod diagnostics;
pub mod digest;
pub mod error;
pub mod loss;
pub mod model;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
