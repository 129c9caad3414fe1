//! Deterministic testbed for domain-adaptive detection under noisy source
//! annotations.
//!
//! The crate simulates a two-stage detector at the proposal level and
//! implements, on top of an adversarially aligned baseline:
//!
//! * [`pim`]: mining of confident, unannotated proposals,
//! * [`mgrm`]: graph aggregation, prototype banks and relation-matrix
//!   regularization of noisily labeled features,
//! * [`eagr`]: an entropy-aware discriminator and a first-order meta update
//!   that reconciles gradients of clean and noisy samples,
//!
//! together with evaluation ([`evalkit`]) and annotation tooling ([`annotio`])
//! for real Pascal-VOC style datasets.

pub mod annotio;
pub mod diffcore;
pub mod eagr;
pub mod error;
pub mod evalkit;
pub mod gradsuite;
pub mod mgrm;
pub mod pim;
pub mod rng;
pub mod synthworld;
pub mod trainer;

pub use error::{Error, Result};
