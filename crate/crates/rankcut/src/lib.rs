//! Generalized rank constraints for linear-Gaussian causal models under
//! linear selection mechanisms.
//!
//! The crate provides:
//! - a graph core with ancestor machinery, d-separation, and
//!   selection-augmented graphs ([`graph`]);
//! - linear-Gaussian SEMs with linear selection conditions, closed-form and
//!   Monte Carlo post-selection covariances ([`model`], [`sample`]);
//! - the graphical rank criterion: minimum t-separation computed by max-flow
//!   over a two-layer network, with a brute-force oracle ([`trek`], [`flow`]);
//! - statistical rank estimation from data (singular-value thresholding and
//!   sequential canonical-correlation tests) ([`rank`]);
//! - a complete FCI implementation over pluggable conditional-independence
//!   oracles, including a rank-based oracle for latent one-factor models
//!   ([`fci`], [`pag`]);
//! - a synthetic experiment harness with PAG comparison metrics ([`eval`]).

pub mod error;
pub mod eval;
pub mod fci;
pub mod flow;
pub mod graph;
pub mod model;
pub mod pag;
pub mod rank;
pub mod sample;
pub mod trek;

pub use error::{Error, Result};
