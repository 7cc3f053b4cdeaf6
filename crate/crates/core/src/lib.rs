//! Stable feature boosting.
//!
//! A predictor is split into a *stable* part, whose relationship with the
//! label holds in every environment, and an *unstable* part that is allowed
//! to change. The stable part is trained with an invariance penalty across
//! labeled environments. In a new, unlabeled environment the stable
//! predictions act as pseudo-labels for refitting the unstable part, the
//! refit is corrected for pseudo-label noise, and the two parts are fused in
//! logit space.
//!
//! This crate is `no_std` (it needs `alloc`) and performs no IO. File
//! formats, configuration and the experiment harness live in the `sfb`
//! crate.

#![cfg_attr(not(test), no_std)]
#![deny(unsafe_code)]

extern crate alloc;

pub mod adaptation;
pub mod calibration;
pub mod envs;
mod error;
pub mod linalg;
pub(crate) mod math;
pub mod nn;
pub mod prob;
pub mod training;

pub use error::{Error, Result};
