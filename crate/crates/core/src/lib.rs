//! Hierarchical few-shot generative models over sets.
//!
//! A set `X` of same-class observations is summarized by a context latent `c`
//! (hierarchical across `L` layers for the HFSGM variant) while each observation
//! carries its own ladder of latents `z_1..z_L`. Training maximizes a variational
//! lower bound with top-down amortized inference; evaluation uses importance
//! weighting; sampling supports unconditional, single-pass conditional and
//! refined (Markov chain) conditional generation.
//!
//! The [`oracle`] module provides a linear-Gaussian set model with closed-form
//! marginals and posteriors used to certify the bounds and samplers.

pub mod aggregation;
pub mod checkpoint;
pub mod config;
pub mod distributions;
pub mod episodes;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod objective;
pub mod optim;
pub mod oracle;
pub mod params;
pub mod rng;
pub mod sampling;
pub mod synthetic;
pub mod tape;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
