//! Core of a bias-resistant visual question answering pipeline.
//!
//! The crate is `no_std` (with `alloc`) and holds everything that is pure
//! computation:
//!
//! - [`datagen`]: a synthetic grid-world VQA dataset with a controllable
//!   question→answer bias,
//! - [`autodiff`]: a small tape-based reverse-mode differentiator over dense
//!   tensors,
//! - [`model`]: the two-branch network (original branch plus an adversarial
//!   random-crop branch behind a gradient reversal operator),
//! - [`objective`]: cross entropy, branch KL divergence and their composition,
//! - [`trainer`]: a deterministic Adam training loop,
//! - [`evaluator`]: standard and random-image accuracy, and the harmonic-mean
//!   bias metric.
//!
//! File formats, checkpoints and the command-line driver live in the
//! `vqa-debias` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod datagen;
pub mod error;
pub mod evaluator;
pub mod model;
pub mod objective;
pub mod optim;
pub mod real;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use real::Real;
pub use tensor::Tensor;
