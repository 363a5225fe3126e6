//! Federated domain-adversarial training with a discriminator-only proximal
//! term, plus the centralized and federated baselines it is compared against.
//!
//! Modules, bottom up:
//!
//! * [`tensor`]: `f64` tensors and a reverse-mode tape with gradient reversal
//! * [`nn`]: feature extractor, age regressor and site discriminator
//! * [`objective`]: loss terms and the reversal-strength schedule
//! * [`optim`]: Adam, SGD+momentum, clipping, plateau decay
//! * [`data`]: synthetic multi-site generator and CSV ingestion
//! * [`fed`]: federated and centralized training loops
//! * [`harness`]: multi-seed experiments, sweeps and report emission

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod data;
pub mod error;
pub mod fed;
pub mod harness;
pub mod nn;
pub mod objective;
pub mod optim;
pub mod tensor;

pub use error::{Error, Result};
