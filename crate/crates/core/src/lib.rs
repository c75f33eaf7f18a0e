//! High-frequency augmentation and multi-wave mixing for toy-scale person search.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: tensors, reverse-mode differentiation, gradient checks, file I/O
//! - [`wavelet`]: orthonormal 2D Haar transform and multi-level pyramids
//! - [`hfqe`]: LL quantization, high-frequency subband concatenation, top-K tokens
//! - [`tokens`]: multi-scale token maps and intra-batch token exchange
//! - [`encoder`]: the multi-wave mixing layer, encoder block, and cascade stage
//! - [`losses`]: proxy-based high-frequency loss, OIM, detection, staged total
//! - [`harness`]: synthetic identities, cascade training, retrieval metrics
//! - [`bench`]: mixing versus quadratic attention scaling study
//! - [`cli`]: the `hfwave` command line

pub mod bench;
pub mod cli;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod hfqe;
pub mod losses;
pub mod numerics;
pub mod tokens;
pub mod wavelet;

pub use error::{Error, Result};
pub use numerics::{Tape, Tensor, Var};
