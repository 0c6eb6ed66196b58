//! Dual-branch face-forgery detector combining spatial and frequency features
//! through learnable cross-stitch units.
//!
//! The crate provides:
//!
//! - a minimal dense-tensor reverse-mode autodiff engine ([`tape`]),
//! - frequency-domain feature extraction: 2-D DCT, FFT amplitude, and
//!   single-level Haar DWT with log scaling and branch normalization
//!   ([`spectral`]),
//! - cross-stitch units with analytic gradients ([`stitch`]),
//! - the dual-branch separable-convolution network ([`network`]),
//! - a deterministic Adam + plateau-schedule training loop ([`train`]),
//! - a deterministic synthetic forgery corpus with upsampling spectral
//!   artifacts ([`synth`]),
//! - accuracy / ROC-AUC evaluation with exact tie handling ([`metrics`]),
//! - binary checkpoints, spectrum heatmaps, and finite-difference gradient
//!   check suites ([`checkpoint`], [`heatmap`], [`gradcheck`]).
//!
//! Everything is 64-bit floating point and bit-reproducible for a fixed seed,
//! independent of the worker-thread count (see [`threads`]).

pub mod error;
pub mod tensor;
pub mod tape;
pub mod stitch;
pub mod spectral;
pub mod network;
pub mod train;
pub mod synth;
pub mod metrics;
pub mod checkpoint;
pub mod heatmap;
pub mod gradcheck;
pub mod threads;

pub use error::{Error, Result};
pub use tensor::Tensor;
